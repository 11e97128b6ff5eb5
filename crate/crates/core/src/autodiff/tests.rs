use super::*;

fn half_sq_norm(g: &mut CompGraph, x: NodeId) -> NodeId {
    let d = g.dot(x, x);
    g.scale(d, 0.5)
}

/// tanh MLP 2 -> 3 -> 1 on a fixed batch; params are a flat 13-vector.
fn tiny_mlp_loss(g: &mut CompGraph, p: NodeId) -> NodeId {
    let x = g.constant(Tensor::new(4, 2, vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8, 1.0, 1.0]));
    let y = g.constant(Tensor::column(vec![0.3, -0.2, 0.9, 0.1]));
    let w1 = g.slice(p, 0, 2, 3);
    let b1 = g.slice(p, 6, 1, 3);
    let w2 = g.slice(p, 9, 3, 1);
    let b2 = g.slice(p, 12, 1, 1);
    let h = g.matmul(x, w1);
    let b1r = g.broadcast_rows(b1, 4);
    let h = g.add(h, b1r);
    let h = g.tanh(h);
    let o = g.matmul(h, w2);
    let b2r = g.broadcast_rows(b2, 4);
    let o = g.add(o, b2r);
    let e = g.sub(o, y);
    let sq = g.mul(e, e);
    g.mean(sq)
}

fn tiny_params() -> Vec<f64> {
    vec![0.1, -0.4, 0.7, 0.3, 0.9, -0.2, 0.05, -0.1, 0.2, 0.6, -0.8, 0.4, 0.15]
}

#[test]
fn half_square_norm_gradient_is_identity() {
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(vec![1.0, 2.0]));
    let l = half_sq_norm(&mut g, p);
    let grads = g.grad(l, &[p]).unwrap();
    assert_eq!(grads[0].data(), &[1.0, 2.0]);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(vec![3.0, -1.0, 2.0]));
    let l = g.constant(Tensor::scalar(7.0));
    let grads = g.grad(l, &[p]).unwrap();
    assert_eq!(grads[0].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let theta = tiny_params();
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(theta.clone()));
    let l = tiny_mlp_loss(&mut g, p);
    let analytic = g.grad(l, &[p]).unwrap().remove(0);
    let numeric = finite_diff_oracle(
        |v| {
            let mut g = CompGraph::new();
            let p = g.param(Tensor::row(v.to_vec()));
            let l = tiny_mlp_loss(&mut g, p);
            g.value(l).item()
        },
        &theta,
        1e-5,
    );
    let err = max_relative_error(analytic.data(), &numeric);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn grad_leaves_graph_untouched_and_is_idempotent() {
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(tiny_params()));
    let l = tiny_mlp_loss(&mut g, p);
    let n = g.len();
    let first = g.grad(l, &[p]).unwrap();
    assert_eq!(g.len(), n);
    let second = g.grad(l, &[p]).unwrap();
    assert_eq!(first, second);
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(tiny_params()));
    let a = tiny_mlp_loss(&mut g, p);
    let b = half_sq_norm(&mut g, p);
    let ab = g.add(a, b);
    let ga = g.grad(a, &[p]).unwrap().remove(0);
    let gb = g.grad(b, &[p]).unwrap().remove(0);
    let gab = g.grad(ab, &[p]).unwrap().remove(0);
    for ((x, y), z) in ga.data().iter().zip(gb.data()).zip(gab.data()) {
        assert!((x + y - z).abs() <= 1e-12);
    }
}

#[test]
fn second_order_through_one_quadratic_step() {
    let (theta, alpha) = (1.7, 0.1);
    let mut g = CompGraph::new();
    let p = g.param(Tensor::scalar(theta));
    let inner = half_sq_norm(&mut g, p);
    let step = g.grad_graph(inner, &[p]).unwrap()[0];
    let scaled = g.scale(step, alpha);
    let phi = g.sub(p, scaled);
    let outer = half_sq_norm(&mut g, phi);
    let meta = g.grad_through_update(outer, &[p]).unwrap();
    let expected = (1.0 - alpha) * (1.0 - alpha) * theta;
    assert!((meta[0].item() - expected).abs() < 1e-15);
}

#[test]
fn zero_step_size_reduces_to_plain_gradient() {
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(tiny_params()));
    let inner = tiny_mlp_loss(&mut g, p);
    let step = g.grad_graph(inner, &[p]).unwrap()[0];
    let scaled = g.scale(step, 0.0);
    let phi = g.sub(p, scaled);
    let outer = tiny_mlp_loss(&mut g, phi);
    let meta = g.grad_through_update(outer, &[p]).unwrap().remove(0);
    let plain = g.grad(inner, &[p]).unwrap().remove(0);
    assert_eq!(meta, plain);
}

#[test]
fn second_order_mlp_matches_finite_differences() {
    let alpha = 0.3;
    let unrolled = |g: &mut CompGraph, p: NodeId| {
        let mut phi = p;
        for _ in 0..2 {
            let inner = tiny_mlp_loss(g, phi);
            let step = g.grad_graph(inner, &[phi]).unwrap()[0];
            let scaled = g.scale(step, alpha);
            phi = g.sub(phi, scaled);
        }
        let reg = half_sq_norm(g, phi);
        let l = tiny_mlp_loss(g, phi);
        g.add(l, reg)
    };
    let theta = tiny_params();
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(theta.clone()));
    let out = unrolled(&mut g, p);
    let analytic = g.grad_through_update(out, &[p]).unwrap().remove(0);
    let numeric = finite_diff_oracle(
        |v| {
            let mut g = CompGraph::new();
            let p = g.param(Tensor::row(v.to_vec()));
            let out = unrolled(&mut g, p);
            g.value(out).item()
        },
        &theta,
        1e-5,
    );
    let err = max_relative_error(analytic.data(), &numeric);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn detached_inner_step_is_rejected() {
    let mut g = CompGraph::new();
    let p = g.param(Tensor::scalar(2.0));
    let inner = half_sq_norm(&mut g, p);
    let step = g.grad_detached(inner, &[p]).unwrap()[0];
    let scaled = g.scale(step, 0.1);
    let phi = g.sub(p, scaled);
    let outer = half_sq_norm(&mut g, phi);
    assert!(matches!(g.grad_through_update(outer, &[p]), Err(AutodiffError::DetachedGradient { .. })));
    // the first-order gradient still works and ignores the detached path
    let fo = g.grad(outer, &[p]).unwrap();
    assert!((fo[0].item() - 1.8).abs() < 1e-15);
}

#[test]
fn backward_without_forward_is_a_usage_error() {
    let mut g = CompGraph::new();
    assert_eq!(g.grad(NodeId(0), &[]), Err(AutodiffError::NoForward));
    let p = g.param(Tensor::row(vec![1.0, 2.0]));
    assert_eq!(g.grad(p, &[p]), Err(AutodiffError::NonScalarOutput { rows: 1, cols: 2 }));
}

#[test]
fn unary_ops_match_finite_differences() {
    // exp, ln, recip, abs, relu, transpose, sum_cols, broadcast_cols in one expression
    let f = |g: &mut CompGraph, p: NodeId| {
        let m = g.slice(p, 0, 2, 2);
        let t = g.transpose(m);
        let e = g.exp(t);
        let s = g.sum_cols(e);
        let lg = g.ln(s);
        let bc = g.broadcast_cols(lg, 2);
        let r = g.recip(e);
        let a = g.abs(m);
        let rl = g.relu(m);
        let x = g.mul(bc, r);
        let y = g.add(a, rl);
        let z = g.mul(x, y);
        g.sum(z)
    };
    let theta = vec![0.4, -1.2, 0.7, 2.0];
    let mut g = CompGraph::new();
    let p = g.param(Tensor::row(theta.clone()));
    let out = f(&mut g, p);
    let analytic = g.grad(out, &[p]).unwrap().remove(0);
    let numeric = finite_diff_oracle(
        |v| {
            let mut g = CompGraph::new();
            let p = g.param(Tensor::row(v.to_vec()));
            let out = f(&mut g, p);
            g.value(out).item()
        },
        &theta,
        1e-6,
    );
    assert!(max_relative_error(analytic.data(), &numeric) < 1e-7);
}

#[test]
fn finite_diff_oracle_examples() {
    let g = finite_diff_oracle(|v| v[0] * v[0], &[1.0], 1e-5);
    assert!((g[0] - 2.0).abs() < 1e-8);
    let step: f64 = 1e-5;
    let g = finite_diff_oracle(|_| 4.2, &[1.0, -3.0], step);
    assert!(g.iter().all(|v| v.abs() <= step * step));
}
