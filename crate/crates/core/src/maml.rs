//! Single-initialization MAML baseline, written directly against the
//! autodiff graph without any basis machinery.

use crate::autodiff::CompGraph;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::param::ParamVector;
use crate::tasks::Episode;

/// `θ ← θ - β/B ∇_θ Σ_i L(Q_i; φ_i)` with `φ_i` the result of `k` support
/// steps of size `alpha` from `θ`. Returns the mean query loss before the update.
pub fn maml_step(
    spec: &ModelSpec,
    theta: &mut ParamVector,
    batch: &[Episode],
    alpha: f64,
    beta: f64,
    k: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("MAML step needs at least one task".into()));
    }
    let mut total = vec![0.0; theta.dim()];
    let mut loss = 0.0;
    for ep in batch {
        let mut g = CompGraph::new();
        let p = g.param(theta.to_tensor());
        let mut phi = p;
        for _ in 0..k {
            let l = spec.loss(&mut g, phi, &ep.support)?;
            let grad = g.grad_graph(l, &[phi])?[0];
            let step = g.scale(grad, alpha);
            phi = g.sub(phi, step);
        }
        let q = spec.loss(&mut g, phi, &ep.query)?;
        loss += g.value(q).item();
        let grad = g.grad_through_update(q, &[p])?.remove(0);
        for (t, v) in total.iter_mut().zip(grad.data()) {
            *t += v;
        }
    }
    theta.axpy(-beta / batch.len() as f64, &total);
    Ok(loss / batch.len() as f64)
}
