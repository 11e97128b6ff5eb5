//! Task models evaluated against flattened parameter vectors.
//!
//! Parameter layout: layers in declaration order, and within a layer the
//! `fan_in x fan_out` weight matrix (row-major) followed by the `fan_out`
//! bias. Inputs are row-per-sample, so a layer computes `x W + b`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CompGraph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::param::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Single real output scored with mean squared error.
    Regression,
    /// One logit per class scored with cross-entropy.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Widths from input to output, e.g. `[1, 40, 40, 1]`.
    pub layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub head: Head,
}

/// Offsets of one dense layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Labelled samples, one row of `x` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub y: Targets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `n x outputs` regression targets.
    Values(Tensor),
    /// Class indices.
    Labels(Vec<usize>),
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

impl ModelSpec {
    pub fn mlp(layers: Vec<usize>, activation: Activation, head: Head) -> Self {
        Self { layers, activation, head }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Config("model needs at least an input and an output width".into()));
        }
        if self.layers.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        match self.head {
            Head::Regression if self.outputs() != 1 => {
                Err(Error::Config(format!("regression head needs 1 output, got {}", self.outputs())))
            }
            Head::Classification if self.outputs() < 2 => {
                Err(Error::Config("classification head needs at least 2 outputs".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layers.last().expect("validated model has layers")
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layers
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let l = LayerLayout { fan_in, fan_out, weight_offset: offset, bias_offset: offset + fan_in * fan_out };
                offset += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Gaussian weights with variance `gain^2 / fan_in`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, gain: f64, rng: &mut R) -> ParamVector {
        let mut data = vec![0.0; self.num_params()];
        for l in self.layout() {
            let std = gain / (l.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite init std");
            for w in &mut data[l.weight_offset..l.bias_offset] {
                *w = normal.sample(rng);
            }
        }
        ParamVector::new(data)
    }

    /// Splits a flat vector into per-layer `(weights, bias)` pairs.
    pub fn unflatten(&self, params: &ParamVector) -> Result<Vec<(Tensor, Tensor)>> {
        self.check_len(params.dim())?;
        let p = params.as_slice();
        Ok(self
            .layout()
            .into_iter()
            .map(|l| {
                let w = Tensor::new(l.fan_in, l.fan_out, p[l.weight_offset..l.bias_offset].to_vec());
                let b = Tensor::row(p[l.bias_offset..l.bias_offset + l.fan_out].to_vec());
                (w, b)
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[(Tensor, Tensor)]) -> Result<ParamVector> {
        let layout = self.layout();
        if layers.len() != layout.len() {
            return Err(Error::Config(format!("expected {} layers, got {}", layout.len(), layers.len())));
        }
        let mut data = Vec::with_capacity(self.num_params());
        for ((w, b), l) in layers.iter().zip(&layout) {
            if w.shape() != (l.fan_in, l.fan_out) || b.shape() != (1, l.fan_out) {
                return Err(Error::Config("layer shape does not match model spec".into()));
            }
            data.extend_from_slice(w.data());
            data.extend_from_slice(b.data());
        }
        Ok(ParamVector::new(data))
    }

    fn check_len(&self, got: usize) -> Result<()> {
        let expected = self.num_params();
        if got != expected {
            return Err(Error::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// Records `f(x; params)` on the graph. `params` must be a `1 x d` node.
    pub fn forward(&self, g: &mut CompGraph, params: NodeId, x: &Tensor) -> Result<NodeId> {
        let (rows, cols) = g.shape(params);
        if rows != 1 {
            return Err(Error::Config("parameter node must be a row vector".into()));
        }
        self.check_len(cols)?;
        if x.cols() != self.inputs() {
            return Err(Error::InputWidth { expected: self.inputs(), got: x.cols() });
        }
        let n = x.rows();
        let layout = self.layout();
        let mut h = g.constant(x.clone());
        for (i, l) in layout.iter().enumerate() {
            let w = g.slice(params, l.weight_offset, l.fan_in, l.fan_out);
            let b = g.slice(params, l.bias_offset, 1, l.fan_out);
            let z = g.matmul(h, w);
            let bb = g.broadcast_rows(b, n);
            h = g.add(z, bb);
            if i + 1 < layout.len() {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Relu => g.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Mean loss of `params` on `samples`: MSE for regression heads,
    /// cross-entropy for classification heads.
    pub fn loss(&self, g: &mut CompGraph, params: NodeId, samples: &Samples) -> Result<NodeId> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let out = self.forward(g, params, &samples.x)?;
        match (&samples.y, self.head) {
            (Targets::Values(t), Head::Regression) => loss_mse(g, out, t),
            (Targets::Labels(labels), Head::Classification) => loss_cross_entropy(g, out, labels),
            _ => Err(Error::TargetMismatch("target kind does not match model head".into())),
        }
    }

    /// Plain evaluation without keeping a graph around.
    pub fn predict(&self, params: &ParamVector, x: &Tensor) -> Result<Tensor> {
        let mut g = CompGraph::new();
        let p = g.constant(params.to_tensor());
        let out = self.forward(&mut g, p, x)?;
        Ok(g.value(out).clone())
    }
}

/// `(1/n) Σ_rows ‖pred - target‖²`
pub fn loss_mse(g: &mut CompGraph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    if g.shape(pred) != target.shape() {
        return Err(Error::TargetMismatch(format!(
            "prediction {:?} vs target {:?}",
            g.shape(pred),
            target.shape()
        )));
    }
    if target.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = target.rows() as f64;
    let t = g.constant(target.clone());
    let e = g.sub(pred, t);
    let sq = g.mul(e, e);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n))
}

/// Mean softmax cross-entropy of `n x classes` logits against class indices.
pub fn loss_cross_entropy(g: &mut CompGraph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, classes) = g.shape(logits);
    if n != labels.len() {
        return Err(Error::TargetMismatch(format!("{n} logit rows vs {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    // Row maxima enter as constants; log-sum-exp is invariant to the shift.
    let lv = g.value(logits);
    let mut shift = Vec::with_capacity(n * classes);
    for r in 0..n {
        let m = (0..classes).map(|c| lv.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        shift.extend(std::iter::repeat_n(m, classes));
    }
    let mut onehot = vec![0.0; n * classes];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * classes + l] = 1.0;
    }
    let shift = g.constant(Tensor::new(n, classes, shift));
    let onehot = g.constant(Tensor::new(n, classes, onehot));
    let z = g.sub(logits, shift);
    let e = g.exp(z);
    let s = g.sum_cols(e);
    let lse = g.ln(s);
    let picked = g.mul(z, onehot);
    let picked = g.sum_cols(picked);
    let nll = g.sub(lse, picked);
    let total = g.sum(nll);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let best = (0..logits.cols())
                .max_by(|&a, &b| logits.get(r, a).total_cmp(&logits.get(r, b)))
                .unwrap_or(0);
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_oracle, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reg_spec() -> ModelSpec {
        ModelSpec::mlp(vec![2, 5, 3, 1], Activation::Tanh, Head::Regression)
    }

    /// Straight-line reimplementation, no graph machinery.
    fn reference_forward(spec: &ModelSpec, p: &[f64], x: &Tensor) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| (0..x.cols()).map(|c| x.get(r, c)).collect()).collect();
        let layout = spec.layout();
        for (i, l) in layout.iter().enumerate() {
            rows = rows
                .iter()
                .map(|h| {
                    (0..l.fan_out)
                        .map(|o| {
                            let mut z = p[l.bias_offset + o];
                            for (k, hk) in h.iter().enumerate() {
                                z += hk * p[l.weight_offset + k * l.fan_out + o];
                            }
                            if i + 1 < layout.len() {
                                z.tanh()
                            } else {
                                z
                            }
                        })
                        .collect()
                })
                .collect();
        }
        rows
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = ModelSpec::mlp(vec![3, 1], Activation::Tanh, Head::Regression);
        let out = spec.predict(&ParamVector::zeros(4), &Tensor::new(2, 3, vec![1.0, -2.0, 5.0, 0.3, 0.1, 9.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = ModelSpec::mlp(vec![2, 2], Activation::Tanh, Head::Classification);
        let p = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let out = spec.predict(&p, &Tensor::row(vec![1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let spec = reg_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = spec.init_params(1.0, &mut rng);
        let x = Tensor::new(4, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, -0.7, 0.0, 1.3]);
        let out = spec.predict(&p, &x).unwrap();
        let reference = reference_forward(&spec, p.as_slice(), &x);
        for (r, row) in reference.iter().enumerate() {
            assert!((out.get(r, 0) - row[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn flatten_inverts_unflatten() {
        let spec = reg_spec();
        let p = ParamVector::new((0..spec.num_params()).map(|i| i as f64 * 0.5 - 3.0).collect());
        assert_eq!(spec.flatten(&spec.unflatten(&p).unwrap()).unwrap(), p);
        assert_eq!(spec.num_params(), 2 * 5 + 5 + 5 * 3 + 3 + 3 + 1);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let spec = reg_spec();
        let mut g = CompGraph::new();
        let p = g.param(Tensor::row(vec![0.0; 3]));
        assert!(matches!(
            spec.forward(&mut g, p, &Tensor::row(vec![0.0, 0.0])),
            Err(Error::DimensionMismatch { got: 3, .. })
        ));
    }

    #[test]
    fn linear_model_losses() {
        let spec = ModelSpec::mlp(vec![1, 1], Activation::Tanh, Head::Regression);
        let samples = |x: f64, y: f64| Samples { x: Tensor::row(vec![x]), y: Targets::Values(Tensor::row(vec![y])) };
        let mut g = CompGraph::new();
        let p = g.param(Tensor::row(vec![0.0, 0.0]));
        let l = spec.loss(&mut g, p, &samples(1.0, 0.0)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // weight 1, bias 0 against y = 2x at x = 1
        let p = g.param(Tensor::row(vec![1.0, 0.0]));
        let l = spec.loss(&mut g, p, &samples(1.0, 2.0)).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let spec = ModelSpec::mlp(vec![1, 1], Activation::Tanh, Head::Regression);
        let mut g = CompGraph::new();
        let p = g.param(Tensor::row(vec![0.0, 0.0]));
        let empty = Samples { x: Tensor::zeros(0, 1), y: Targets::Values(Tensor::zeros(0, 1)) };
        assert!(matches!(spec.loss(&mut g, p, &empty), Err(Error::EmptyBatch)));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = CompGraph::new();
        let uniform = g.constant(Tensor::filled(3, 5, 0.7));
        let l = loss_cross_entropy(&mut g, uniform, &[0, 3, 4]).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);

        let mut confident = vec![0.0; 4];
        confident[2] = 20.0;
        let c = g.constant(Tensor::row(confident));
        let l = loss_cross_entropy(&mut g, c, &[2]).unwrap();
        assert!(g.value(l).item() >= 0.0 && g.value(l).item() <= 1e-6);

        let logits = [0.3, -1.2, 2.5, 0.0, 1.1, -0.4];
        let labels = [2, 0];
        let node = g.constant(Tensor::new(2, 3, logits.to_vec()));
        let l = loss_cross_entropy(&mut g, node, &labels).unwrap();
        let by_hand: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| {
                let row = &logits[r * 3..r * 3 + 3];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[y].exp() / z).ln()
            })
            .sum::<f64>()
            / 2.0;
        assert!((g.value(l).item() - by_hand).abs() < 1e-12);

        assert!(matches!(loss_cross_entropy(&mut g, node, &[0, 3]), Err(Error::InvalidLabel { label: 3, classes: 3 })));
    }

    #[test]
    fn mse_is_zero_on_exact_prediction() {
        let mut g = CompGraph::new();
        let t = Tensor::column(vec![1.0, -2.0, 0.5]);
        let p = g.constant(t.clone());
        let l = loss_mse(&mut g, p, &t).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let spec = ModelSpec::mlp(vec![2, 4, 3], Activation::Tanh, Head::Classification);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = spec.init_params(1.0, &mut rng);
        let samples = Samples {
            x: Tensor::new(3, 2, vec![0.5, -0.2, 1.0, 1.5, -0.8, 0.4]),
            y: Targets::Labels(vec![0, 2, 1]),
        };
        let eval = |v: &[f64]| {
            let mut g = CompGraph::new();
            let p = g.param(Tensor::row(v.to_vec()));
            let l = spec.loss(&mut g, p, &samples).unwrap();
            g.value(l).item()
        };
        let mut g = CompGraph::new();
        let p = g.param(theta.to_tensor());
        let l = spec.loss(&mut g, p, &samples).unwrap();
        let analytic = g.grad(l, &[p]).unwrap().remove(0);
        let numeric = finite_diff_oracle(eval, theta.as_slice(), 1e-5);
        assert!(max_relative_error(analytic.data(), &numeric) <= 1e-6);
    }

    #[test]
    fn relu_model_gradient_matches_finite_differences() {
        let spec = ModelSpec::mlp(vec![1, 6, 1], Activation::Relu, Head::Regression);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = spec.init_params(1.0, &mut rng);
        let samples = Samples { x: Tensor::column(vec![0.3, -0.9, 1.7]), y: Targets::Values(Tensor::column(vec![1.0, 0.0, -1.0])) };
        let eval = |v: &[f64]| {
            let mut g = CompGraph::new();
            let p = g.param(Tensor::row(v.to_vec()));
            let l = spec.loss(&mut g, p, &samples).unwrap();
            g.value(l).item()
        };
        let mut g = CompGraph::new();
        let p = g.param(theta.to_tensor());
        let l = spec.loss(&mut g, p, &samples).unwrap();
        let analytic = g.grad(l, &[p]).unwrap().remove(0);
        let numeric = finite_diff_oracle(eval, theta.as_slice(), 1e-6);
        assert!(max_relative_error(analytic.data(), &numeric) <= 1e-6);
    }
}
