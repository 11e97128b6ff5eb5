//! One meta-training step over a basis set.
//!
//! Per task: support loss of every basis, coefficients from those losses,
//! the coefficient-weighted combination of the bases, `k` differentiable
//! inner gradient steps on the support set, and the query loss of the
//! adapted parameters. The query loss is differentiated back through the
//! inner steps (and by default through the coefficients) into each basis;
//! the orthogonality regulariser for basis `m` is added on top and all bases
//! are updated together.

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CompGraph, NodeId, Tensor};
use crate::basis::{epsilon, SpanKind, Subspace};
use crate::error::{Error, Result};
use crate::model::{accuracy, Head, ModelSpec, Samples, Targets};
use crate::param::ParamVector;
use crate::tasks::Episode;

/// Floor applied to losses before inversion in [`SigmaMode::InverseLoss`].
pub const INVERSE_LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `softmax(-L / gamma)`
    #[default]
    SoftmaxMinusLoss,
    /// `1 / M`
    Equal,
    /// `1 / L`, not normalised.
    InverseLoss,
    /// `M * softmax(-L / gamma)`, sums to `M`.
    ScaledSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegVariant {
    /// `θ_m · θ_j`
    #[default]
    Raw,
    /// `(θ_m · θ_j)^2`
    Squared,
    /// `|θ_m · θ_j|`
    Absolute,
}

/// Ordered set of basis initializations sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    bases: Vec<ParamVector>,
}

impl BasisSet {
    pub fn new(bases: Vec<ParamVector>) -> Result<Self> {
        let Some(first) = bases.first() else {
            return Err(Error::Config("basis set needs at least one basis".into()));
        };
        let d = first.dim();
        if let Some(b) = bases.iter().find(|b| b.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: b.dim() });
        }
        Ok(Self { bases })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.bases[0].dim()
    }

    pub fn bases(&self) -> &[ParamVector] {
        &self.bases
    }

    pub fn push(&mut self, basis: ParamVector) -> Result<()> {
        if basis.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: basis.dim() });
        }
        self.bases.push(basis);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub k: usize,
    pub sigma_mode: SigmaMode,
    pub detach_sigma: bool,
    pub reg_variant: RegVariant,
    pub span: SpanKind,
}

/// Per-task outputs of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResult {
    pub domain: usize,
    pub sigma: Vec<f64>,
    pub theta_star: ParamVector,
    pub phi_star: ParamVector,
    pub support_losses: Vec<f64>,
    pub query_loss: f64,
    pub epsilon: f64,
}

pub fn support_losses(spec: &ModelSpec, bases: &[ParamVector], support: &Samples) -> Result<Vec<f64>> {
    bases
        .iter()
        .map(|b| {
            let mut g = CompGraph::new();
            let p = g.constant(b.to_tensor());
            let l = spec.loss(&mut g, p, support)?;
            Ok(g.value(l).item())
        })
        .collect()
}

/// Mixing coefficients for one task from its per-basis support losses.
pub fn coefficients(losses: &[f64], gamma: f64, mode: SigmaMode) -> Vec<f64> {
    let m = losses.len() as f64;
    let softmax = || {
        let lmin = losses.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = losses.iter().map(|l| (-(l - lmin) / gamma).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(move |v| v / z)
    };
    match mode {
        SigmaMode::SoftmaxMinusLoss => softmax().collect(),
        SigmaMode::ScaledSoftmax => softmax().map(|v| m * v).collect(),
        SigmaMode::Equal => vec![1.0 / m; losses.len()],
        SigmaMode::InverseLoss => losses.iter().map(|l| 1.0 / l.max(INVERSE_LOSS_FLOOR)).collect(),
    }
}

/// `Σ_m sigma_m θ_m`
pub fn combine(bases: &[ParamVector], sigma: &[f64]) -> Result<ParamVector> {
    if bases.len() != sigma.len() || bases.is_empty() {
        return Err(Error::Config(format!("{} coefficients for {} bases", sigma.len(), bases.len())));
    }
    let mut out = ParamVector::zeros(bases[0].dim());
    for (b, &s) in bases.iter().zip(sigma) {
        out.axpy(s, b.as_slice());
    }
    Ok(out)
}

/// `k` plain gradient steps on the support loss. Not differentiable; the
/// training path uses the graph version instead.
pub fn inner_loop(spec: &ModelSpec, theta: &ParamVector, support: &Samples, alpha: f64, k: usize) -> Result<ParamVector> {
    let mut phi = theta.clone();
    for _ in 0..k {
        let mut g = CompGraph::new();
        let p = g.param(phi.to_tensor());
        let l = spec.loss(&mut g, p, support)?;
        let grad = g.grad(l, &[p])?.remove(0);
        if !grad.all_finite() {
            return Err(Error::NonFinite("inner-loop gradient".into()));
        }
        phi.axpy(-alpha, grad.data());
    }
    Ok(phi)
}

fn pair_term(dot: f64, variant: RegVariant) -> f64 {
    match variant {
        RegVariant::Raw => dot,
        RegVariant::Squared => dot * dot,
        RegVariant::Absolute => dot.abs(),
    }
}

/// `eta / (M-1) Σ_{j≠m} term(θ_m · θ_j)`; zero for a single basis.
pub fn reg_loss(bases: &[ParamVector], m: usize, eta: f64, variant: RegVariant) -> f64 {
    if bases.len() < 2 {
        return 0.0;
    }
    let sum: f64 = (0..bases.len()).filter(|&j| j != m).map(|j| pair_term(bases[m].dot(&bases[j]), variant)).sum();
    eta / (bases.len() - 1) as f64 * sum
}

fn reg_loss_graph(g: &mut CompGraph, bases: &[NodeId], m: usize, eta: f64, variant: RegVariant) -> Option<NodeId> {
    if bases.len() < 2 {
        return None;
    }
    let mut acc: Option<NodeId> = None;
    for (j, &b) in bases.iter().enumerate() {
        if j == m {
            continue;
        }
        let d = g.dot(bases[m], b);
        let t = match variant {
            RegVariant::Raw => d,
            RegVariant::Squared => g.mul(d, d),
            RegVariant::Absolute => g.abs(d),
        };
        acc = Some(match acc {
            Some(a) => g.add(a, t),
            None => t,
        });
    }
    acc.map(|a| g.scale(a, eta / (bases.len() - 1) as f64))
}

fn coefficient_nodes(g: &mut CompGraph, losses: &[NodeId], cfg: &StepConfig) -> Vec<NodeId> {
    let values: Vec<f64> = losses.iter().map(|&l| g.value(l).item()).collect();
    if cfg.detach_sigma || cfg.sigma_mode == SigmaMode::Equal {
        return coefficients(&values, cfg.gamma, cfg.sigma_mode)
            .into_iter()
            .map(|s| g.constant(Tensor::scalar(s)))
            .collect();
    }
    match cfg.sigma_mode {
        SigmaMode::SoftmaxMinusLoss | SigmaMode::ScaledSoftmax => {
            let lmin = values.iter().copied().fold(f64::INFINITY, f64::min);
            let e: Vec<NodeId> = losses
                .iter()
                .map(|&l| {
                    let shifted = g.add_const(l, -lmin);
                    let z = g.scale(shifted, -1.0 / cfg.gamma);
                    g.exp(z)
                })
                .collect();
            let mut total = e[0];
            for &v in &e[1..] {
                total = g.add(total, v);
            }
            let inv = g.recip(total);
            let m = losses.len() as f64;
            e.into_iter()
                .map(|v| {
                    let s = g.mul(v, inv);
                    if cfg.sigma_mode == SigmaMode::ScaledSoftmax {
                        g.scale(s, m)
                    } else {
                        s
                    }
                })
                .collect()
        }
        SigmaMode::InverseLoss => losses
            .iter()
            .zip(&values)
            .map(|(&l, &v)| if v < INVERSE_LOSS_FLOOR { g.constant(Tensor::scalar(1.0 / INVERSE_LOSS_FLOOR)) } else { g.recip(l) })
            .collect(),
        SigmaMode::Equal => unreachable!(),
    }
}

/// Differentiable `k`-step inner loop starting from node `theta`.
pub fn inner_loop_graph(
    g: &mut CompGraph,
    spec: &ModelSpec,
    theta: NodeId,
    support: &Samples,
    alpha: f64,
    k: usize,
) -> Result<NodeId> {
    let mut phi = theta;
    for _ in 0..k {
        let l = spec.loss(g, phi, support)?;
        let grad = g.grad_graph(l, &[phi])?[0];
        if !g.value(grad).all_finite() {
            return Err(Error::NonFinite("inner-loop gradient".into()));
        }
        let step = g.scale(grad, alpha);
        phi = g.sub(phi, step);
    }
    Ok(phi)
}

struct TaskNodes {
    sigma: Vec<NodeId>,
    support_losses: Vec<NodeId>,
    theta_star: NodeId,
    phi_star: NodeId,
    query_loss: NodeId,
}

fn task_forward(g: &mut CompGraph, spec: &ModelSpec, bases: &[NodeId], ep: &Episode, cfg: &StepConfig) -> Result<TaskNodes> {
    let support_losses =
        bases.iter().map(|&b| spec.loss(g, b, &ep.support)).collect::<Result<Vec<_>>>()?;
    let sigma = coefficient_nodes(g, &support_losses, cfg);
    let mut theta_star = g.mul_scalar(bases[0], sigma[0]);
    for (&b, &s) in bases.iter().zip(&sigma).skip(1) {
        let term = g.mul_scalar(b, s);
        theta_star = g.add(theta_star, term);
    }
    let phi_star = inner_loop_graph(g, spec, theta_star, &ep.support, cfg.alpha, cfg.k)?;
    let query_loss = spec.loss(g, phi_star, &ep.query)?;
    Ok(TaskNodes { sigma, support_losses, theta_star, phi_star, query_loss })
}

fn collect_result(g: &CompGraph, nodes: &TaskNodes, ep: &Episode) -> TaskResult {
    let scalar = |ids: &[NodeId]| ids.iter().map(|&i| g.value(i).item()).collect::<Vec<_>>();
    TaskResult {
        domain: ep.domain,
        sigma: scalar(&nodes.sigma),
        theta_star: ParamVector::new(g.value(nodes.theta_star).data().to_vec()),
        phi_star: ParamVector::new(g.value(nodes.phi_star).data().to_vec()),
        support_losses: scalar(&nodes.support_losses),
        query_loss: g.value(nodes.query_loss).item(),
        epsilon: f64::NAN,
    }
}

/// Forward pass plus the gradient of the query loss w.r.t. every basis.
/// The graph lives only for the duration of this call.
pub fn task_meta_gradient(
    spec: &ModelSpec,
    bases: &[ParamVector],
    ep: &Episode,
    cfg: &StepConfig,
) -> Result<(TaskResult, Vec<Vec<f64>>)> {
    let mut g = CompGraph::new();
    let ids: Vec<NodeId> = bases.iter().map(|b| g.param(b.to_tensor())).collect();
    let nodes = task_forward(&mut g, spec, &ids, ep, cfg)?;
    let result = collect_result(&g, &nodes, ep);
    let grads = g.grad_through_update(nodes.query_loss, &ids)?;
    let grads: Vec<Vec<f64>> = grads.into_iter().map(Tensor::into_data).collect();
    if !result.query_loss.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("query loss or meta-gradient".into()));
    }
    Ok((result, grads))
}

/// Forward-only query loss for one task (no gradient bookkeeping kept).
pub fn task_query_loss(spec: &ModelSpec, bases: &[ParamVector], ep: &Episode, cfg: &StepConfig) -> Result<f64> {
    let mut g = CompGraph::new();
    let ids: Vec<NodeId> = bases.iter().map(|b| g.constant(b.to_tensor())).collect();
    let nodes = task_forward(&mut g, spec, &ids, ep, cfg)?;
    Ok(g.value(nodes.query_loss).item())
}

/// `Σ_i L_total,i^(m) = Σ_i [L(Q_i; φ*_i) + L_reg^(m)]` for basis `m`.
pub fn total_loss(spec: &ModelSpec, bases: &[ParamVector], batch: &[Episode], cfg: &StepConfig, m: usize) -> Result<f64> {
    let q: f64 = batch.iter().map(|ep| task_query_loss(spec, bases, ep, cfg)).sum::<Result<f64>>()?;
    Ok(q + batch.len() as f64 * reg_loss(bases, m, cfg.eta, cfg.reg_variant))
}

/// Accumulated meta-gradient for one batch, before scaling by `beta / B`.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// `∇_{θ_m} Σ_i L_total,i^(m)` for each basis `m`.
    pub per_basis: Vec<Vec<f64>>,
    pub results: Vec<TaskResult>,
    /// `Σ_i L_total,i^(m)` for each basis `m`.
    pub total_losses: Vec<f64>,
}

fn map_tasks<T: Send>(
    pool: Option<&ThreadPool>,
    batch: &[Episode],
    f: impl Fn(&Episode) -> Result<T> + Sync + Send,
) -> Vec<Result<T>> {
    match pool {
        Some(pool) => pool.install(|| batch.par_iter().map(&f).collect()),
        None => batch.iter().map(f).collect(),
    }
}

/// Meta-gradient for every basis. Per-task work may run on `pool`; the
/// reduction always proceeds in task-index order.
pub fn meta_gradient(
    spec: &ModelSpec,
    bases: &BasisSet,
    batch: &[Episode],
    cfg: &StepConfig,
    pool: Option<&ThreadPool>,
) -> Result<MetaGradient> {
    if batch.is_empty() {
        return Err(Error::Config("meta step needs at least one task".into()));
    }
    let theta = bases.bases();
    let subspace = Subspace::new(theta, cfg.span);
    let outcomes = map_tasks(pool, batch, |ep| {
        let (mut result, grads) = task_meta_gradient(spec, theta, ep, cfg)?;
        let proj = subspace.project(result.phi_star.as_slice());
        result.epsilon = epsilon(result.phi_star.as_slice(), &proj);
        Ok((result, grads))
    });

    let (m, d, b) = (theta.len(), bases.dim(), batch.len() as f64);
    let mut per_basis = vec![vec![0.0; d]; m];
    let mut results = Vec::with_capacity(batch.len());
    let mut query_total = 0.0;
    for outcome in outcomes {
        let (result, grads) = outcome?;
        for (acc, g) in per_basis.iter_mut().zip(&grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        query_total += result.query_loss;
        results.push(result);
    }

    let mut total_losses = vec![query_total; m];
    if m > 1 && cfg.eta != 0.0 {
        let mut g = CompGraph::new();
        let ids: Vec<NodeId> = theta.iter().map(|t| g.param(t.to_tensor())).collect();
        for idx in 0..m {
            let reg = reg_loss_graph(&mut g, &ids, idx, cfg.eta, cfg.reg_variant).expect("m > 1");
            total_losses[idx] += b * g.value(reg).item();
            let grad = g.grad(reg, &[ids[idx]])?.remove(0);
            for (a, v) in per_basis[idx].iter_mut().zip(grad.data()) {
                *a += b * v;
            }
        }
    }
    if total_losses.iter().any(|l| !l.is_finite()) || per_basis.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("total meta loss".into()));
    }
    Ok(MetaGradient { per_basis, results, total_losses })
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub results: Vec<TaskResult>,
    /// Batch mean of the projection ratio, measured against the bases
    /// before this step's update.
    pub eps_bar: f64,
    pub total_losses: Vec<f64>,
    /// False when the step was skipped because of non-finite values.
    pub applied: bool,
}

/// One joint update of all bases: `θ_m ← θ_m - β/B ∇_{θ_m} Σ_i L_total,i^(m)`.
///
/// Non-finite losses or gradients skip the update and report `applied = false`.
pub fn meta_step(
    spec: &ModelSpec,
    bases: &mut BasisSet,
    batch: &[Episode],
    cfg: &StepConfig,
    pool: Option<&ThreadPool>,
) -> Result<StepReport> {
    let grad = match meta_gradient(spec, bases, batch, cfg, pool) {
        Ok(g) => g,
        Err(Error::NonFinite(what)) => {
            log::warn!("skipping meta step: non-finite {what}");
            return Ok(StepReport { results: Vec::new(), eps_bar: f64::NAN, total_losses: Vec::new(), applied: false });
        }
        Err(e) => return Err(e),
    };
    let scale = -cfg.beta / batch.len() as f64;
    for (basis, g) in bases.bases.iter_mut().zip(&grad.per_basis) {
        basis.axpy(scale, g);
    }
    let eps_bar = grad.results.iter().map(|r| r.epsilon).sum::<f64>() / grad.results.len() as f64;
    Ok(StepReport { results: grad.results, eps_bar, total_losses: grad.total_losses, applied: true })
}

/// Test-time score of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScore {
    pub domain: usize,
    pub sigma: Vec<f64>,
    pub query_loss: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub metric: f64,
}

/// Coefficients from the support set, combine, `k_test` plain fine-tuning
/// steps, then score the query set.
pub fn evaluate_task(
    spec: &ModelSpec,
    bases: &[ParamVector],
    ep: &Episode,
    alpha: f64,
    gamma: f64,
    mode: SigmaMode,
    k_test: usize,
) -> Result<TaskScore> {
    let losses = support_losses(spec, bases, &ep.support)?;
    let sigma = coefficients(&losses, gamma, mode);
    let theta = combine(bases, &sigma)?;
    let phi = inner_loop(spec, &theta, &ep.support, alpha, k_test)?;
    let mut g = CompGraph::new();
    let p = g.constant(phi.to_tensor());
    let out = spec.forward(&mut g, p, &ep.query.x)?;
    let logits = g.value(out).clone();
    let query_loss = {
        let l = spec.loss(&mut g, p, &ep.query)?;
        g.value(l).item()
    };
    let metric = match (spec.head, &ep.query.y) {
        (Head::Classification, Targets::Labels(labels)) => accuracy(&logits, labels),
        _ => query_loss,
    };
    Ok(TaskScore { domain: ep.domain, sigma, query_loss, metric })
}
