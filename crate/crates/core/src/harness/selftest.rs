//! Quick oracle checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_oracle, max_relative_error, CompGraph};
use crate::basis::{epsilon, project_onto_span, SpanKind};
use crate::engine::{coefficients, meta_gradient, total_loss, BasisSet, RegVariant, SigmaMode, StepConfig};
use crate::error::Result;
use crate::model::{Activation, Head, ModelSpec};
use crate::param::ParamVector;
use crate::tasks::{DomainSpec, Family, Interval, TaskDistribution};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, value: f64, tol: f64) -> Check {
    Check { name, passed: value.is_finite() && value <= tol, detail: format!("{value:.3e} (tolerance {tol:e})") }
}

/// Classical Gram-Schmidt with re-orthogonalisation, skipping dependent vectors.
pub fn gram_schmidt_projection(bases: &[ParamVector], phi: &[f64]) -> Vec<f64> {
    let mut frame: Vec<Vec<f64>> = Vec::new();
    let scale = bases.iter().map(|b| b.norm()).fold(0.0, f64::max);
    for b in bases {
        let mut v = b.as_slice().to_vec();
        for _ in 0..2 {
            for q in &frame {
                let c: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, q)| *x -= c * q);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 * scale {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut p = vec![0.0; phi.len()];
    for q in &frame {
        let c: f64 = q.iter().zip(phi).map(|(a, b)| a * b).sum();
        p.iter_mut().zip(q).for_each(|(x, q)| *x += c * q);
    }
    p
}

fn autodiff_check() -> Result<Check> {
    let spec = ModelSpec::mlp(vec![3, 8, 2], Activation::Tanh, Head::Regression);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = spec.init_params(1.0, &mut rng);
    let x = crate::autodiff::Tensor::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let y = crate::autodiff::Tensor::new(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
    let samples = crate::model::Samples { x, y: crate::model::Targets::Values(y) };
    let mut g = CompGraph::new();
    let p = g.param(theta.to_tensor());
    let l = spec.loss(&mut g, p, &samples)?;
    let analytic = g.grad(l, &[p])?.remove(0).into_data();
    let numeric = finite_diff_oracle(
        |v| {
            let mut g = CompGraph::new();
            let p = g.constant(ParamVector::new(v.to_vec()).to_tensor());
            let l = spec.loss(&mut g, p, &samples).expect("loss");
            g.value(l).item()
        },
        theta.as_slice(),
        1e-6,
    );
    Ok(check("autodiff gradient vs finite differences", max_relative_error(&analytic, &numeric), 1e-6))
}

fn meta_gradient_check() -> Result<Check> {
    let spec = ModelSpec::mlp(vec![1, 8, 1], Activation::Tanh, Head::Regression);
    let dist = TaskDistribution {
        domains: vec![DomainSpec {
            name: "sin".into(),
            weight: 1.0,
            family: Family::Sinusoid {
                amplitude: Interval::new(0.5, 2.0),
                phase: Interval::new(0.0, 3.0),
                x_range: Interval::new(-3.0, 3.0),
                noise_std: 0.0,
            },
        }],
        k_shot: 5,
        n_query: 5,
        n_way: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = dist.sampler()?.sample_batch(2, &mut rng)?;
    let set = BasisSet::new((0..3).map(|_| spec.init_params(1.0, &mut rng)).collect())?;
    let cfg = StepConfig {
        alpha: 0.05,
        beta: 0.01,
        gamma: 2.0,
        eta: 0.01,
        k: 2,
        sigma_mode: SigmaMode::SoftmaxMinusLoss,
        detach_sigma: false,
        reg_variant: RegVariant::Raw,
        span: SpanKind::Linear,
    };
    let mg = meta_gradient(&spec, &set, &batch, &cfg, None)?;
    let mut worst: f64 = 0.0;
    for m in 0..set.len() {
        let numeric = finite_diff_oracle(
            |v| {
                let mut probe = set.bases().to_vec();
                probe[m] = ParamVector::new(v.to_vec());
                total_loss(&spec, &probe, &batch, &cfg, m).unwrap_or(f64::NAN)
            },
            set.bases()[m].as_slice(),
            1e-5,
        );
        worst = worst.max(max_relative_error(&mg.per_basis[m], &numeric));
    }
    Ok(check("meta-gradient (M=3, k=2, B=2) vs finite differences", worst, 1e-5))
}

fn projection_check(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.random_range(1..=32);
        let m = rng.random_range(1..=6);
        let bases: Vec<ParamVector> =
            (0..m).map(|_| ParamVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let phi: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = epsilon(&phi, &project_onto_span(&bases, &phi));
        let b = epsilon(&phi, &gram_schmidt_projection(&bases, &phi));
        worst = worst.max((a - b).abs());
    }
    check("projection ratio vs Gram-Schmidt", worst, 1e-10)
}

fn coefficient_check(cases: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let m = rng.random_range(1..=8);
        let losses: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..10.0)).collect();
        let s = coefficients(&losses, rng.random_range(0.1..10.0), SigmaMode::SoftmaxMinusLoss);
        worst = worst.max((s.iter().sum::<f64>() - 1.0).abs());
    }
    check("coefficients sum to one", worst, 1e-12)
}

pub fn run_selftest() -> Result<Vec<Check>> {
    Ok(vec![autodiff_check()?, meta_gradient_check()?, projection_check(500), coefficient_check(500)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for c in run_selftest().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn gram_schmidt_skips_dependent_vectors() {
        let b = [ParamVector::new(vec![1.0, 0.0]), ParamVector::new(vec![2.0, 0.0])];
        assert_eq!(gram_schmidt_projection(&b, &[3.0, 4.0]), vec![3.0, 0.0]);
    }
}
