use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::engine::{evaluate_task, SigmaMode, TaskScore};
use crate::error::{Error, Result};
use crate::model::{Head, ModelSpec};
use crate::param::ParamVector;
use crate::tasks::{task_rng, Split, TaskSampler};

/// Mean with a 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    /// Set when `n < 2`, where the half-width is reported as 0.
    pub degenerate: bool,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Some(Self { mean, ci95: 0.0, n, degenerate: true });
        }
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some(Self { mean, ci95: 1.96 * var.sqrt() / (n as f64).sqrt(), n, degenerate: false })
    }
}

/// Evaluation settings shared by periodic validation and final testing.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub alpha: f64,
    pub gamma: f64,
    pub sigma_mode: SigmaMode,
    pub k_test: usize,
    pub seed: u64,
    pub split: Split,
    /// Selects the task stream; the same value always yields the same tasks.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy for classification, MSE for regression.
    pub metric: Summary,
    pub query_loss: Summary,
    pub per_domain: Vec<Option<Summary>>,
    pub higher_is_better: bool,
}

/// Scores `n_tasks` held-out tasks with the combine-then-fine-tune protocol.
pub fn evaluate_bases(
    spec: &ModelSpec,
    bases: &[ParamVector],
    sampler: &TaskSampler,
    n_tasks: usize,
    settings: &EvalSettings,
    pool: Option<&ThreadPool>,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    if let Some(b) = bases.iter().find(|b| b.dim() != spec.num_params()) {
        return Err(Error::DimensionMismatch { expected: spec.num_params(), got: b.dim() });
    }
    let score = |i: usize| -> Result<TaskScore> {
        let ep = sampler.sample_episode(&mut task_rng(settings.seed, settings.split, settings.stream, i as u64));
        evaluate_task(spec, bases, &ep, settings.alpha, settings.gamma, settings.sigma_mode, settings.k_test)
    };
    let scores: Vec<Result<TaskScore>> = match pool {
        Some(pool) => pool.install(|| (0..n_tasks).into_par_iter().map(score).collect()),
        None => (0..n_tasks).map(score).collect(),
    };
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarise(&scores, sampler.num_domains(), spec.head))
}

pub fn summarise(scores: &[TaskScore], domains: usize, head: Head) -> EvalReport {
    let metric: Vec<f64> = scores.iter().map(|s| s.metric).collect();
    let loss: Vec<f64> = scores.iter().map(|s| s.query_loss).collect();
    let per_domain = (0..domains)
        .map(|d| {
            let v: Vec<f64> = scores.iter().filter(|s| s.domain == d).map(|s| s.metric).collect();
            Summary::of(&v)
        })
        .collect();
    EvalReport {
        metric: Summary::of(&metric).expect("non-empty scores"),
        query_loss: Summary::of(&loss).expect("non-empty scores"),
        per_domain,
        higher_is_better: head == Head::Classification,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[0.5]).unwrap();
        assert_eq!((s.mean, s.ci95, s.degenerate), (0.5, 0.0, true));
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let std = (5.0f64 / 3.0).sqrt();
        assert!((s.mean - 2.5).abs() < 1e-15);
        assert!((s.ci95 - 1.96 * std / 2.0).abs() < 1e-15);
        assert!(Summary::of(&[]).is_none());
    }
}
