use std::path::Path;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_param_dump, Checkpoint};
use super::eval::{evaluate_bases, EvalReport, EvalSettings};
use crate::basis::{basis_abs_cosine, basis_cosine, basis_svd, cosine_matrix, singular_values};
use crate::engine::{coefficients, support_losses};
use crate::error::{Error, Result};
use crate::tasks::{task_rng, Split};

/// Task stream used by `analyze`, kept apart from evaluation streams.
const ANALYSIS_STREAM: u64 = 0xa7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSigma {
    pub domain: String,
    /// Mean coefficient per basis; sums to one.
    pub mean_sigma: Vec<f64>,
    /// Coefficients of every analysed task, one row per task.
    pub tasks: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub d: usize,
    pub m: usize,
    pub singular_values: Vec<f64>,
    pub singular_values_raw: Vec<f64>,
    /// Absent when there is a single basis.
    pub cosine_matrix: Option<Vec<Vec<f64>>>,
    pub avg_cosine: Option<f64>,
    pub avg_abs_cosine: Option<f64>,
    pub sigma: Vec<DomainSigma>,
    pub expansions: Vec<u64>,
}

/// Spectrum, cosine structure and per-domain coefficients of a checkpoint.
pub fn analyze(ck: &Checkpoint, tasks_per_domain: usize, pool: Option<&ThreadPool>) -> Result<AnalysisBundle> {
    ck.validate()?;
    if tasks_per_domain == 0 {
        return Err(Error::Config("analysis needs at least one task per domain".into()));
    }
    let cfg = &ck.config;
    let sampler = cfg.tasks.sampler()?;
    let step = cfg.step_config();
    let bases = &ck.bases;

    let sigma_for = |domain: usize, i: usize| -> Result<Vec<f64>> {
        let index = (domain * tasks_per_domain + i) as u64;
        let ep = sampler.sample_from_domain(domain, &mut task_rng(cfg.seed, Split::Test, ANALYSIS_STREAM, index));
        let losses = support_losses(&cfg.model, bases, &ep.support)?;
        Ok(coefficients(&losses, step.gamma, step.sigma_mode))
    };
    let mut sigma = Vec::with_capacity(sampler.num_domains());
    for (d, spec) in cfg.tasks.domains.iter().enumerate() {
        let rows: Vec<Result<Vec<f64>>> = match pool {
            Some(p) => p.install(|| (0..tasks_per_domain).into_par_iter().map(|i| sigma_for(d, i)).collect()),
            None => (0..tasks_per_domain).map(|i| sigma_for(d, i)).collect(),
        };
        let tasks = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let mean_sigma = (0..ck.m).map(|j| tasks.iter().map(|s| s[j]).sum::<f64>() / tasks.len() as f64).collect();
        sigma.push(DomainSigma { domain: spec.name.clone(), mean_sigma, tasks });
    }

    Ok(AnalysisBundle {
        d: ck.d,
        m: ck.m,
        singular_values: basis_svd(bases),
        singular_values_raw: singular_values(bases),
        cosine_matrix: (ck.m > 1).then(|| cosine_matrix(bases)),
        avg_cosine: basis_cosine(bases),
        avg_abs_cosine: basis_abs_cosine(bases),
        sigma,
        expansions: ck.expansions.clone(),
    })
}

/// Writes `analysis.json` and the `bases.bin` / `bases.json` dump into `dir`.
pub fn write_analysis(dir: &Path, ck: &Checkpoint, bundle: &AnalysisBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(bundle)?)?;
    write_param_dump(dir, "bases", &ck.bases, ck.config.model.layout())
}

/// Test-split evaluation of a checkpoint; `k_test` overrides the config.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    n_tasks: usize,
    k_test: Option<usize>,
    pool: Option<&ThreadPool>,
) -> Result<EvalReport> {
    ck.validate()?;
    let cfg = &ck.config;
    let step = cfg.step_config();
    let settings = EvalSettings {
        alpha: cfg.alpha,
        gamma: step.gamma,
        sigma_mode: step.sigma_mode,
        k_test: k_test.unwrap_or(cfg.k_test),
        seed: cfg.seed,
        split: Split::Test,
        stream: 0,
    };
    evaluate_bases(&cfg.model, &ck.bases, &cfg.tasks.sampler()?, n_tasks, &settings, pool)
}
