use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::checkpoint::{write_param_dump, Checkpoint, OptimizerState, RngState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use super::config::RunConfig;
use super::eval::{evaluate_bases, EvalReport, EvalSettings};
use crate::basis::{basis_abs_cosine, basis_cosine, basis_svd, spawn_basis, Decision, ExpansionTracker};
use crate::engine::{meta_step, BasisSet, StepReport};
use crate::error::{Error, Result};
use crate::tasks::{aux_rng, Episode, Split, TaskSampler};

const INIT_STREAM: u64 = 0x1a17;
const SPAWN_STREAM: u64 = 0x5ba3;
const POOL_STREAM: u64 = 0x9001;

/// Environment variable holding the worker thread count (1 = serial).
pub const THREADS_ENV: &str = "XBML_THREADS";

pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok())
}

/// `None` or `Some(1)` run serially; results are identical either way.
pub fn build_pool(threads: Option<usize>) -> Result<Option<ThreadPool>> {
    match threads {
        Some(0) | Some(1) => Ok(None),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::Config(format!("thread pool: {e}"))),
        None => Ok(None),
    }
}

/// What happened in one meta-iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Basis count used for this iteration's step.
    pub m: usize,
    pub eps_bar: f64,
    pub counter: usize,
    pub expanded: bool,
    pub applied: bool,
    pub mean_query_loss: f64,
    pub beta: f64,
    pub avg_cosine: Option<f64>,
    pub singular_values: Vec<f64>,
    /// Mean coefficients of this batch's tasks, per domain (`None` if absent).
    pub sigma_by_domain: Vec<Option<Vec<f64>>>,
}

/// Periodic evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub m: usize,
    pub eps_bar: f64,
    pub avg_cosine: Option<f64>,
    pub avg_abs_cosine: Option<f64>,
    pub singular_values: Vec<f64>,
    pub eval: EvalReport,
}

pub struct Trainer {
    cfg: RunConfig,
    sampler: TaskSampler,
    pool_tasks: Vec<Episode>,
    bases: BasisSet,
    tracker: ExpansionTracker,
    beta: f64,
    iteration: u64,
    expansions: Vec<u64>,
    last_eps: f64,
    pool: Option<ThreadPool>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, threads: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let sampler = cfg.tasks.sampler()?;
        let bases = (0..cfg.initial_bases() as u64)
            .map(|i| cfg.model.init_params(cfg.init_gain, &mut aux_rng(cfg.seed, INIT_STREAM, i)))
            .collect();
        let bases = BasisSet::new(bases)?;
        let tracker = ExpansionTracker::new(cfg.c, cfg.m_max);
        let pool = build_pool(threads)?;
        let pool_tasks = (0..cfg.train_pool.unwrap_or(0) as u64)
            .map(|j| sampler.sample_episode(&mut aux_rng(cfg.seed, POOL_STREAM, j)))
            .collect();
        Ok(Self { beta: cfg.beta, cfg, sampler, pool_tasks, bases, tracker, iteration: 0, expansions: Vec::new(), last_eps: f64::NAN, pool })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn bases(&self) -> &BasisSet {
        &self.bases
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn expansions(&self) -> &[u64] {
        &self.expansions
    }

    pub fn tracker(&self) -> &ExpansionTracker {
        &self.tracker
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.iterations
    }

    /// Runs one meta-iteration: batch, meta-step, expansion check, decay.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let it = self.iteration;
        let b = self.cfg.batch_size;
        let batch = if self.pool_tasks.is_empty() {
            self.sampler.stream_batch(self.cfg.seed, Split::Train, it, b)
        } else {
            let p = self.pool_tasks.len();
            (0..b).map(|j| self.pool_tasks[(it as usize * b + j) % p].clone()).collect()
        };
        let mut step_cfg = self.cfg.step_config();
        step_cfg.beta = self.beta;
        let m = self.bases.len();
        let report: StepReport = meta_step(&self.cfg.model, &mut self.bases, &batch, &step_cfg, self.pool.as_ref())?;

        let mut expanded = false;
        if report.applied {
            self.last_eps = report.eps_bar;
            if self.cfg.expands() && self.tracker.update(report.eps_bar, m) == Decision::Expand {
                let mut rng = aux_rng(self.cfg.seed, SPAWN_STREAM, it);
                let fresh = spawn_basis(self.bases.bases(), self.cfg.lambda, &mut rng);
                self.bases.push(fresh)?;
                self.expansions.push(it);
                expanded = true;
                log::info!("iteration {it}: expanded to {} bases", self.bases.len());
            }
        }

        let domains = self.sampler.num_domains();
        let sigma_by_domain = (0..domains)
            .map(|d| {
                let rows: Vec<&Vec<f64>> = report.results.iter().filter(|r| r.domain == d).map(|r| &r.sigma).collect();
                (!rows.is_empty()).then(|| {
                    (0..m).map(|j| rows.iter().map(|s| s[j]).sum::<f64>() / rows.len() as f64).collect()
                })
            })
            .collect();
        let mean_query_loss = if report.results.is_empty() {
            f64::NAN
        } else {
            report.results.iter().map(|r| r.query_loss).sum::<f64>() / report.results.len() as f64
        };
        let record = IterationRecord {
            iteration: it,
            m,
            eps_bar: report.eps_bar,
            counter: self.tracker.counter,
            expanded,
            applied: report.applied,
            mean_query_loss,
            beta: self.beta,
            avg_cosine: basis_cosine(self.bases.bases()),
            singular_values: basis_svd(self.bases.bases()),
            sigma_by_domain,
        };

        self.iteration += 1;
        if self.cfg.beta_decay_interval > 0 && self.iteration % self.cfg.beta_decay_interval == 0 {
            self.beta *= self.cfg.beta_decay;
        }
        Ok(record)
    }

    pub fn eval_settings(&self, split: Split, stream: u64) -> EvalSettings {
        let s = self.cfg.step_config();
        EvalSettings {
            alpha: self.cfg.alpha,
            gamma: s.gamma,
            sigma_mode: s.sigma_mode,
            k_test: self.cfg.k_test,
            seed: self.cfg.seed,
            split,
            stream,
        }
    }

    pub fn evaluate(&self, split: Split, n_tasks: usize) -> Result<EvalReport> {
        evaluate_bases(
            &self.cfg.model,
            self.bases.bases(),
            &self.sampler,
            n_tasks,
            &self.eval_settings(split, 0),
            self.pool.as_ref(),
        )
    }

    pub fn metrics_record(&self) -> Result<MetricsRecord> {
        Ok(MetricsRecord {
            iteration: self.iteration,
            m: self.bases.len(),
            eps_bar: self.last_eps,
            avg_cosine: basis_cosine(self.bases.bases()),
            avg_abs_cosine: basis_abs_cosine(self.bases.bases()),
            singular_values: basis_svd(self.bases.bases()),
            eval: self.evaluate(Split::Validation, self.cfg.eval_tasks)?,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            d: self.bases.dim(),
            m: self.bases.len(),
            bases: self.bases.bases().to_vec(),
            optimizer: OptimizerState { beta: self.beta },
            tracker: self.tracker.clone(),
            rng: RngState { seed: self.cfg.seed, next_iteration: self.iteration },
            expansions: self.expansions.clone(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn joined(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

pub fn diagnostics_header(domains: &[String]) -> String {
    let mut h = String::from(
        "iteration,m,eps_bar,counter,expanded,applied,mean_query_loss,beta,avg_cosine,singular_values",
    );
    for d in domains {
        write!(h, ",sigma_{d}").unwrap();
    }
    h
}

pub fn diagnostics_row(r: &IterationRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.m,
        r.eps_bar,
        r.counter,
        u8::from(r.expanded),
        u8::from(r.applied),
        r.mean_query_loss,
        r.beta,
        opt(r.avg_cosine),
        joined(&r.singular_values)
    );
    for s in &r.sigma_by_domain {
        row.push(',');
        if let Some(s) = s {
            row.push_str(&joined(s));
        }
    }
    row
}

pub fn metrics_header(domains: &[String]) -> String {
    let mut h = String::from(
        "iteration,m,eps_bar,avg_cosine,avg_abs_cosine,singular_values,metric_mean,metric_ci95,query_loss_mean,query_loss_ci95,n_tasks",
    );
    for d in domains {
        write!(h, ",{d}_mean,{d}_ci95,{d}_n").unwrap();
    }
    h
}

pub fn metrics_row(r: &MetricsRecord) -> String {
    let e = &r.eval;
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.m,
        r.eps_bar,
        opt(r.avg_cosine),
        opt(r.avg_abs_cosine),
        joined(&r.singular_values),
        e.metric.mean,
        e.metric.ci95,
        e.query_loss.mean,
        e.query_loss.ci95,
        e.metric.n
    );
    for d in &e.per_domain {
        match d {
            Some(s) => write!(row, ",{},{},{}", s.mean, s.ci95, s.n).unwrap(),
            None => row.push_str(",,,0"),
        }
    }
    row
}

/// Paths and headline numbers of a finished run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub diagnostics: PathBuf,
    pub final_m: usize,
    pub expansions: Vec<u64>,
    pub eps_history: Vec<f64>,
    pub final_eval: EvalReport,
}

/// Full training loop writing every artifact into `out_dir`:
/// `config.json`, `diagnostics.csv` (every iteration), `metrics.csv`
/// (every `eval_interval` and at the end), `timing.csv`, `checkpoint.json`,
/// `final_eval.json` and the `bases.bin`/`bases.json` dump.
pub fn run_training(cfg: &RunConfig, out_dir: &Path, threads: Option<usize>) -> Result<RunArtifacts> {
    let mut trainer = Trainer::new(cfg.clone(), threads)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json())?;
    let names: Vec<String> = cfg.tasks.domains.iter().map(|d| d.name.clone()).collect();

    let diagnostics_path = out_dir.join("diagnostics.csv");
    let metrics_path = out_dir.join("metrics.csv");
    let mut diagnostics = BufWriter::new(File::create(&diagnostics_path)?);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut timing = BufWriter::new(File::create(out_dir.join("timing.csv"))?);
    writeln!(diagnostics, "{}", diagnostics_header(&names))?;
    writeln!(metrics, "{}", metrics_header(&names))?;
    writeln!(timing, "iteration,elapsed_seconds")?;

    let start = Instant::now();
    let mut eps_history = Vec::with_capacity(cfg.iterations as usize);
    while !trainer.is_done() {
        let record = trainer.step()?;
        eps_history.push(record.eps_bar);
        writeln!(diagnostics, "{}", diagnostics_row(&record))?;
        let done = trainer.iteration();
        if done % cfg.eval_interval == 0 || trainer.is_done() {
            let m = trainer.metrics_record()?;
            writeln!(metrics, "{}", metrics_row(&m))?;
            writeln!(timing, "{},{:.3}", done, start.elapsed().as_secs_f64())?;
            log::info!(
                "iteration {done}: M={} eps={:.4} metric={:.4}±{:.4}",
                m.m,
                m.eps_bar,
                m.eval.metric.mean,
                m.eval.metric.ci95
            );
        }
    }
    diagnostics.flush()?;
    metrics.flush()?;
    timing.flush()?;

    let checkpoint = trainer.checkpoint();
    let checkpoint_path = out_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;
    write_param_dump(out_dir, "bases", trainer.bases().bases(), cfg.model.layout())?;
    let final_eval = trainer.evaluate(Split::Test, cfg.eval_tasks)?;
    std::fs::write(out_dir.join("final_eval.json"), serde_json::to_string_pretty(&final_eval)?)?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        checkpoint: checkpoint_path,
        metrics: metrics_path,
        diagnostics: diagnostics_path,
        final_m: trainer.bases().len(),
        expansions: trainer.expansions().to_vec(),
        eps_history,
        final_eval,
    })
}
