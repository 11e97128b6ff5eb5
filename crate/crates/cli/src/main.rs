use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use xbml::harness::selftest::run_selftest;
use xbml::harness::train::build_pool;
use xbml::harness::{analyze, evaluate_checkpoint, run_training, threads_from_env, write_analysis, Checkpoint, RunConfig};

/// Expandable-basis meta-learning: train, evaluate and inspect runs.
///
/// Set XBML_THREADS to the worker count (default 1, serial).
#[derive(Parser)]
#[command(name = "xbml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training loop from a JSON config.
    Train {
        /// Config file, or `preset:<name>` for a built-in preset.
        #[arg(long)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Override the iteration count.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Score a checkpoint on held-out test tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: usize,
        /// Fine-tuning steps at test time (defaults to the config value).
        #[arg(long)]
        k_test: Option<usize>,
    },
    /// Write analysis.json and a raw basis dump next to the checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        tasks_per_domain: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient and projection oracle checks.
    Selftest,
    /// Print a built-in preset config as JSON.
    Preset { name: String },
}

fn load_config(spec: &str) -> Result<RunConfig> {
    if let Some(name) = spec.strip_prefix("preset:") {
        return RunConfig::preset(name)
            .with_context(|| format!("unknown preset {name:?}; available: {}", RunConfig::PRESETS.join(", ")));
    }
    RunConfig::load(Path::new(spec)).with_context(|| format!("loading config {spec}"))
}

fn run(cli: Cli) -> Result<bool> {
    let threads = threads_from_env();
    match cli.command {
        Command::Train { config, seed, out, iterations } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate().context("invalid config")?;
            let art = run_training(&cfg, &out, threads)?;
            println!("final M: {}", art.final_m);
            println!("expansions at: {:?}", art.expansions);
            let m = &art.final_eval.metric;
            println!("test metric: {:.6} ± {:.6} (n={})", m.mean, m.ci95, m.n);
            println!("artifacts: {}", art.out_dir.display());
        }
        Command::Eval { checkpoint, tasks, k_test } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let pool = build_pool(threads)?;
            let report = evaluate_checkpoint(&ck, tasks, k_test, pool.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Analyze { checkpoint, tasks_per_domain, out } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let pool = build_pool(threads)?;
            let bundle = analyze(&ck, tasks_per_domain, pool.as_ref())?;
            let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            write_analysis(&dir, &ck, &bundle)?;
            println!("M = {}, singular values {:?}", bundle.m, bundle.singular_values);
            if let Some(c) = bundle.avg_abs_cosine {
                println!("avg |cosine| = {c:.6}");
            }
            println!("wrote {}", dir.join("analysis.json").display());
        }
        Command::Selftest => {
            let mut ok = true;
            for c in run_selftest()? {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(ok);
        }
        Command::Preset { name } => {
            let Some(cfg) = RunConfig::preset(&name) else {
                bail!("unknown preset {name:?}; available: {}", RunConfig::PRESETS.join(", "));
            };
            println!("{}", cfg.to_json());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
