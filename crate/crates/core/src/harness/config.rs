use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::SpanKind;
use crate::engine::{RegVariant, SigmaMode, StepConfig};
use crate::error::{Error, Result};
use crate::model::{Activation, Head, ModelSpec};
use crate::tasks::{DomainSpec, Family, Interval, TaskDistribution};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Expandable bases.
    #[default]
    Xb,
    /// Starts with `m_max` bases and never expands.
    XbFixed,
    /// One basis, no regulariser.
    Maml,
}

/// Every knob of a training run. Serialised as the JSON run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelSpec,
    /// Weight init std is `init_gain / sqrt(fan_in)`.
    #[serde(default = "one")]
    pub init_gain: f64,
    pub tasks: TaskDistribution,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_decay")]
    pub beta_decay: f64,
    /// Iterations between multiplicative `beta` decays; 0 disables decay.
    #[serde(default)]
    pub beta_decay_interval: u64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub k_train: usize,
    pub k_test: usize,
    pub batch_size: usize,
    /// Train on a fixed pool of this many tasks, visited cyclically in
    /// batches of `batch_size`. `None` draws fresh tasks every iteration.
    #[serde(default)]
    pub train_pool: Option<usize>,
    pub c: usize,
    pub m_max: usize,
    #[serde(default = "one_usize")]
    pub m_init: usize,
    pub iterations: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: u64,
    pub eval_tasks: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default)]
    pub detach_sigma: bool,
    #[serde(default)]
    pub reg_variant: RegVariant,
    #[serde(default)]
    pub span: SpanKind,
    #[serde(default)]
    pub variant: Variant,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_decay() -> f64 {
    0.8
}

fn default_eval_interval() -> u64 {
    500
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        self.model.validate()?;
        self.tasks.sampler()?;
        if self.tasks.head() != Some(self.model.head) {
            return bad("model head does not match the task family".into());
        }
        if self.model.inputs() != self.tasks.input_dim() {
            return bad(format!("model takes {} inputs, tasks provide {}", self.model.inputs(), self.tasks.input_dim()));
        }
        if self.model.head == Head::Classification && self.model.outputs() != self.tasks.n_way {
            return bad(format!("classifier has {} outputs for {}-way tasks", self.model.outputs(), self.tasks.n_way));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("eta", self.eta), ("lambda", self.lambda), ("beta_decay", self.beta_decay), ("init_gain", self.init_gain)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        let softmax = matches!(self.sigma_mode, SigmaMode::SoftmaxMinusLoss | SigmaMode::ScaledSoftmax);
        if softmax && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive for softmax coefficient modes".into());
        }
        if self.c < 1 {
            return bad("c must be at least 1".into());
        }
        if self.m_init < 1 || self.m_init > self.m_max {
            return bad(format!("need 1 <= m_init ({}) <= m_max ({})", self.m_init, self.m_max));
        }
        if self.train_pool == Some(0) {
            return bad("train_pool must be positive".into());
        }
        if self.batch_size < 1 || self.eval_tasks < 1 || self.eval_interval < 1 {
            return bad("batch_size, eval_tasks and eval_interval must be positive".into());
        }
        Ok(())
    }

    /// Basis count at the start of training.
    pub fn initial_bases(&self) -> usize {
        match self.variant {
            Variant::Xb => self.m_init,
            Variant::XbFixed => self.m_max,
            Variant::Maml => 1,
        }
    }

    pub fn expands(&self) -> bool {
        self.variant == Variant::Xb
    }

    /// Engine settings after applying the variant's overrides.
    pub fn step_config(&self) -> StepConfig {
        let maml = self.variant == Variant::Maml;
        StepConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: if maml { 1.0 } else { self.gamma },
            eta: if maml { 0.0 } else { self.eta },
            k: self.k_train,
            sigma_mode: if maml { SigmaMode::Equal } else { self.sigma_mode },
            detach_sigma: self.detach_sigma,
            reg_variant: self.reg_variant,
            span: self.span,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "single-domain" => Some(single_domain()),
            "multi-domain" => Some(multi_domain()),
            "desk" => Some(desk()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 3] = ["single-domain", "multi-domain", "desk"];
}

fn clusters(name: &str, weight: f64, scale: f64, offset: f64, transform_seed: u64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        weight,
        family: Family::GaussianClusters { dim: 8, class_spread: 1.0, noise_std: 0.5, scale, offset, transform_seed },
    }
}

fn classifier() -> ModelSpec {
    ModelSpec::mlp(vec![8, 32, 32, 5], Activation::Tanh, Head::Classification)
}

/// Full-length single-domain settings: 60k iterations, alpha 0.03, gamma 5, eta 5e-4.
pub fn single_domain() -> RunConfig {
    RunConfig {
        version: CONFIG_VERSION,
        model: classifier(),
        init_gain: 1.0,
        tasks: TaskDistribution { domains: vec![clusters("clusters", 1.0, 1.0, 0.0, 1)], k_shot: 5, n_query: 15, n_way: 5 },
        alpha: 0.03,
        beta: 0.001,
        beta_decay: 0.8,
        beta_decay_interval: 20_000,
        gamma: 5.0,
        eta: 0.0005,
        lambda: 0.01,
        k_train: 3,
        k_test: 7,
        batch_size: 2,
        train_pool: None,
        c: 500,
        m_max: 10,
        m_init: 1,
        iterations: 60_000,
        eval_interval: 500,
        eval_tasks: 600,
        seed: 0,
        sigma_mode: SigmaMode::SoftmaxMinusLoss,
        detach_sigma: false,
        reg_variant: RegVariant::Raw,
        span: SpanKind::Linear,
        variant: Variant::Xb,
    }
}

/// Full-length multi-domain settings: 80k iterations, alpha 0.05, gamma 8, eta 1e-3.
pub fn multi_domain() -> RunConfig {
    RunConfig {
        tasks: TaskDistribution {
            domains: vec![
                clusters("clusters-a", 1.0 / 3.0, 1.0, 0.0, 11),
                clusters("clusters-b", 1.0 / 3.0, 3.0, 2.0, 12),
                clusters("clusters-c", 1.0 / 3.0, 0.5, -2.0, 13),
            ],
            k_shot: 5,
            n_query: 15,
            n_way: 5,
        },
        alpha: 0.05,
        gamma: 8.0,
        eta: 0.001,
        iterations: 80_000,
        ..single_domain()
    }
}

/// Desk-scale three-domain regression mixture.
///
/// Each domain is a narrow family so a 30-task training pool covers it, and
/// the whole pool forms every batch, which keeps the averaged projection
/// ratio a smooth function of the bases.
pub fn desk() -> RunConfig {
    let x_range = Interval::new(-5.0, 5.0);
    RunConfig {
        version: CONFIG_VERSION,
        model: ModelSpec::mlp(vec![1, 20, 20, 1], Activation::Tanh, Head::Regression),
        init_gain: 1.0,
        tasks: TaskDistribution {
            domains: vec![
                DomainSpec {
                    name: "sinusoid".into(),
                    weight: 1.0 / 3.0,
                    family: Family::Sinusoid {
                        amplitude: Interval::new(3.0, 4.0),
                        phase: Interval::new(0.0, 0.5),
                        x_range,
                        noise_std: 0.0,
                    },
                },
                DomainSpec {
                    name: "linear".into(),
                    weight: 1.0 / 3.0,
                    family: Family::Linear {
                        slope: Interval::new(0.8, 1.2),
                        intercept: Interval::new(-3.0, -2.0),
                        x_range,
                        noise_std: 0.0,
                    },
                },
                DomainSpec {
                    name: "quadratic".into(),
                    weight: 1.0 / 3.0,
                    family: Family::Quadratic {
                        a: Interval::new(0.15, 0.25),
                        b: Interval::new(-0.2, 0.2),
                        c: Interval::new(-3.0, -2.0),
                        x_range,
                        noise_std: 0.0,
                    },
                },
            ],
            k_shot: 10,
            n_query: 15,
            n_way: 1,
        },
        alpha: 0.01,
        beta: 0.005,
        beta_decay: 0.8,
        beta_decay_interval: 2_000,
        gamma: 1.0,
        eta: 0.003,
        lambda: 0.1,
        k_train: 3,
        k_test: 7,
        batch_size: 30,
        train_pool: Some(30),
        c: 50,
        m_max: 6,
        m_init: 1,
        iterations: 8_000,
        eval_interval: 500,
        eval_tasks: 200,
        seed: 0,
        sigma_mode: SigmaMode::SoftmaxMinusLoss,
        detach_sigma: false,
        reg_variant: RegVariant::Squared,
        span: SpanKind::Linear,
        variant: Variant::Xb,
    }
}
