//! Run configuration, training loop, evaluation, checkpoints and analysis.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod selftest;
pub mod train;

pub use analysis::{analyze, evaluate_checkpoint, write_analysis, AnalysisBundle};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Variant};
pub use eval::{EvalReport, Summary};
pub use train::{run_training, threads_from_env, RunArtifacts, Trainer};
