//! Expandable-basis meta-learning.
//!
//! A set of basis initializations is meta-trained jointly. Each task mixes
//! the bases with softmax coefficients derived from their support losses,
//! fine-tunes the mixture, and the query loss is differentiated back through
//! the fine-tuning steps into every basis. The basis set grows when
//! fine-tuned parameters keep drifting out of the span of the current bases.

pub mod autodiff;
pub mod basis;
pub mod engine;
pub mod error;
pub mod harness;
pub mod maml;
pub mod model;
pub mod param;
pub mod tasks;

pub use error::{Error, Result};
pub use param::ParamVector;
