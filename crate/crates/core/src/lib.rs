//! Few-shot Bayesian optimization: a deep-kernel GP surrogate meta-trained
//! across related tasks, an evolutionary warm start, and a benchmark harness.

pub mod baselines;
pub mod bo;
pub mod checkpoint;
pub mod dkgp;
pub mod error;
pub mod harness;
pub mod meta_train;
pub mod metadata;
pub mod space;
pub mod warmstart;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
