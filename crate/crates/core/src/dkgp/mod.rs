//! Deep-kernel Gaussian process surrogate.

pub mod adam;
pub mod gp;
pub mod kernel;
pub mod mlp;
pub mod surrogate;

pub use adam::Adam;
pub use gp::{GramFactor, PosteriorPrediction};
pub use kernel::{BaseKernel, BaseKernelKind, KernelParams, PreparedKernel};
pub use mlp::{Layer, MlpParams};
pub use surrogate::{fine_tune, rows_to_matrix, DeepKernelSurrogate, FineTuneOutcome, SurrogateArch, NOISE_FLOOR};
