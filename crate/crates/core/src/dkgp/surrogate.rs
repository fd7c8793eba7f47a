use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::gp::{self, PosteriorPrediction};
use super::kernel::{BaseKernelKind, KernelParams};
use super::mlp::MlpParams;
use crate::error::{Error, Result};

/// Lower bound on the noise variance, enforced after every update.
pub const NOISE_FLOOR: f64 = 1e-8;

/// Shape of a deep-kernel surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateArch {
    pub input_dim: usize,
    /// Layer widths; the last one is the feature dimension. Empty means the
    /// raw encoded input is the feature vector.
    pub hidden: Vec<usize>,
    pub kernel: BaseKernelKind,
    /// One lengthscale per feature dimension instead of a shared one.
    pub ard: bool,
    /// Components of a spectral-mixture kernel; ignored otherwise.
    #[serde(default = "default_components")]
    pub mixture_components: usize,
}

fn default_components() -> usize {
    4
}

impl SurrogateArch {
    /// Two 128-wide layers, squared-exponential kernel with ARD.
    pub fn default_for(input_dim: usize) -> Self {
        SurrogateArch {
            input_dim,
            hidden: vec![128, 128],
            kernel: BaseKernelKind::SquaredExponential,
            ard: true,
            mixture_components: default_components(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Deep kernel `k(φ(x), φ(x'))` with a zero prior mean.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepKernelSurrogate {
    pub mlp: MlpParams,
    pub kernel: KernelParams,
}

impl DeepKernelSurrogate {
    pub fn new<R: Rng + ?Sized>(arch: &SurrogateArch, rng: &mut R) -> Self {
        let mlp = MlpParams::init(arch.input_dim, &arch.hidden, rng);
        let d = arch.feature_dim();
        let kernel = match arch.kernel {
            BaseKernelKind::SquaredExponential => KernelParams::squared_exponential(d, arch.ard),
            BaseKernelKind::Matern52 => KernelParams::matern52(d, arch.ard),
            BaseKernelKind::SpectralMixture => KernelParams::spectral_mixture(d, arch.mixture_components),
        };
        DeepKernelSurrogate { mlp, kernel }
    }

    pub fn from_parts(mlp: MlpParams, kernel: KernelParams) -> Result<Self> {
        if let Some(d) = kernel.feature_dim() {
            if d != mlp.output_dim() {
                return Err(Error::Dimension {
                    expected: mlp.output_dim(),
                    got: d,
                });
            }
        }
        Ok(DeepKernelSurrogate { mlp, kernel })
    }

    pub fn arch(&self) -> SurrogateArch {
        let (ard, components) = match &self.kernel.base {
            super::kernel::BaseKernel::SquaredExponential { log_lengthscales }
            | super::kernel::BaseKernel::Matern52 { log_lengthscales } => {
                (log_lengthscales.len() > 1, default_components())
            }
            super::kernel::BaseKernel::SpectralMixture { log_weights, .. } => (true, log_weights.len()),
        };
        SurrogateArch {
            input_dim: self.mlp.input_dim(),
            hidden: self.mlp.widths(),
            kernel: self.kernel.kind(),
            ard,
            mixture_components: components,
        }
    }

    pub fn n_mlp_params(&self) -> usize {
        self.mlp.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params() + self.kernel.n_params()
    }

    /// Flat parameters: network first, then kernel (signal, noise, shape).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.mlp.write_params(&mut out);
        self.kernel.write_params(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter count mismatch");
        let k = self.mlp.read_params(flat);
        self.kernel.read_params(&flat[k..]);
    }

    pub fn apply_noise_floor(&mut self) {
        self.kernel.log_noise_variance = self.kernel.log_noise_variance.max(NOISE_FLOOR.ln());
    }

    pub fn is_finite(&self) -> bool {
        self.mlp.is_finite() && self.kernel.is_finite()
    }

    pub fn features(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.mlp.forward(x)
    }

    /// `K_n` of the encoded inputs, jitter included.
    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(gp::gram_factor(&self.kernel, &self.features(x)?)?.k_n)
    }

    pub fn posterior(
        &self,
        x_obs: &DMatrix<f64>,
        y: &[f64],
        x_query: &DMatrix<f64>,
        full_covariance: bool,
    ) -> Result<PosteriorPrediction> {
        let zq = self.features(x_query)?;
        let zo = if x_obs.nrows() == 0 {
            DMatrix::zeros(0, zq.ncols())
        } else {
            self.features(x_obs)?
        };
        gp::posterior_from_features(&self.kernel, &zo, y, &zq, full_covariance)
    }

    pub fn nll(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
        gp::nll_from_features(&self.kernel, &self.features(x)?, y)
    }

    /// Negative log marginal likelihood and its gradient in [`params`](Self::params) order.
    pub fn nll_grad(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (z, cache) = self.mlp.forward_cached(x)?;
        let (value, kernel_grad, dz) = gp::nll_grad_from_features(&self.kernel, &z, y)?;
        let mut grad = self.mlp.backward(&cache, dz);
        grad.extend(kernel_grad);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok((value, grad))
    }
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub surrogate: DeepKernelSurrogate,
    /// Set when a step failed numerically; `surrogate` is then the start point.
    pub failed: bool,
    pub initial_nll: f64,
    pub final_nll: f64,
}

/// Full-batch Adam on the negative log marginal likelihood of `(x, y)`,
/// starting from `start`. `start` itself is never modified.
pub fn fine_tune(start: &DeepKernelSurrogate, x: &DMatrix<f64>, y: &[f64], steps: usize, lr: f64) -> FineTuneOutcome {
    let fail = |initial_nll: f64, why: &Error| {
        log::warn!("fine-tuning failed, keeping start parameters: {why}");
        FineTuneOutcome {
            surrogate: start.clone(),
            failed: true,
            initial_nll,
            final_nll: initial_nll,
        }
    };
    let mut current = start.clone();
    let mut params = current.params();
    let mut adam = Adam::new(params.len());
    let mut initial = f64::NAN;
    for step in 0..steps {
        let (value, grad) = match current.nll_grad(x, y) {
            Ok(r) => r,
            Err(e) => return fail(initial, &e),
        };
        if step == 0 {
            initial = value;
        }
        adam.step(&mut params, &grad, lr);
        current.set_params(&params);
        current.apply_noise_floor();
        params = current.params();
    }
    match current.nll(x, y) {
        Ok(final_nll) => {
            if steps == 0 {
                initial = final_nll;
            }
            FineTuneOutcome {
                surrogate: current,
                failed: false,
                initial_nll: initial,
                final_nll,
            }
        }
        Err(e) => fail(initial, &e),
    }
}

/// Row matrix from encoded vectors.
pub fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j])
}
