//! Versioned JSON container for a meta-trained surrogate.
//!
//! Parameters are stored as named row-major tensors of 64-bit floats. Floats
//! are written in shortest round-trip form, so a save/load cycle recovers
//! every parameter bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dkgp::{BaseKernel, DeepKernelSurrogate, KernelParams, Layer, MlpParams, SurrogateArch};
use crate::error::{Error, Result};
use crate::meta_train::TrainConfig;
use crate::space::SearchSpace;

pub const CHECKPOINT_FORMAT: &str = "fsbo-ckpt-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub surrogate: DeepKernelSurrogate,
    pub space_fingerprint: String,
    /// Content hash of the tasks the surrogate was trained on.
    pub dataset_fingerprint: String,
    pub config: TrainConfig,
    /// Mean batch negative log likelihood per outer iteration.
    pub loss_trace: Vec<f64>,
    pub skipped_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Container {
    format: String,
    space_fingerprint: String,
    dataset_fingerprint: String,
    train_config: TrainConfig,
    arch: SurrogateArch,
    tensors: Vec<Tensor>,
    loss_trace: Vec<f64>,
    skipped_steps: usize,
}

fn tensor(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor {
        name: name.into(),
        shape,
        data,
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {}", msg.into()))
}

impl Checkpoint {
    pub fn arch(&self) -> SurrogateArch {
        self.surrogate.arch()
    }

    pub fn to_json(&self) -> Result<String> {
        if self.loss_trace.iter().any(|v| !v.is_finite()) || !self.surrogate.is_finite() {
            return Err(Error::Checkpoint("refusing to save non-finite values".into()));
        }
        let mut tensors = Vec::new();
        for (i, l) in self.surrogate.mlp.layers().iter().enumerate() {
            let (r, c) = l.weight.shape();
            let w: Vec<f64> = (0..r)
                .flat_map(|i| l.weight.row(i).iter().copied().collect::<Vec<_>>())
                .collect();
            tensors.push(tensor(format!("mlp.{i}.weight"), vec![r, c], w));
            tensors.push(tensor(
                format!("mlp.{i}.bias"),
                vec![r],
                l.bias.iter().copied().collect(),
            ));
        }
        let k = &self.surrogate.kernel;
        tensors.push(tensor(
            "kernel.log_signal_variance",
            vec![1],
            vec![k.log_signal_variance],
        ));
        tensors.push(tensor("kernel.log_noise_variance", vec![1], vec![k.log_noise_variance]));
        match &k.base {
            BaseKernel::SquaredExponential { log_lengthscales } | BaseKernel::Matern52 { log_lengthscales } => {
                tensors.push(tensor(
                    "kernel.log_lengthscales",
                    vec![log_lengthscales.len()],
                    log_lengthscales.clone(),
                ));
            }
            BaseKernel::SpectralMixture {
                log_weights,
                means,
                log_variances,
            } => {
                let q = log_weights.len();
                let d = means.len() / q;
                tensors.push(tensor("kernel.mixture_log_weights", vec![q], log_weights.clone()));
                tensors.push(tensor("kernel.mixture_means", vec![q, d], means.clone()));
                tensors.push(tensor(
                    "kernel.mixture_log_variances",
                    vec![q, d],
                    log_variances.clone(),
                ));
            }
        }
        let c = Container {
            format: CHECKPOINT_FORMAT.into(),
            space_fingerprint: self.space_fingerprint.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            train_config: self.config.clone(),
            arch: self.arch(),
            tensors,
            loss_trace: self.loss_trace.clone(),
            skipped_steps: self.skipped_steps,
        };
        Ok(serde_json::to_string(&c)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            Some(other) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported format `{other}`, expected `{CHECKPOINT_FORMAT}`"
                )))
            }
            None => return Err(corrupt("missing format tag")),
        }
        let c: Container = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
        let mut tensors: std::collections::HashMap<String, Tensor> =
            c.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
            let n: usize = t.shape.iter().product();
            if t.shape != shape || t.data.len() != n {
                return Err(corrupt(format!(
                    "tensor `{name}` has shape {:?} with {} values, expected {:?}",
                    t.shape,
                    t.data.len(),
                    shape
                )));
            }
            Ok(t.data)
        };

        let arch = &c.arch;
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.input_dim;
        for (i, &w) in arch.hidden.iter().enumerate() {
            let weight = take(&format!("mlp.{i}.weight"), &[w, fan_in])?;
            let bias = take(&format!("mlp.{i}.bias"), &[w])?;
            layers.push(Layer {
                weight: DMatrix::from_row_slice(w, fan_in, &weight),
                bias: DVector::from_vec(bias),
            });
            fan_in = w;
        }
        let mlp = if layers.is_empty() {
            MlpParams::identity(arch.input_dim)
        } else {
            MlpParams::from_layers(layers)?
        };
        let d = arch.feature_dim();
        let log_signal_variance = take("kernel.log_signal_variance", &[1])?[0];
        let log_noise_variance = take("kernel.log_noise_variance", &[1])?[0];
        let n_ls = if arch.ard { d } else { 1 };
        let base = match arch.kernel {
            crate::dkgp::BaseKernelKind::SquaredExponential => BaseKernel::SquaredExponential {
                log_lengthscales: take("kernel.log_lengthscales", &[n_ls])?,
            },
            crate::dkgp::BaseKernelKind::Matern52 => BaseKernel::Matern52 {
                log_lengthscales: take("kernel.log_lengthscales", &[n_ls])?,
            },
            crate::dkgp::BaseKernelKind::SpectralMixture => {
                let q = arch.mixture_components;
                BaseKernel::SpectralMixture {
                    log_weights: take("kernel.mixture_log_weights", &[q])?,
                    means: take("kernel.mixture_means", &[q, d])?,
                    log_variances: take("kernel.mixture_log_variances", &[q, d])?,
                }
            }
        };
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor `{name}`")));
        }
        let surrogate = DeepKernelSurrogate::from_parts(
            mlp,
            KernelParams {
                log_signal_variance,
                log_noise_variance,
                base,
            },
        )?;
        if !surrogate.is_finite() || c.loss_trace.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite values"));
        }
        Ok(Checkpoint {
            surrogate,
            space_fingerprint: c.space_fingerprint,
            dataset_fingerprint: c.dataset_fingerprint,
            config: c.train_config,
            loss_trace: c.loss_trace,
            skipped_steps: c.skipped_steps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Load and check that the checkpoint was trained on `space`.
    pub fn load_for(path: impl AsRef<Path>, space: &SearchSpace) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_space(space)?;
        Ok(ck)
    }

    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        let fp = space.fingerprint();
        if fp != self.space_fingerprint {
            return Err(Error::Checkpoint(format!(
                "search space fingerprint mismatch: checkpoint {}, space {}",
                self.space_fingerprint, fp
            )));
        }
        if self.surrogate.mlp.input_dim() != space.encoded_dim() {
            return Err(Error::Dimension {
                expected: space.encoded_dim(),
                got: self.surrogate.mlp.input_dim(),
            });
        }
        Ok(())
    }
}
