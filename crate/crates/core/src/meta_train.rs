//! Meta-training of the shared deep-kernel surrogate across source tasks,
//! with per-task random label rescaling.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dkgp::{Adam, BaseKernelKind, DeepKernelSurrogate, SurrogateArch};
use crate::error::{Error, Result};
use crate::metadata::{label_bounds, tasks_fingerprint, Task};
use crate::space::SearchSpace;

/// Largest fraction of numerically failed steps tolerated before training aborts.
pub const MAX_SKIPPED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub outer_iterations: usize,
    /// Batches drawn from each sampled task.
    pub inner_steps: usize,
    pub batch_size: usize,
    /// Learning rate of the kernel parameters.
    pub lr_theta: f64,
    /// Learning rate of the network weights.
    pub lr_w: f64,
    pub seed: u64,
    pub augmentation: bool,
    pub min_range_fraction: f64,
    /// Draw fresh label limits for every inner batch instead of once per task draw.
    pub limits_per_batch: bool,
    pub hidden: Vec<usize>,
    pub kernel: BaseKernelKind,
    pub ard: bool,
    pub mixture_components: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_iterations: 10_000,
            inner_steps: 1,
            batch_size: 50,
            lr_theta: 1e-3,
            lr_w: 1e-3,
            seed: 0,
            augmentation: true,
            min_range_fraction: 0.05,
            limits_per_batch: false,
            hidden: vec![128, 128],
            kernel: BaseKernelKind::SquaredExponential,
            ard: true,
            mixture_components: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size < 2 {
            problems.push("batch_size must be at least 2");
        }
        if self.inner_steps == 0 {
            problems.push("inner_steps must be at least 1");
        }
        if !(self.lr_theta > 0.0 && self.lr_theta.is_finite()) || !(self.lr_w > 0.0 && self.lr_w.is_finite()) {
            problems.push("learning rates must be positive");
        }
        if !(self.min_range_fraction > 0.0 && self.min_range_fraction < 1.0) {
            problems.push("min_range_fraction must lie in (0, 1)");
        }
        if self.hidden.contains(&0) {
            problems.push("hidden widths must be positive");
        }
        if self.kernel == BaseKernelKind::SpectralMixture && self.mixture_components == 0 {
            problems.push("mixture_components must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn arch(&self, input_dim: usize) -> SurrogateArch {
        SurrogateArch {
            input_dim,
            hidden: self.hidden.clone(),
            kernel: self.kernel,
            ard: self.ard,
            mixture_components: self.mixture_components,
        }
    }
}

/// Uniform task index.
pub fn sample_task<R: Rng + ?Sized>(n_tasks: usize, rng: &mut R) -> usize {
    assert!(n_tasks >= 1, "no tasks to sample from");
    rng.random_range(0..n_tasks)
}

/// `l, u ~ U(y_min, y_max)` jointly rejected until `u - l` covers at least
/// `min_range_fraction` of the range (and `l < u`).
pub fn sample_limits<R: Rng + ?Sized>(y_min: f64, y_max: f64, min_range_fraction: f64, rng: &mut R) -> (f64, f64) {
    draw_limits(y_min, y_max, min_range_fraction, rng).0
}

/// Accepted pair and the number of pairs drawn.
fn draw_limits<R: Rng + ?Sized>(y_min: f64, y_max: f64, min_range_fraction: f64, rng: &mut R) -> ((f64, f64), usize) {
    assert!(y_min < y_max, "sample_limits needs y_min < y_max");
    let min_gap = min_range_fraction * (y_max - y_min);
    let mut attempts = 0;
    loop {
        attempts += 1;
        let l = rng.random_range(y_min..=y_max);
        let u = rng.random_range(y_min..=y_max);
        if u > l && u - l >= min_gap {
            return ((l, u), attempts);
        }
    }
}

/// `(y - l) / (u - l)`.
pub fn scale_labels(y: &[f64], l: f64, u: f64) -> Result<Vec<f64>> {
    if !(u > l) {
        return Err(Error::InvalidArgument(format!(
            "label limits need l < u, got l={l}, u={u}"
        )));
    }
    let w = u - l;
    Ok(y.iter().map(|v| (v - l) / w).collect())
}

/// Inverse of [`scale_labels`].
pub fn unscale_labels(y: &[f64], l: f64, u: f64) -> Vec<f64> {
    y.iter().map(|v| v * (u - l) + l).collect()
}

/// Row indices of one batch: without replacement when the task is large
/// enough, otherwise with replacement.
pub fn sample_batch<R: Rng + ?Sized>(n_rows: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    if n_rows >= batch_size {
        index::sample(rng, n_rows, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n_rows)).collect()
    }
}

/// Runs the meta-training loop from a fresh seeded initialization.
pub fn meta_train(space: &SearchSpace, tasks: &[Task], config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("meta-training needs at least one task".into()));
    }
    let (y_min, y_max) = label_bounds(tasks);
    if config.augmentation && !(y_min < y_max) {
        return Err(Error::InvalidArgument("all training objectives are equal".into()));
    }
    let dim = space.encoded_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut surrogate = DeepKernelSurrogate::new(&config.arch(dim), &mut rng);
    let n_mlp = surrogate.n_mlp_params();
    let mut params = surrogate.params();
    let mut adam = Adam::new(params.len());
    let total = config.outer_iterations * config.inner_steps;
    let mut skipped = 0usize;
    let mut loss_trace = Vec::with_capacity(config.outer_iterations);

    for iteration in 0..config.outer_iterations {
        let task = &tasks[sample_task(tasks.len(), &mut rng)];
        let mut limits = config
            .augmentation
            .then(|| sample_limits(y_min, y_max, config.min_range_fraction, &mut rng));
        let mut batch_sum = 0.0;
        let mut batch_ok = 0usize;
        for inner in 0..config.inner_steps {
            if config.augmentation && config.limits_per_batch && inner > 0 {
                limits = Some(sample_limits(y_min, y_max, config.min_range_fraction, &mut rng));
            }
            let rows = sample_batch(task.len(), config.batch_size, &mut rng);
            let x = DMatrix::from_fn(rows.len(), dim, |i, j| task.encoded()[rows[i]][j]);
            let raw: Vec<f64> = rows.iter().map(|&r| task.records()[r].y).collect();
            let y = match limits {
                Some((l, u)) => scale_labels(&raw, l, u)?,
                None => raw,
            };
            let step = surrogate.nll_grad(&x, &y).and_then(|(value, grad)| {
                let mut next = params.clone();
                adam.step_with(
                    &mut next,
                    &grad,
                    |i| if i < n_mlp { config.lr_w } else { config.lr_theta },
                );
                let mut candidate = surrogate.clone();
                candidate.set_params(&next);
                candidate.apply_noise_floor();
                if candidate.is_finite() {
                    Ok((value, candidate))
                } else {
                    Err(Error::Numerical("update produced non-finite parameters".into()))
                }
            });
            match step {
                Ok((value, next)) => {
                    surrogate = next;
                    params = surrogate.params();
                    batch_sum += value;
                    batch_ok += 1;
                }
                Err(e) => {
                    skipped += 1;
                    log::warn!("meta-training step {iteration}.{inner} skipped: {e}");
                    if skipped as f64 > MAX_SKIPPED_FRACTION * total as f64 {
                        return Err(Error::TrainingAborted {
                            skipped,
                            total,
                            last: e.to_string(),
                        });
                    }
                }
            }
        }
        if batch_ok > 0 {
            loss_trace.push(batch_sum / batch_ok as f64);
        }
        if (iteration + 1) % 1000 == 0 {
            log::info!(
                "meta-training iteration {}/{}: batch nll {:.4}",
                iteration + 1,
                config.outer_iterations,
                loss_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
    }

    Ok(Checkpoint {
        surrogate,
        space_fingerprint: space.fingerprint(),
        dataset_fingerprint: tasks_fingerprint(space, tasks),
        config: config.clone(),
        loss_trace,
        skipped_steps: skipped,
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(trace: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for i in 0..trace.len() {
        sum += trace[i];
        if i >= w {
            sum -= trace[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
