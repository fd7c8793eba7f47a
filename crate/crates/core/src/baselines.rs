//! Reference optimizers: random search and a single-task Matérn 5/2 GP.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bo::{Objective, RunHistory, StopReason};
use crate::dkgp::kernel::matern52_unit;
use crate::dkgp::{gp, Adam, KernelParams, PosteriorPrediction, NOISE_FLOOR};
use crate::error::{Error, Result};
use crate::metadata::Task;
use crate::space::SearchSpace;

pub const GP_RESTARTS: usize = 5;
pub const GP_STEPS: usize = 200;
pub const GP_LR: f64 = 0.05;

/// `signal_variance * (1 + √5 r + 5r²/3) exp(-√5 r)`.
pub fn matern52(r: f64, signal_variance: f64) -> f64 {
    signal_variance * matern52_unit(r)
}

/// Matérn 5/2 ARD GP on raw encodings with standardized labels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaternGp {
    pub kernel: KernelParams,
    pub y_mean: f64,
    pub y_std: f64,
    /// Negative log likelihood of the standardized labels at `kernel`.
    pub nll: f64,
    /// Set when every restart failed and `kernel` holds the defaults.
    pub fallback: bool,
}

fn standardize(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

/// Maximum-likelihood fit: restart 0 starts from unit lengthscales, the
/// others from log-lengthscales uniform in `[-2, 2]`. Each restart runs
/// [`GP_STEPS`] Adam steps; the best likelihood seen anywhere is kept.
pub fn fit_vanilla_gp<R: Rng + ?Sized>(x: &DMatrix<f64>, y: &[f64], rng: &mut R) -> MaternGp {
    let dim = x.ncols();
    let (y_mean, y_std) = standardize(y);
    let z: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();
    let defaults = KernelParams::matern52(dim, true);
    let mut best: Option<(f64, KernelParams)> = None;
    for restart in 0..GP_RESTARTS {
        let mut kp = defaults.clone();
        if restart > 0 {
            if let crate::dkgp::BaseKernel::Matern52 { log_lengthscales } = &mut kp.base {
                for l in log_lengthscales.iter_mut() {
                    *l = rng.random_range(-2.0..=2.0);
                }
            }
        }
        let mut params = Vec::with_capacity(kp.n_params());
        kp.write_params(&mut params);
        let mut adam = Adam::new(params.len());
        for _ in 0..GP_STEPS {
            let Ok((value, grad, _)) = gp::nll_grad_from_features(&kp, x, &z) else {
                break;
            };
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, kp.clone()));
            }
            if grad.iter().any(|g| !g.is_finite()) {
                break;
            }
            adam.step(&mut params, &grad, GP_LR);
            kp.read_params(&params);
            kp.log_noise_variance = kp.log_noise_variance.max(NOISE_FLOOR.ln());
            params.clear();
            kp.write_params(&mut params);
        }
        if let Ok(value) = gp::nll_from_features(&kp, x, &z) {
            if best.as_ref().is_none_or(|(b, _)| value < *b) {
                best = Some((value, kp));
            }
        }
    }
    match best {
        Some((nll, kernel)) => MaternGp {
            kernel,
            y_mean,
            y_std,
            nll,
            fallback: false,
        },
        None => {
            log::warn!("every GP restart failed numerically; using default hyperparameters");
            MaternGp {
                kernel: defaults,
                y_mean,
                y_std,
                nll: f64::NAN,
                fallback: true,
            }
        }
    }
}

impl MaternGp {
    /// Posterior in the original label units.
    pub fn posterior(&self, x_obs: &DMatrix<f64>, y: &[f64], x_query: &DMatrix<f64>) -> Result<PosteriorPrediction> {
        let z: Vec<f64> = y.iter().map(|v| (v - self.y_mean) / self.y_std).collect();
        let p = gp::posterior_from_features(&self.kernel, x_obs, &z, x_query, false)?;
        let s2 = self.y_std * self.y_std;
        Ok(PosteriorPrediction {
            mean: p.mean.iter().map(|m| m * self.y_std + self.y_mean).collect(),
            variance: p.variance.iter().map(|v| v * s2).collect(),
            covariance: None,
        })
    }
}

/// Uniform search without replacement over the rows of a task table.
pub fn random_search_table<R: Rng + ?Sized>(
    objective: &dyn Objective,
    task: &Task,
    budget: usize,
    rng: &mut R,
) -> Result<RunHistory> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..task.len()).collect();
    order.shuffle(rng);
    let mut history = RunHistory::new(objective.bounds());
    for &i in order.iter().take(budget) {
        let c = &task.records()[i].config;
        match objective.evaluate(c) {
            Ok(y) => history.push(c.clone(), y),
            Err(e) => {
                history.stop = StopReason::Failed(e.to_string());
                return Ok(history);
            }
        }
    }
    if budget > task.len() {
        history.stop = StopReason::Exhausted;
    }
    Ok(history)
}

/// Uniform search over a search space.
pub fn random_search_space<R: Rng + ?Sized>(
    objective: &dyn Objective,
    space: &SearchSpace,
    budget: usize,
    rng: &mut R,
) -> Result<RunHistory> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let mut history = RunHistory::new(objective.bounds());
    for _ in 0..budget {
        let c = space.sample_uniform(rng);
        match objective.evaluate(&c) {
            Ok(y) => history.push(c, y),
            Err(e) => {
                history.stop = StopReason::Failed(e.to_string());
                return Ok(history);
            }
        }
    }
    Ok(history)
}
