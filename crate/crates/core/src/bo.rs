//! Sequential Bayesian optimization with Expected Improvement.
//!
//! Objectives are losses. The acquisition maximizes `g = -loss`, so a
//! surrogate fitted to losses contributes `-mean` as the mean of `g`.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_vanilla_gp;
use crate::dkgp::{fine_tune, DeepKernelSurrogate, PosteriorPrediction, SurrogateArch};
use crate::error::{Error, Result};
use crate::metadata::{TabularOracle, Task};
use crate::space::{Config, SearchSpace};

/// Smallest predictive standard deviation used as a divisor.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Points of the even grid added to random pools on one-dimensional spaces.
pub const GRID_POINTS_1D: usize = 512;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `E[max(G - g_best, 0)]` for `G ~ N(mean, variance)`.
pub fn expected_improvement(mean: f64, variance: f64, g_best: f64) -> f64 {
    let diff = mean - g_best;
    if variance <= 0.0 {
        return diff.max(0.0);
    }
    let sigma = variance.sqrt().max(SIGMA_FLOOR);
    let z = diff / sigma;
    (diff * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// Index maximizing EI; ties go to the higher mean, then the lower index.
pub fn argmax_ei(ei: &[f64], mean_g: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..ei.len() {
        best = match best {
            None => Some(i),
            Some(b) if ei[i] > ei[b] || (ei[i] == ei[b] && mean_g[i] > mean_g[b]) => Some(i),
            keep => keep,
        };
    }
    best
}

/// EI of every candidate for a posterior over losses.
pub fn ei_for_losses(prediction: &PosteriorPrediction, best_loss: f64) -> (Vec<f64>, Vec<f64>) {
    let mean_g: Vec<f64> = prediction.mean.iter().map(|m| -m).collect();
    let ei = mean_g
        .iter()
        .zip(&prediction.variance)
        .map(|(&m, &v)| expected_improvement(m, v, -best_loss))
        .collect();
    (ei, mean_g)
}

/// Candidate with the highest EI under `surrogate` fitted to `(x_obs, y_obs)` losses.
pub fn propose(
    surrogate: &DeepKernelSurrogate,
    x_obs: &DMatrix<f64>,
    y_obs: &[f64],
    candidates: &DMatrix<f64>,
) -> Result<usize> {
    if candidates.nrows() == 0 {
        return Err(Error::SearchExhausted);
    }
    let pred = surrogate.posterior(x_obs, y_obs, candidates, false)?;
    let best = y_obs.iter().copied().fold(f64::INFINITY, f64::min);
    let (ei, mean_g) = ei_for_losses(&pred, best);
    Ok(argmax_ei(&ei, &mean_g).expect("nonempty candidates"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CandidateStrategy {
    /// Every unevaluated row of the target task table.
    Table,
    /// Fresh uniform samples each trial, plus an even grid on 1-D spaces.
    Random { n: usize },
}

/// Candidates for the next trial, with their encodings.
pub fn candidate_pool<R: Rng + ?Sized>(
    strategy: &CandidateStrategy,
    space: &SearchSpace,
    task: Option<&Task>,
    evaluated: &[Vec<f64>],
    rng: &mut R,
) -> Result<(Vec<Config>, Vec<Vec<f64>>)> {
    match strategy {
        CandidateStrategy::Table => {
            let task = task.ok_or_else(|| Error::InvalidArgument("table candidates need a task table".into()))?;
            let seen: Vec<usize> = evaluated.iter().filter_map(|x| task.find_row(x)).collect();
            let mut configs = Vec::new();
            let mut encoded = Vec::new();
            for (i, (r, e)) in task.records().iter().zip(task.encoded()).enumerate() {
                if !seen.contains(&i) {
                    configs.push(r.config.clone());
                    encoded.push(e.clone());
                }
            }
            Ok((configs, encoded))
        }
        CandidateStrategy::Random { n } => {
            let mut configs: Vec<Config> = (0..*n).map(|_| space.sample_uniform(rng)).collect();
            if space.single_continuous().is_some() {
                let m = GRID_POINTS_1D;
                configs.extend((0..m).filter_map(|i| space.from_unit_1d(i as f64 / (m - 1) as f64)));
            }
            let encoded = configs.iter().map(|c| space.encode(c)).collect::<Result<Vec<_>>>()?;
            Ok((configs, encoded))
        }
    }
}

/// Black-box loss to be minimized.
pub trait Objective {
    fn evaluate(&self, config: &Config) -> Result<f64>;

    /// `(f_min, f_max)` used to normalize regret, when known.
    fn bounds(&self) -> Option<(f64, f64)> {
        None
    }
}

impl Objective for TabularOracle<'_> {
    fn evaluate(&self, config: &Config) -> Result<f64> {
        TabularOracle::evaluate(self, config)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        Some((self.task.f_min(), self.task.f_max()))
    }
}

/// Objective backed by a closure.
pub struct FnObjective<F> {
    pub f: F,
    pub bounds: Option<(f64, f64)>,
}

impl<F: Fn(&Config) -> Result<f64>> Objective for FnObjective<F> {
    fn evaluate(&self, config: &Config) -> Result<f64> {
        (self.f)(config)
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub config: Config,
    pub objective: f64,
    /// Best objective up to and including this trial.
    pub incumbent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Budget,
    Exhausted,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub trials: Vec<Trial>,
    pub bounds: Option<(f64, f64)>,
    pub stop: StopReason,
    /// Trials whose surrogate fit fell back to unfitted parameters.
    pub fit_failures: usize,
}

impl RunHistory {
    pub fn new(bounds: Option<(f64, f64)>) -> Self {
        RunHistory {
            trials: Vec::new(),
            bounds,
            stop: StopReason::Budget,
            fit_failures: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn push(&mut self, config: Config, objective: f64) {
        let incumbent = self.trials.last().map_or(objective, |t| t.incumbent.min(objective));
        self.trials.push(Trial {
            config,
            objective,
            incumbent,
        });
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.objective).collect()
    }

    pub fn incumbent(&self) -> Option<f64> {
        self.trials.last().map(|t| t.incumbent)
    }

    /// Incumbent after `trial` evaluations (1-based); past the end of a
    /// shorter run the final incumbent is carried forward.
    pub fn incumbent_at(&self, trial: usize) -> Option<f64> {
        if trial == 0 || self.trials.is_empty() {
            return None;
        }
        Some(self.trials[trial.min(self.trials.len()) - 1].incumbent)
    }

    /// `(incumbent - f_min) / (f_max - f_min)` after `trial` evaluations.
    pub fn normalized_regret(&self, trial: usize) -> Option<f64> {
        let (lo, hi) = self.bounds?;
        if hi <= lo {
            return None;
        }
        self.incumbent_at(trial).map(|inc| (inc - lo) / (hi - lo))
    }

    pub fn regret_curve(&self) -> Option<Vec<f64>> {
        (1..=self.trials.len()).map(|t| self.normalized_regret(t)).collect()
    }

    /// Columns `trial, config, objective, incumbent, normalized_regret`;
    /// regret is empty when the bounds are unknown.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["trial", "config", "objective", "incumbent", "normalized_regret"])?;
        for (i, t) in self.trials.iter().enumerate() {
            let regret = self.normalized_regret(i + 1).map(fmt17).unwrap_or_default();
            w.write_record([
                (i + 1).to_string(),
                t.config.to_json(),
                fmt17(t.objective),
                fmt17(t.incumbent),
                regret,
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// How the surrogate is obtained at every trial.
#[derive(Clone, Debug)]
pub enum SurrogateMode {
    /// Fine-tune the meta-trained surrogate on the target observations.
    FewShot(DeepKernelSurrogate),
    /// Train a freshly initialized deep kernel on the target observations.
    Scratch(SurrogateArch),
    /// Single-task Matérn 5/2 GP on standardized labels.
    VanillaGp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    /// Total evaluations, initial design included.
    pub budget: usize,
    pub init_configs: Vec<Config>,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub candidate_strategy: CandidateStrategy,
    pub seed: u64,
    /// Fine-tune from the meta-trained parameters at every trial, rather
    /// than continuing from the previous trial's fit.
    pub restart_fine_tune: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            budget: 100,
            init_configs: Vec::new(),
            fine_tune_steps: 100,
            fine_tune_lr: 1e-3,
            candidate_strategy: CandidateStrategy::Table,
            seed: 0,
            restart_fine_tune: true,
        }
    }
}

/// What the loop saw when choosing one trial.
pub struct StepInfo<'a> {
    /// 1-based index of the trial being chosen.
    pub trial: usize,
    pub candidates: &'a [Config],
    pub encoded: &'a DMatrix<f64>,
    pub prediction: &'a PosteriorPrediction,
    pub ei: &'a [f64],
    pub chosen: usize,
}

/// Runs BO until the budget is spent or candidates run out. Evaluation
/// errors end the run early; the partial history is returned with
/// [`StopReason::Failed`].
pub fn run_bo(
    mode: &SurrogateMode,
    objective: &dyn Objective,
    space: &SearchSpace,
    task: Option<&Task>,
    config: &BoConfig,
) -> Result<RunHistory> {
    run_bo_observed(mode, objective, space, task, config, &mut |_| {})
}

pub fn run_bo_observed(
    mode: &SurrogateMode,
    objective: &dyn Objective,
    space: &SearchSpace,
    task: Option<&Task>,
    config: &BoConfig,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<RunHistory> {
    if config.init_configs.is_empty() {
        return Err(Error::InvalidArgument(
            "BO needs at least one initial configuration".into(),
        ));
    }
    if config.budget < config.init_configs.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {} is smaller than the initial design ({})",
            config.budget,
            config.init_configs.len()
        )));
    }
    for c in &config.init_configs {
        space.check(c)?;
    }
    let dim = space.encoded_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = RunHistory::new(objective.bounds());
    let mut xs: Vec<Vec<f64>> = Vec::new();

    for c in &config.init_configs {
        match objective.evaluate(c) {
            Ok(y) => {
                xs.push(space.encode(c)?);
                history.push(c.clone(), y);
            }
            Err(e) => {
                history.stop = StopReason::Failed(e.to_string());
                return Ok(history);
            }
        }
    }

    let mut carried: Option<DeepKernelSurrogate> = None;
    while history.len() < config.budget {
        let (configs, encoded) = candidate_pool(&config.candidate_strategy, space, task, &xs, &mut rng)?;
        if configs.is_empty() {
            history.stop = StopReason::Exhausted;
            return Ok(history);
        }
        let x_obs = DMatrix::from_fn(xs.len(), dim, |i, j| xs[i][j]);
        let y_obs = history.objectives();
        let x_cand = DMatrix::from_fn(encoded.len(), dim, |i, j| encoded[i][j]);
        let prediction = match mode {
            SurrogateMode::FewShot(start) => {
                let from = match (&carried, config.restart_fine_tune) {
                    (Some(prev), false) => prev,
                    _ => start,
                };
                let out = fine_tune(from, &x_obs, &y_obs, config.fine_tune_steps, config.fine_tune_lr);
                history.fit_failures += out.failed as usize;
                let pred = out.surrogate.posterior(&x_obs, &y_obs, &x_cand, false);
                carried = Some(out.surrogate);
                pred
            }
            SurrogateMode::Scratch(arch) => {
                let init = DeepKernelSurrogate::new(arch, &mut rng);
                let out = fine_tune(&init, &x_obs, &y_obs, config.fine_tune_steps, config.fine_tune_lr);
                history.fit_failures += out.failed as usize;
                out.surrogate.posterior(&x_obs, &y_obs, &x_cand, false)
            }
            SurrogateMode::VanillaGp => {
                let gp = fit_vanilla_gp(&x_obs, &y_obs, &mut rng);
                history.fit_failures += gp.fallback as usize;
                gp.posterior(&x_obs, &y_obs, &x_cand)
            }
        };
        let prediction = match prediction {
            Ok(p) => p,
            Err(e) => {
                history.stop = StopReason::Failed(e.to_string());
                return Ok(history);
            }
        };
        let best = history.incumbent().expect("initial design evaluated");
        let (ei, mean_g) = ei_for_losses(&prediction, best);
        let chosen = argmax_ei(&ei, &mean_g).expect("nonempty candidates");
        observer(&StepInfo {
            trial: history.len() + 1,
            candidates: &configs,
            encoded: &x_cand,
            prediction: &prediction,
            ei: &ei,
            chosen,
        });
        let next = configs[chosen].clone();
        match objective.evaluate(&next) {
            Ok(y) => {
                xs.push(encoded[chosen].clone());
                history.push(next, y);
            }
            Err(e) => {
                history.stop = StopReason::Failed(e.to_string());
                return Ok(history);
            }
        }
    }
    Ok(history)
}
