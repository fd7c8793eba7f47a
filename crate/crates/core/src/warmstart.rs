//! Data-driven initial designs: a set of `I` configurations minimizing the
//! summed per-task best normalized response on the source tasks, found by a
//! steady-state evolutionary search over candidate subsets.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dkgp::{fine_tune, DeepKernelSurrogate};
use crate::error::{Error, Result};
use crate::metadata::Task;
use crate::space::{Config, SearchSpace};

/// Largest number of task records a surrogate is fine-tuned on when imputing.
pub const IMPUTATION_MAX_POINTS: usize = 100;

/// Normalized responses of `C` candidates on `T` tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMatrix {
    pub candidates: Vec<Config>,
    /// `C × T`.
    pub values: DMatrix<f64>,
    pub imputed: DMatrix<bool>,
    /// Tasks whose imputation fell back to the observed mean.
    pub fallback_tasks: usize,
}

#[derive(Clone, Debug)]
pub struct ImputeConfig {
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub seed: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            fine_tune_steps: 100,
            fine_tune_lr: 1e-3,
            seed: 0,
        }
    }
}

/// Union of all task configurations, in task order then row order.
pub fn candidates_from_tasks(tasks: &[Task]) -> Vec<Config> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in tasks {
        for (r, e) in t.records().iter().zip(t.encoded()) {
            let key: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                out.push(r.config.clone());
            }
        }
    }
    out
}

impl ResponseMatrix {
    /// Fully observed matrix; used when every value is known.
    pub fn from_values(candidates: Vec<Config>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != candidates.len() {
            return Err(Error::Dimension {
                expected: candidates.len(),
                got: values.nrows(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("response matrix has non-finite entries".into()));
        }
        let imputed = DMatrix::from_element(values.nrows(), values.ncols(), false);
        Ok(ResponseMatrix {
            candidates,
            values,
            imputed,
            fallback_tasks: 0,
        })
    }

    pub fn n_candidates(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.values.ncols()
    }

    /// Observed entries are normalized responses of the records. Missing
    /// entries are posterior means of `surrogate` fine-tuned on the task,
    /// clipped to the task's observed range so that the normalization
    /// extrema are those of the records.
    pub fn build(
        surrogate: &DeepKernelSurrogate,
        space: &SearchSpace,
        tasks: &[Task],
        candidates: Vec<Config>,
        config: &ImputeConfig,
    ) -> Result<Self> {
        let encoded = candidates.iter().map(|c| space.encode(c)).collect::<Result<Vec<_>>>()?;
        let dim = space.encoded_dim();
        let columns: Vec<(Vec<f64>, Vec<bool>, bool)> = tasks
            .par_iter()
            .enumerate()
            .map(|(t, task)| impute_column(surrogate, task, &encoded, dim, config, t as u64))
            .collect();
        let c = candidates.len();
        let mut values = DMatrix::zeros(c, tasks.len());
        let mut imputed = DMatrix::from_element(c, tasks.len(), false);
        let mut fallback_tasks = 0;
        for (t, (col, mask, fell_back)) in columns.into_iter().enumerate() {
            fallback_tasks += fell_back as usize;
            for i in 0..c {
                values[(i, t)] = col[i];
                imputed[(i, t)] = mask[i];
            }
        }
        Ok(ResponseMatrix {
            candidates,
            values,
            imputed,
            fallback_tasks,
        })
    }
}

fn impute_column(
    surrogate: &DeepKernelSurrogate,
    task: &Task,
    encoded: &[Vec<f64>],
    dim: usize,
    config: &ImputeConfig,
    salt: u64,
) -> (Vec<f64>, Vec<bool>, bool) {
    let rows: Vec<Option<usize>> = encoded.iter().map(|x| task.find_row(x)).collect();
    let missing: Vec<usize> = (0..encoded.len()).filter(|&i| rows[i].is_none()).collect();
    let mut raw: Vec<f64> = rows
        .iter()
        .map(|r| r.map_or(f64::NAN, |r| task.records()[r].y))
        .collect();
    let mut fell_back = false;
    if !missing.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = task.len();
        let subset: Vec<usize> = if n > IMPUTATION_MAX_POINTS {
            let mut s = index::sample(&mut rng, n, IMPUTATION_MAX_POINTS).into_vec();
            s.sort_unstable();
            s
        } else {
            (0..n).collect()
        };
        let x = DMatrix::from_fn(subset.len(), dim, |i, j| task.encoded()[subset[i]][j]);
        let y: Vec<f64> = subset.iter().map(|&i| task.records()[i].y).collect();
        let xq = DMatrix::from_fn(missing.len(), dim, |i, j| encoded[missing[i]][j]);
        let tuned = fine_tune(surrogate, &x, &y, config.fine_tune_steps, config.fine_tune_lr);
        let prediction = if tuned.failed {
            None
        } else {
            tuned.surrogate.posterior(&x, &y, &xq, false).ok()
        };
        match prediction {
            Some(p) if p.mean.iter().all(|m| m.is_finite()) => {
                for (k, &i) in missing.iter().enumerate() {
                    raw[i] = p.mean[k].clamp(task.f_min(), task.f_max());
                }
            }
            _ => {
                log::warn!("imputation for task `{}` failed; using the observed mean", task.id());
                fell_back = true;
                let mean = task.ys().iter().sum::<f64>() / n as f64;
                for &i in &missing {
                    raw[i] = mean;
                }
            }
        }
    }
    let column = match task.normalize_response(0.0) {
        Ok(_) => raw
            .iter()
            .map(|&v| task.normalize_response(v).expect("checked"))
            .collect(),
        Err(e) => {
            log::warn!("{e}; its column is set to zero");
            vec![0.0; raw.len()]
        }
    };
    let mask = rows.iter().map(|r| r.is_none()).collect();
    (column, mask, fell_back)
}

/// Summed over tasks, the best value among the rows in `set`.
pub fn set_loss(set: &[usize], matrix: &ResponseMatrix) -> f64 {
    (0..matrix.n_tasks())
        .map(|t| set.iter().map(|&i| matrix.values[(i, t)]).fold(f64::INFINITY, f64::min))
        .sum()
}

/// `exp(-min(row))`.
pub fn init_weight(row: &[f64]) -> f64 {
    (-row.iter().copied().fold(f64::INFINITY, f64::min)).exp()
}

/// Sampling weights of all candidates.
pub fn candidate_weights(matrix: &ResponseMatrix) -> Vec<f64> {
    (0..matrix.n_candidates())
        .map(|i| init_weight(&matrix.values.row(i).iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Index drawn proportionally to `weights` among those not in `exclude`.
pub fn weighted_draw<R: Rng + ?Sized>(weights: &[f64], exclude: &[usize], rng: &mut R) -> Option<usize> {
    if (0..weights.len()).all(|i| exclude.contains(&i)) {
        return None;
    }
    let total: f64 = (0..weights.len())
        .filter(|i| !exclude.contains(i))
        .map(|i| weights[i])
        .sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        last = Some(i);
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    last
}

/// Replace a uniformly chosen member by a weighted draw among non-members.
/// With no non-members left the set is returned unchanged.
pub fn mutate<R: Rng + ?Sized>(set: &[usize], weights: &[f64], rng: &mut R) -> Vec<usize> {
    let k = rng.random_range(0..set.len());
    let mut child = set.to_vec();
    if let Some(new) = weighted_draw(weights, set, rng) {
        child[k] = new;
    }
    child.sort_unstable();
    child
}

/// `|set_a|` distinct members drawn uniformly from the union of the parents.
pub fn crossover<R: Rng + ?Sized>(set_a: &[usize], set_b: &[usize], rng: &mut R) -> Vec<usize> {
    let mut union: Vec<usize> = set_a.to_vec();
    for &i in set_b {
        if !union.contains(&i) {
            union.push(i);
        }
    }
    let mut child: Vec<usize> = union.choose_multiple(rng, set_a.len()).copied().collect();
    child.sort_unstable();
    child
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EaConfig {
    pub set_size: usize,
    pub population_size: usize,
    pub steps: usize,
    pub mutation_prob: f64,
    pub seed: u64,
}

impl Default for EaConfig {
    fn default() -> Self {
        EaConfig {
            set_size: 5,
            population_size: 100,
            steps: 100_000,
            mutation_prob: 0.5,
            seed: 0,
        }
    }
}

impl EaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.set_size == 0 {
            return Err(Error::InvalidArgument("set_size must be at least 1".into()));
        }
        if self.population_size < 2 {
            return Err(Error::InvalidArgument("population_size must be at least 2".into()));
        }
        if !(self.mutation_prob > 0.0 && self.mutation_prob < 1.0) {
            return Err(Error::InvalidArgument("mutation_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EaResult {
    /// Sorted candidate indices.
    pub best: Vec<usize>,
    pub best_loss: f64,
    /// Best loss in the population after initialization and after every step.
    pub trace: Vec<f64>,
}

/// Steady-state search: each step adds one child (mutation with probability
/// `mutation_prob`, otherwise crossover of two distinct parents) and drops
/// the worst member, so the best set is never lost.
pub fn evolve(matrix: &ResponseMatrix, config: &EaConfig) -> Result<EaResult> {
    config.validate()?;
    let c = matrix.n_candidates();
    let k = config.set_size;
    if c < k {
        return Err(Error::InvalidArgument(format!(
            "{c} candidates cannot fill a set of {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let weights = candidate_weights(matrix);
    let mut population: Vec<(Vec<usize>, f64)> = (0..config.population_size)
        .map(|_| {
            let mut set = Vec::with_capacity(k);
            for _ in 0..k {
                let i = weighted_draw(&weights, &set, &mut rng).expect("c >= k");
                set.push(i);
            }
            set.sort_unstable();
            let loss = set_loss(&set, matrix);
            (set, loss)
        })
        .collect();
    let best_of = |pop: &[(Vec<usize>, f64)]| {
        pop.iter()
            .enumerate()
            .fold(0, |b, (i, s)| if s.1 < pop[b].1 { i } else { b })
    };
    let mut trace = Vec::with_capacity(config.steps + 1);
    trace.push(population[best_of(&population)].1);
    for _ in 0..config.steps {
        let n = population.len();
        let child = if rng.random::<f64>() < config.mutation_prob {
            let p = rng.random_range(0..n);
            mutate(&population[p].0, &weights, &mut rng)
        } else {
            let pair = index::sample(&mut rng, n, 2);
            crossover(&population[pair.index(0)].0, &population[pair.index(1)].0, &mut rng)
        };
        let loss = set_loss(&child, matrix);
        population.push((child, loss));
        let worst = population
            .iter()
            .enumerate()
            .fold(0, |w, (i, s)| if s.1 >= population[w].1 { i } else { w });
        population.swap_remove(worst);
        trace.push(population[best_of(&population)].1);
    }
    let (best, best_loss) = population.swap_remove(best_of(&population));
    Ok(EaResult { best, best_loss, trace })
}

/// Initial design as a JSON list of configurations.
pub fn configs_to_json(configs: &[Config]) -> String {
    serde_json::to_string_pretty(configs).expect("configs serialize")
}

pub fn configs_from_json(text: &str) -> Result<Vec<Config>> {
    Ok(serde_json::from_str(text)?)
}
