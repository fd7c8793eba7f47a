//! Few-shot maximization of random sine waves `a sin(x + b)` on `[-5, 5]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::derive_seed;
use super::synthetic::{sine_space, SineTask};
use crate::bo::{fmt17, run_bo_observed, BoConfig, CandidateStrategy, FnObjective, RunHistory, SurrogateMode};
use crate::checkpoint::Checkpoint;
use crate::dkgp::BaseKernelKind;
use crate::error::{Error, Result};
use crate::meta_train::{meta_train, TrainConfig};
use crate::space::{Config, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineDemoConfig {
    pub source_tasks: usize,
    pub targets: usize,
    pub points_per_task: usize,
    /// Random observations before the first BO step.
    pub seed_points: usize,
    /// BO steps after the seed points.
    pub trials: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
}

impl Default for SineDemoConfig {
    fn default() -> Self {
        SineDemoConfig {
            source_tasks: 50,
            targets: 20,
            points_per_task: 50,
            seed_points: 2,
            trials: 5,
            seed: 0,
            train: TrainConfig {
                outer_iterations: 10_000,
                hidden: vec![64, 64],
                kernel: BaseKernelKind::SpectralMixture,
                mixture_components: 4,
                ..TrainConfig::default()
            },
            fine_tune_steps: 100,
            fine_tune_lr: 1e-3,
        }
    }
}

/// Surrogate state when choosing one step, on the candidate grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub trial: usize,
    pub x: Vec<f64>,
    /// Posterior mean of the sine value (not the loss).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub ei: Vec<f64>,
    pub chosen_x: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SineTarget {
    pub task: SineTask,
    pub fsbo: RunHistory,
    pub random: RunHistory,
    pub steps: Vec<StepTrace>,
}

impl SineTarget {
    /// `a - max f` after each evaluation.
    pub fn simple_regret(history: &RunHistory, task: &SineTask) -> Vec<f64> {
        history.trials.iter().map(|t| task.amplitude + t.incumbent).collect()
    }

    pub fn fsbo_regret(&self) -> Vec<f64> {
        Self::simple_regret(&self.fsbo, &self.task)
    }

    pub fn random_regret(&self) -> Vec<f64> {
        Self::simple_regret(&self.random, &self.task)
    }
}

#[derive(Clone, Debug)]
pub struct SineDemo {
    pub sources: Vec<SineTask>,
    pub checkpoint: Checkpoint,
    pub targets: Vec<SineTarget>,
}

fn x_of(c: &Config) -> f64 {
    match c.get("x") {
        Some(Value::Real(x)) => *x,
        _ => f64::NAN,
    }
}

/// Meta-trains on `source_tasks` sine tables and runs few-shot BO and random
/// search on `targets` fresh sine waves from the same random seed points.
pub fn sine_demo(config: &SineDemoConfig) -> Result<SineDemo> {
    if config.source_tasks < 2 {
        return Err(Error::InvalidArgument(
            "the sine demo needs at least 2 source tasks".into(),
        ));
    }
    if config.seed_points == 0 || config.points_per_task < 2 {
        return Err(Error::InvalidArgument(
            "need at least one seed point and two points per task".into(),
        ));
    }
    let space = sine_space();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "sine-sources", &[]));
    let sources: Vec<SineTask> = (0..config.source_tasks).map(|_| SineTask::sample(&mut rng)).collect();
    let tables = sources
        .iter()
        .enumerate()
        .map(|(i, t)| t.table(&format!("sine-{i:03}"), config.points_per_task, &space))
        .collect::<Result<Vec<_>>>()?;
    let train = TrainConfig {
        seed: derive_seed(config.seed, "train", &[]),
        ..config.train.clone()
    };
    let checkpoint = meta_train(&space, &tables, &train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "sine-targets", &[]));
    let tasks: Vec<SineTask> = (0..config.targets).map(|_| SineTask::sample(&mut rng)).collect();
    let targets = tasks
        .par_iter()
        .enumerate()
        .map(|(k, task)| run_target(config, &checkpoint, *task, k as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(SineDemo {
        sources,
        checkpoint,
        targets,
    })
}

fn run_target(config: &SineDemoConfig, checkpoint: &Checkpoint, task: SineTask, k: u64) -> Result<SineTarget> {
    let space = sine_space();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "sine-target-run", &[k]));
    let init: Vec<Config> = (0..config.seed_points)
        .map(|_| space.sample_uniform(&mut rng))
        .collect();
    let objective = FnObjective {
        f: |c: &Config| Ok(task.loss(x_of(c))),
        bounds: Some((-task.amplitude, task.amplitude)),
    };
    let bo = BoConfig {
        budget: config.seed_points + config.trials,
        init_configs: init.clone(),
        fine_tune_steps: config.fine_tune_steps,
        fine_tune_lr: config.fine_tune_lr,
        candidate_strategy: CandidateStrategy::Random { n: 0 },
        seed: rng.random(),
        restart_fine_tune: true,
    };
    let mut steps = Vec::new();
    let fsbo = run_bo_observed(
        &SurrogateMode::FewShot(checkpoint.surrogate.clone()),
        &objective,
        &space,
        None,
        &bo,
        &mut |info| {
            steps.push(StepTrace {
                trial: info.trial,
                x: info.candidates.iter().map(x_of).collect(),
                mean: info.prediction.mean.iter().map(|m| -m).collect(),
                std: info.prediction.std(),
                ei: info.ei.to_vec(),
                chosen_x: x_of(&info.candidates[info.chosen]),
            })
        },
    )?;
    let mut random = RunHistory::new(objective.bounds);
    for c in init {
        let y = task.loss(x_of(&c));
        random.push(c, y);
    }
    for _ in 0..config.trials {
        let c = space.sample_uniform(&mut rng);
        let y = task.loss(x_of(&c));
        random.push(c, y);
    }
    Ok(SineTarget {
        task,
        fsbo,
        random,
        steps,
    })
}

impl SineDemo {
    /// `sources.csv`, `targets.csv` (regret after every evaluation),
    /// `training_loss.csv`, and per target `target_<kk>_steps.csv` and
    /// `target_<kk>_trials.csv`, with `kk` the zero-padded target index.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_at = |name: &str| -> Result<csv::Writer<std::fs::File>> {
            let p = dir.join(name);
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            Ok(csv::Writer::from_writer(f))
        };
        let mut w = csv_at("sources.csv")?;
        w.write_record(["task", "amplitude", "phase"])?;
        for (i, s) in self.sources.iter().enumerate() {
            w.write_record([i.to_string(), fmt17(s.amplitude), fmt17(s.phase)])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv_at("training_loss.csv")?;
        w.write_record(["iteration", "batch_nll"])?;
        for (i, v) in self.checkpoint.loss_trace.iter().enumerate() {
            w.write_record([(i + 1).to_string(), fmt17(*v)])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        let mut w = csv_at("targets.csv")?;
        w.write_record([
            "target",
            "amplitude",
            "phase",
            "method",
            "evaluation",
            "x",
            "value",
            "simple_regret",
        ])?;
        for (k, t) in self.targets.iter().enumerate() {
            for (method, h) in [("fsbo", &t.fsbo), ("random", &t.random)] {
                let regret = SineTarget::simple_regret(h, &t.task);
                for (i, trial) in h.trials.iter().enumerate() {
                    w.write_record([
                        k.to_string(),
                        fmt17(t.task.amplitude),
                        fmt17(t.task.phase),
                        method.to_string(),
                        (i + 1).to_string(),
                        fmt17(x_of(&trial.config)),
                        fmt17(-trial.objective),
                        fmt17(regret[i]),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(dir, e))?;

        for (k, t) in self.targets.iter().enumerate() {
            let mut w = csv_at(&format!("target_{k:02}_steps.csv"))?;
            w.write_record(["trial", "x", "true_value", "mean", "std", "ei", "chosen"])?;
            for s in &t.steps {
                for i in 0..s.x.len() {
                    w.write_record([
                        s.trial.to_string(),
                        fmt17(s.x[i]),
                        fmt17(t.task.value(s.x[i])),
                        fmt17(s.mean[i]),
                        fmt17(s.std[i]),
                        fmt17(s.ei[i]),
                        u8::from(s.x[i] == s.chosen_x).to_string(),
                    ])?;
                }
            }
            w.flush().map_err(|e| Error::io(dir, e))?;
            let p = dir.join(format!("target_{k:02}_trials.csv"));
            let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            t.fsbo.write_csv(std::io::BufWriter::new(f))?;
        }
        let p = dir.join("checkpoint.json");
        self.checkpoint.save(&p)?;
        Ok(())
    }
}
