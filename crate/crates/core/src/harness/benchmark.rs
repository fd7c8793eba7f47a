//! Leave-one-task-out benchmark of random search, the vanilla GP with a
//! Latin hypercube or warm-start design, and the meta-trained surrogate.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stats::{derive_seed, mean, sample_std};
use super::synthetic::QuadraticFamily;
use crate::baselines::random_search_table;
use crate::bo::{fmt17, run_bo, BoConfig, CandidateStrategy, RunHistory, StopReason, SurrogateMode};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::meta_train::{meta_train, TrainConfig};
use crate::metadata::{load_manifest, tasks_fingerprint, LoadedDataset, LotoSplit, MetaDataset, TabularOracle, Task};
use crate::space::{Config, SearchSpace};
use crate::warmstart::{candidates_from_tasks, evolve, EaConfig, ImputeConfig, ResponseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    GpLhs,
    GpWs,
    Fsbo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::GpLhs => "gp-lhs",
            Method::GpWs => "gp-ws",
            Method::Fsbo => "fsbo",
        }
    }

    fn needs_warm_start(self) -> bool {
        matches!(self, Method::GpWs | Method::Fsbo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the task tables come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    /// Manifest file or directory, relative to the spec file.
    Path(PathBuf),
    Synthetic {
        synthetic: QuadraticFamily,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub dataset: DatasetSource,
    pub methods: Vec<Method>,
    pub repeats: usize,
    pub budget: usize,
    pub report_trials: Vec<usize>,
    pub base_seed: u64,
    pub lhs_size: usize,
    pub train: TrainConfig,
    /// `set_size` is the warm-start length of both warm-started methods.
    pub warm_start: EaConfig,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            dataset: DatasetSource::Synthetic {
                synthetic: QuadraticFamily::default(),
            },
            methods: vec![Method::Random, Method::GpLhs, Method::GpWs, Method::Fsbo],
            repeats: 10,
            budget: 100,
            report_trials: vec![15, 33, 50, 67, 100],
            base_seed: 0,
            lhs_size: 10,
            train: TrainConfig::default(),
            warm_start: EaConfig::default(),
            fine_tune_steps: 100,
            fine_tune_lr: 1e-3,
        }
    }
}

impl BenchmarkSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: BenchmarkSpec = serde_json::from_str(&text)?;
        if let DatasetSource::Path(p) = &mut spec.dataset {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.methods.is_empty() {
            problems.push("no methods".to_string());
        }
        if self.repeats == 0 {
            problems.push("repeats must be at least 1".into());
        }
        if self.report_trials.is_empty() || self.report_trials.iter().any(|&t| t == 0 || t > self.budget) {
            problems.push(format!("report_trials must lie in 1..={}", self.budget));
        }
        if self.lhs_size == 0 || self.lhs_size > self.budget {
            problems.push("lhs_size must lie in 1..=budget".into());
        }
        if self.warm_start.set_size > self.budget {
            problems.push("warm-start length exceeds the budget".into());
        }
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.warm_start.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    pub fn load_dataset(&self) -> Result<LoadedDataset> {
        match &self.dataset {
            DatasetSource::Path(p) => load_manifest(p),
            DatasetSource::Synthetic { synthetic } => Ok(LoadedDataset {
                dataset: synthetic.generate()?,
                fixed_split: None,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub task_id: String,
    pub repeat: usize,
    pub history: Option<RunHistory>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub task_id: String,
    pub repeat: usize,
    pub trial: usize,
    pub regret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub trial: usize,
    pub mean_regret: f64,
    pub std_regret: f64,
    pub n: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretReport {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
    /// Per split: target task id and the checkpoint's dataset fingerprint.
    pub checkpoints: Vec<(String, String)>,
}

impl RegretReport {
    pub fn mean_regret(&self, method: Method, trial: usize) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.trial == trial)
            .map(|s| s.mean_regret)
    }

    /// Runs whose regret curve leaves `[0, 1]` or ever increases.
    pub fn regret_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.runs {
            let Some(curve) = r.history.as_ref().and_then(RunHistory::regret_curve) else {
                continue;
            };
            let label = format!("{} {} #{}", r.method, r.task_id, r.repeat);
            if let Some(v) = curve.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                out.push(format!("{label}: regret {v} outside [0, 1]"));
            }
            if curve.windows(2).any(|w| w[1] > w[0]) {
                out.push(format!("{label}: regret increases"));
            }
        }
        out
    }

    pub fn write_report_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "task_id", "repeat", "trial", "regret"])?;
        for r in &self.rows {
            w.write_record([
                r.method.name().to_string(),
                r.task_id.clone(),
                r.repeat.to_string(),
                r.trial.to_string(),
                fmt17(r.regret),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "trial", "mean_regret", "std_regret", "n", "failures"])?;
        for s in &self.summary {
            w.write_record([
                s.method.name().to_string(),
                s.trial.to_string(),
                fmt17(s.mean_regret),
                fmt17(s.std_regret),
                s.n.to_string(),
                s.failures.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `report.csv`, `summary.csv` and `runs/<method>_<task>_<repeat>.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let runs = dir.join("runs");
        std::fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
        let create = |p: PathBuf| {
            std::fs::File::create(&p)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(&p, e))
        };
        self.write_report_csv(create(dir.join("report.csv"))?)?;
        self.write_summary_csv(create(dir.join("summary.csv"))?)?;
        for r in &self.runs {
            if let Some(h) = &r.history {
                h.save_csv(runs.join(format!("{}_{}_{}.csv", r.method, r.task_id, r.repeat)))?;
            }
        }
        Ok(())
    }
}

impl RegretReport {
    /// `benchmark.json`: the resolved spec, how meta-training was shared and
    /// the per-split checkpoint fingerprints.
    pub fn save_metadata(&self, spec: &BenchmarkSpec, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let splits: Vec<serde_json::Value> = self
            .checkpoints
            .iter()
            .map(|(task, fp)| serde_json::json!({ "target": task, "dataset_fingerprint": fp }))
            .collect();
        let failures: Vec<serde_json::Value> = self
            .runs
            .iter()
            .filter_map(|r| {
                r.error.as_ref().map(
                    |e| serde_json::json!({ "method": r.method, "task_id": r.task_id, "repeat": r.repeat, "error": e }),
                )
            })
            .collect();
        let meta = serde_json::json!({
            "spec": spec,
            "meta_training": "once per split; the checkpoint is shared by all repeats of that split",
            "seeding": "sha256(base_seed, tag, indices), first 8 bytes little endian",
            "splits": splits,
            "failures": failures,
        });
        std::fs::write(path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Row indices nearest (Euclidean, in encoded space) to each configuration,
/// skipping rows already taken so the result has no repeats.
pub fn snap_to_rows(space: &SearchSpace, task: &Task, configs: &[Config]) -> Result<Vec<usize>> {
    let mut taken: Vec<usize> = Vec::with_capacity(configs.len());
    for c in configs {
        let x = space.encode(c)?;
        let best = task
            .encoded()
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken.contains(i))
            .map(|(i, e)| (i, e.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = best {
            taken.push(i);
        }
    }
    Ok(taken)
}

fn rows_to_configs(task: &Task, rows: &[usize]) -> Vec<Config> {
    rows.iter().map(|&i| task.records()[i].config.clone()).collect()
}

/// Meta-trained surrogate for one split, reusing `cache_dir` when it holds
/// a checkpoint for the same sources and training configuration.
pub fn split_checkpoint(
    space: &SearchSpace,
    sources: &[Task],
    train: &TrainConfig,
    cache_dir: Option<&Path>,
) -> Result<Checkpoint> {
    let key = {
        let mut h = Sha256::new();
        h.update(tasks_fingerprint(space, sources).as_bytes());
        h.update(serde_json::to_string(train)?.as_bytes());
        hex::encode(h.finalize())
    };
    let cached = cache_dir.map(|d| d.join(format!("ckpt-{}.json", &key[..16])));
    if let Some(p) = &cached {
        if p.exists() {
            match Checkpoint::load_for(p, space) {
                Ok(ck) if ck.config == *train => return Ok(ck),
                Ok(_) => log::warn!("{}: cached checkpoint has a different configuration", p.display()),
                Err(e) => log::warn!("{}: ignoring unreadable cached checkpoint: {e}", p.display()),
            }
        }
    }
    let ck = meta_train(space, sources, train)?;
    if let Some(p) = &cached {
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        ck.save(p)?;
    }
    Ok(ck)
}

struct SplitContext {
    target: usize,
    checkpoint: Option<Checkpoint>,
    matrix: Option<ResponseMatrix>,
}

/// Runs every (split, method, repeat) cell. Meta-training happens once per
/// split and is shared by its repeats; repeats differ in their design and
/// optimizer seeds. Seeds are derived from `base_seed` with
/// [`derive_seed`]: `("train", [split])`, `("ea", [split, repeat])`,
/// `("impute", [split])` and `("cell", [split, method, repeat])`.
pub fn run_benchmark(spec: &BenchmarkSpec, loaded: &LoadedDataset, cache_dir: Option<&Path>) -> Result<RegretReport> {
    spec.validate()?;
    let dataset = &loaded.dataset;
    let space = dataset.space();
    let splits = loaded.splits()?;
    let needs_ws = spec.methods.iter().any(|m| m.needs_warm_start());
    let needs_ckpt = needs_ws;

    let contexts: Vec<SplitContext> = splits
        .iter()
        .enumerate()
        .map(|(s, split)| -> Result<SplitContext> {
            let sources = split.source_tasks(dataset);
            let checkpoint = if needs_ckpt {
                let train = TrainConfig {
                    seed: derive_seed(spec.base_seed, "train", &[s as u64]),
                    ..spec.train.clone()
                };
                log::info!(
                    "split {}: meta-training on {} tasks",
                    split.target(dataset).id(),
                    sources.len()
                );
                Some(split_checkpoint(space, &sources, &train, cache_dir)?)
            } else {
                None
            };
            let matrix = match (&checkpoint, needs_ws) {
                (Some(ck), true) => Some(ResponseMatrix::build(
                    &ck.surrogate,
                    space,
                    &sources,
                    candidates_from_tasks(&sources),
                    &ImputeConfig {
                        fine_tune_steps: spec.fine_tune_steps,
                        fine_tune_lr: spec.fine_tune_lr,
                        seed: derive_seed(spec.base_seed, "impute", &[s as u64]),
                    },
                )?),
                _ => None,
            };
            Ok(SplitContext {
                target: split.target_index,
                checkpoint,
                matrix,
            })
        })
        .collect::<Result<_>>()?;

    // warm starts per (split, repeat), shared by both warm-started methods
    let warm_starts: Vec<Vec<Option<Vec<Config>>>> = contexts
        .iter()
        .enumerate()
        .map(|(s, ctx)| {
            (0..spec.repeats)
                .map(|r| {
                    let m = ctx.matrix.as_ref()?;
                    let ea = EaConfig {
                        seed: derive_seed(spec.base_seed, "ea", &[s as u64, r as u64]),
                        ..spec.warm_start.clone()
                    };
                    let res = evolve(m, &ea).ok()?;
                    Some(res.best.iter().map(|&i| m.candidates[i].clone()).collect())
                })
                .collect()
        })
        .collect();

    let cells: Vec<(usize, usize, usize)> = (0..splits.len())
        .flat_map(|s| (0..spec.methods.len()).flat_map(move |m| (0..spec.repeats).map(move |r| (s, m, r))))
        .collect();
    let runs: Vec<RunRecord> = cells
        .par_iter()
        .map(|&(s, m, r)| {
            let method = spec.methods[m];
            let ctx = &contexts[s];
            let task = &dataset.tasks()[ctx.target];
            let seed = derive_seed(spec.base_seed, "cell", &[s as u64, m as u64, r as u64]);
            let outcome = run_cell(
                spec,
                dataset,
                &splits[s],
                ctx,
                warm_starts[s][r].as_deref(),
                method,
                seed,
            );
            let (history, error) = match outcome {
                Ok(h) => match &h.stop {
                    StopReason::Failed(e) => {
                        let e = e.clone();
                        (Some(h), Some(e))
                    }
                    _ => (Some(h), None),
                },
                Err(e) => (None, Some(e.to_string())),
            };
            if let Some(e) = &error {
                log::warn!("{} on {} repeat {}: {e}", method, task.id(), r);
            }
            RunRecord {
                method,
                task_id: task.id().to_string(),
                repeat: r,
                history,
                error,
            }
        })
        .collect();

    let mut rows = Vec::new();
    for run in &runs {
        if run.error.is_some() {
            continue;
        }
        let Some(h) = &run.history else { continue };
        for &trial in &spec.report_trials {
            match h.normalized_regret(trial) {
                Some(regret) => rows.push(ReportRow {
                    method: run.method,
                    task_id: run.task_id.clone(),
                    repeat: run.repeat,
                    trial,
                    regret,
                }),
                None => log::warn!("task {} is degenerate; excluded from the report", run.task_id),
            }
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &ReportRow| spec.methods.iter().position(|&m| m == r.method);
        key(a)
            .cmp(&key(b))
            .then_with(|| a.task_id.cmp(&b.task_id))
            .then(a.repeat.cmp(&b.repeat))
            .then(a.trial.cmp(&b.trial))
    });
    let mut summary = Vec::new();
    for &method in &spec.methods {
        let failures = runs.iter().filter(|r| r.method == method && r.error.is_some()).count();
        for &trial in &spec.report_trials {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method && r.trial == trial)
                .map(|r| r.regret)
                .collect();
            summary.push(SummaryRow {
                method,
                trial,
                mean_regret: if v.is_empty() { f64::NAN } else { mean(&v) },
                std_regret: sample_std(&v),
                n: v.len(),
                failures,
            });
        }
    }
    let checkpoints = contexts
        .iter()
        .filter_map(|c| {
            c.checkpoint.as_ref().map(|ck| {
                (
                    dataset.tasks()[c.target].id().to_string(),
                    ck.dataset_fingerprint.clone(),
                )
            })
        })
        .collect();
    let report = RegretReport {
        rows,
        summary,
        runs,
        checkpoints,
    };
    for v in report.regret_violations() {
        log::error!("{v}");
    }
    Ok(report)
}

fn run_cell(
    spec: &BenchmarkSpec,
    dataset: &MetaDataset,
    split: &LotoSplit,
    ctx: &SplitContext,
    warm_start: Option<&[Config]>,
    method: Method,
    seed: u64,
) -> Result<RunHistory> {
    let settings = MethodSettings {
        budget: spec.budget,
        lhs_size: spec.lhs_size,
        fine_tune_steps: spec.fine_tune_steps,
        fine_tune_lr: spec.fine_tune_lr,
    };
    run_method(
        method,
        dataset.space(),
        split.target(dataset),
        ctx.checkpoint.as_ref(),
        warm_start,
        &settings,
        seed,
    )
}

/// Budget and surrogate settings of a single optimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodSettings {
    pub budget: usize,
    pub lhs_size: usize,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            budget: 100,
            lhs_size: 10,
            fine_tune_steps: 100,
            fine_tune_lr: 1e-3,
        }
    }
}

/// One run of `method` on the table of `task`. Initial designs are snapped
/// to the nearest unused table rows. `gp-ws` and `fsbo` need `warm_start`;
/// `fsbo` also needs `checkpoint`.
pub fn run_method(
    method: Method,
    space: &SearchSpace,
    task: &Task,
    checkpoint: Option<&Checkpoint>,
    warm_start: Option<&[Config]>,
    settings: &MethodSettings,
    seed: u64,
) -> Result<RunHistory> {
    let oracle = TabularOracle::new(space, task);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bo = |init: Vec<Config>| BoConfig {
        budget: settings.budget,
        init_configs: init,
        fine_tune_steps: settings.fine_tune_steps,
        fine_tune_lr: settings.fine_tune_lr,
        candidate_strategy: CandidateStrategy::Table,
        seed,
        restart_fine_tune: true,
    };
    let warm = || -> Result<Vec<Config>> {
        let ws = warm_start.ok_or_else(|| Error::InvalidArgument("warm start unavailable".into()))?;
        Ok(rows_to_configs(task, &snap_to_rows(space, task, ws)?))
    };
    match method {
        Method::Random => random_search_table(&oracle, task, settings.budget, &mut rng),
        Method::GpLhs => {
            let design = space.lhs_sample(settings.lhs_size, &mut rng);
            let init = rows_to_configs(task, &snap_to_rows(space, task, &design)?);
            run_bo(&SurrogateMode::VanillaGp, &oracle, space, Some(task), &bo(init))
        }
        Method::GpWs => run_bo(&SurrogateMode::VanillaGp, &oracle, space, Some(task), &bo(warm()?)),
        Method::Fsbo => {
            let ck = checkpoint.ok_or_else(|| Error::InvalidArgument("checkpoint unavailable".into()))?;
            ck.check_space(space)?;
            run_bo(
                &SurrogateMode::FewShot(ck.surrogate.clone()),
                &oracle,
                space,
                Some(task),
                &bo(warm()?),
            )
        }
    }
}
