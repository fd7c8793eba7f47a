use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::json;

use fsbo::harness::stats::derive_seed;
use fsbo::harness::{run_benchmark, run_method, sine_demo, BenchmarkSpec, Method, MethodSettings, SineDemoConfig};
use fsbo::meta_train::{meta_train, TrainConfig};
use fsbo::metadata::{load_manifest, load_metadata, MetaDataset, Task};
use fsbo::space::SearchSpace;
use fsbo::warmstart::{
    candidates_from_tasks, configs_from_json, configs_to_json, evolve, EaConfig, ImputeConfig, ResponseMatrix,
};
use fsbo::{Checkpoint, Error, Result};

#[derive(Parser)]
#[command(
    name = "fsbo",
    version,
    about = "Few-shot Bayesian optimization with meta-trained deep kernels"
)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the deep-kernel surrogate on every task of a dataset.
    MetaTrain(MetaTrainArgs),
    /// Choose warm-start configurations on source tasks.
    Warmstart(WarmstartArgs),
    /// Optimize one task of a dataset with one method.
    Run(RunArgs),
    /// Leave-one-task-out benchmark described by a JSON spec.
    Benchmark(BenchmarkArgs),
    /// Few-shot optimization of random sine waves.
    SineDemo(SineArgs),
    /// Print a summary of a checkpoint file.
    InspectCkpt(InspectArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Manifest file, a directory holding `dataset.json`, or a directory of
    /// task CSVs when `--space` is given.
    #[arg(long)]
    dataset: PathBuf,
    /// Search-space JSON file or builtin name (glmnet, svm, adaboost).
    #[arg(long)]
    space: Option<String>,
}

impl DatasetArgs {
    fn load(&self) -> Result<MetaDataset> {
        match &self.space {
            None => Ok(load_manifest(&self.dataset)?.dataset),
            Some(s) => {
                let space = if Path::new(s).exists() {
                    SearchSpace::load(s)?
                } else {
                    SearchSpace::builtin(s)?
                };
                load_metadata(&self.dataset, &space)
            }
        }
    }
}

#[derive(Args)]
struct MetaTrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Leave this task out of training.
    #[arg(long)]
    exclude: Vec<String>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WarmstartArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Checkpoint used to impute missing responses.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evolutionary search configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target task, excluded from the sources.
    #[arg(long)]
    exclude: Vec<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file of the chosen configurations.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Task to optimize.
    #[arg(long)]
    target: String,
    /// random, gp-lhs, gp-ws or fsbo.
    #[arg(long)]
    method: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Warm-start configurations written by `warmstart`.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Run settings JSON (budget, lhs_size, fine_tune_steps, fine_tune_lr).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `trials.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Benchmark spec JSON.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the spec's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint cache directory (default `<out>/checkpoints`).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SineArgs {
    /// Demo configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of source tasks.
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    targets: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "sine-demo")]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn parse_method(name: &str) -> Result<Method> {
    serde_json::from_value(json!(name)).map_err(|_| {
        Error::InvalidArgument(format!(
            "unknown method `{name}`; expected random, gp-lhs, gp-ws or fsbo"
        ))
    })
}

fn without(dataset: &MetaDataset, exclude: &[String]) -> Result<Vec<Task>> {
    for id in exclude {
        if dataset.task(id).is_none() {
            return Err(Error::InvalidArgument(format!("unknown task `{id}`")));
        }
    }
    let tasks: Vec<Task> = dataset
        .tasks()
        .iter()
        .filter(|t| !exclude.iter().any(|e| e == t.id()))
        .cloned()
        .collect();
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks left after exclusions".into()));
    }
    Ok(tasks)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn print(value: serde_json::Value) {
    use std::io::Write;
    // a closed stdout (e.g. piped into `head`) is not an error of the command
    let _ = writeln!(
        std::io::stdout(),
        "{}",
        serde_json::to_string_pretty(&value).expect("json")
    );
}

fn cmd_meta_train(a: &MetaTrainArgs) -> Result<()> {
    let dataset = a.data.load()?;
    let mut cfg: TrainConfig = config_or_default(a.config.as_ref())?;
    if let Some(n) = a.iters {
        cfg.outer_iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let tasks = without(&dataset, &a.exclude)?;
    let ck = meta_train(dataset.space(), &tasks, &cfg)?;
    create_parent(&a.out)?;
    ck.save(&a.out)?;
    print(json!({
        "checkpoint": a.out,
        "tasks": tasks.len(),
        "iterations": cfg.outer_iterations,
        "skipped_steps": ck.skipped_steps,
        "final_loss": ck.loss_trace.last(),
    }));
    Ok(())
}

fn cmd_warmstart(a: &WarmstartArgs) -> Result<()> {
    let dataset = a.data.load()?;
    let space = dataset.space();
    let ck = Checkpoint::load_for(&a.checkpoint, space)?;
    let mut ea: EaConfig = config_or_default(a.config.as_ref())?;
    if let Some(v) = a.size {
        ea.set_size = v;
    }
    if let Some(v) = a.steps {
        ea.steps = v;
    }
    if let Some(v) = a.seed {
        ea.seed = v;
    }
    let sources = without(&dataset, &a.exclude)?;
    let matrix = ResponseMatrix::build(
        &ck.surrogate,
        space,
        &sources,
        candidates_from_tasks(&sources),
        &ImputeConfig {
            seed: derive_seed(ea.seed, "impute", &[]),
            ..ImputeConfig::default()
        },
    )?;
    let result = evolve(&matrix, &ea)?;
    let configs: Vec<_> = result.best.iter().map(|&i| matrix.candidates[i].clone()).collect();
    create_parent(&a.out)?;
    std::fs::write(&a.out, configs_to_json(&configs) + "\n").map_err(|e| Error::io(&a.out, e))?;
    print(json!({ "warm_start": a.out, "loss": result.best_loss, "candidates": matrix.n_candidates() }));
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let dataset = a.data.load()?;
    let task = dataset
        .task(&a.target)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{}`", a.target)))?;
    let method = parse_method(&a.method)?;
    let mut settings = match &a.config {
        Some(p) => {
            let v: serde_json::Value = read_json(p)?;
            let d = MethodSettings::default();
            let get = |k: &str| v.get(k).cloned();
            MethodSettings {
                budget: get("budget").and_then(|x| x.as_u64()).map_or(d.budget, |x| x as usize),
                lhs_size: get("lhs_size")
                    .and_then(|x| x.as_u64())
                    .map_or(d.lhs_size, |x| x as usize),
                fine_tune_steps: get("fine_tune_steps")
                    .and_then(|x| x.as_u64())
                    .map_or(d.fine_tune_steps, |x| x as usize),
                fine_tune_lr: get("fine_tune_lr").and_then(|x| x.as_f64()).unwrap_or(d.fine_tune_lr),
            }
        }
        None => MethodSettings::default(),
    };
    if let Some(b) = a.budget {
        settings.budget = b;
    }
    let checkpoint = a
        .checkpoint
        .as_ref()
        .map(|p| Checkpoint::load_for(p, dataset.space()))
        .transpose()?;
    let warm = a
        .warm_start
        .as_ref()
        .map(|p| -> Result<_> {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            configs_from_json(&text)
        })
        .transpose()?;
    let history = run_method(
        method,
        dataset.space(),
        task,
        checkpoint.as_ref(),
        warm.as_deref(),
        &settings,
        a.seed,
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    history.save_csv(a.out.join("trials.csv"))?;
    print(json!({
        "trials": history.len(),
        "incumbent": history.incumbent(),
        "normalized_regret": history.normalized_regret(history.len()),
        "stop": format!("{:?}", history.stop),
    }));
    Ok(())
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let mut spec = BenchmarkSpec::load(&a.config)?;
    if let Some(s) = a.seed {
        spec.base_seed = s;
    }
    spec.validate()?;
    let loaded = spec.load_dataset()?;
    let cache = a.cache.clone().unwrap_or_else(|| a.out.join("checkpoints"));
    let report = run_benchmark(&spec, &loaded, Some(&cache))?;
    report.save(&a.out)?;
    report.save_metadata(&spec, a.out.join("benchmark.json"))?;
    let summary: Vec<_> = report
        .summary
        .iter()
        .map(|s| json!({ "method": s.method, "trial": s.trial, "mean_regret": s.mean_regret, "n": s.n, "failures": s.failures }))
        .collect();
    print(json!({ "out": a.out, "summary": summary }));
    Ok(())
}

fn cmd_sine(a: &SineArgs) -> Result<()> {
    let mut cfg: SineDemoConfig = config_or_default(a.config.as_ref())?;
    if let Some(v) = a.tasks {
        cfg.source_tasks = v;
    }
    if let Some(v) = a.targets {
        cfg.targets = v;
    }
    if let Some(v) = a.iters {
        cfg.train.outer_iterations = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let demo = sine_demo(&cfg)?;
    demo.save(&a.out)?;
    let threshold = 0.05;
    let last = cfg.seed_points + cfg.trials;
    let hits = demo
        .targets
        .iter()
        .filter(|t| {
            t.fsbo_regret()
                .get(last - 1)
                .is_some_and(|r| *r < threshold * t.task.amplitude)
        })
        .count();
    print(json!({ "out": a.out, "targets": demo.targets.len(), "solved": hits, "evaluations": last }));
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let arch = ck.arch();
    print(json!({
        "space_fingerprint": ck.space_fingerprint,
        "dataset_fingerprint": ck.dataset_fingerprint,
        "input_dim": arch.input_dim,
        "hidden": arch.hidden,
        "kernel": ck.config.kernel,
        "parameters": ck.surrogate.n_params(),
        "train_config": ck.config,
        "iterations_logged": ck.loss_trace.len(),
        "final_loss": ck.loss_trace.last(),
        "skipped_steps": ck.skipped_steps,
        "signal_variance": ck.surrogate.kernel.signal_variance(),
        "noise_variance": ck.surrogate.kernel.noise_variance(),
    }));
    Ok(())
}

fn error_json(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::MetaTrain(a) => cmd_meta_train(a),
        Command::Warmstart(a) => cmd_warmstart(a),
        Command::Run(a) => cmd_run(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::SineDemo(a) => cmd_sine(a),
        Command::InspectCkpt(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
