//! Task tables: loading, the tabular black-box oracle, response normalization
//! and leave-one-task-out splits.
//!
//! All objectives are losses (lower is better). Sources that report accuracy
//! must be stored as `1 - accuracy`.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::space::{Config, ParamKind, SearchSpace, Value};

/// Per-dimension tolerance when matching a query against table rows.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

pub const OBJECTIVE_COLUMN: &str = "objective";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub config: Config,
    pub y: f64,
}

#[derive(Clone, Debug)]
pub struct Task {
    id: String,
    records: Vec<Record>,
    encoded: Vec<Vec<f64>>,
    f_min: f64,
    f_max: f64,
}

impl Task {
    pub fn new(id: impl Into<String>, records: Vec<Record>, space: &SearchSpace) -> Result<Self> {
        let id = id.into();
        if records.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "task `{id}` needs at least 2 records, has {}",
                records.len()
            )));
        }
        let mut encoded = Vec::with_capacity(records.len());
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !r.y.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "task `{id}` record {i}: non-finite objective"
                )));
            }
            let e = space.encode(&r.config)?;
            let key: Vec<u64> = e.iter().map(|x| x.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::InvalidArgument(format!(
                    "task `{id}` record {i}: duplicate config"
                )));
            }
            encoded.push(e);
        }
        let f_min = records.iter().map(|r| r.y).fold(f64::INFINITY, f64::min);
        let f_max = records.iter().map(|r| r.y).fold(f64::NEG_INFINITY, f64::max);
        Ok(Task {
            id,
            records,
            encoded,
            f_min,
            f_max,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Encoded configurations, row-aligned with [`records`](Self::records).
    pub fn encoded(&self) -> &[Vec<f64>] {
        &self.encoded
    }

    pub fn ys(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }

    /// Row whose encoding matches `x` within [`ORACLE_TOLERANCE`] per dimension.
    pub fn find_row(&self, x: &[f64]) -> Option<usize> {
        self.encoded
            .iter()
            .position(|e| e.len() == x.len() && e.iter().zip(x).all(|(a, b)| (a - b).abs() <= ORACLE_TOLERANCE))
    }

    /// Recorded response for `config`; off-grid queries are errors.
    pub fn lookup(&self, space: &SearchSpace, config: &Config) -> Result<f64> {
        let x = space.encode(config)?;
        self.find_row(&x)
            .map(|i| self.records[i].y)
            .ok_or_else(|| Error::OffGrid { task: self.id.clone() })
    }

    /// `(y - f_min) / (f_max - f_min)`.
    pub fn normalize_response(&self, y: f64) -> Result<f64> {
        if self.f_max <= self.f_min {
            return Err(Error::DegenerateTask(self.id.clone()));
        }
        Ok((y - self.f_min) / (self.f_max - self.f_min))
    }
}

/// Replays the recorded response function of one task.
#[derive(Clone, Copy, Debug)]
pub struct TabularOracle<'a> {
    pub space: &'a SearchSpace,
    pub task: &'a Task,
}

impl<'a> TabularOracle<'a> {
    pub fn new(space: &'a SearchSpace, task: &'a Task) -> Self {
        TabularOracle { space, task }
    }

    pub fn evaluate(&self, config: &Config) -> Result<f64> {
        self.task.lookup(self.space, config)
    }
}

#[derive(Clone, Debug)]
pub struct MetaDataset {
    space: SearchSpace,
    tasks: Vec<Task>,
    y_min: f64,
    y_max: f64,
}

impl MetaDataset {
    /// Tasks are reordered lexicographically by id.
    pub fn new(space: SearchSpace, mut tasks: Vec<Task>) -> Result<Self> {
        if tasks.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a meta-dataset needs at least 2 tasks, got {}",
                tasks.len()
            )));
        }
        tasks.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = tasks.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidArgument(format!("duplicate task id `{}`", w[0].id)));
        }
        let (y_min, y_max) = label_bounds(&tasks);
        if y_min >= y_max {
            return Err(Error::InvalidArgument("all objectives are equal".into()));
        }
        Ok(MetaDataset {
            space,
            tasks,
            y_min,
            y_max,
        })
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn total_records(&self) -> usize {
        self.tasks.iter().map(Task::len).sum()
    }

    /// Hex SHA-256 over the space fingerprint and the canonical CSV of every task.
    pub fn fingerprint(&self) -> String {
        tasks_fingerprint(&self.space, &self.tasks)
    }
}

/// Content hash of a task collection, see [`MetaDataset::fingerprint`].
pub fn tasks_fingerprint(space: &SearchSpace, tasks: &[Task]) -> String {
    let mut h = Sha256::new();
    h.update(space.fingerprint().as_bytes());
    for t in tasks {
        h.update(t.id.as_bytes());
        h.update([0u8]);
        let mut buf = Vec::new();
        write_task_csv(t, space, &mut buf).expect("in-memory write");
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

/// Global `(min, max)` objective over a set of tasks.
pub fn label_bounds(tasks: &[Task]) -> (f64, f64) {
    tasks.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t.f_min), hi.max(t.f_max))
    })
}

/// One target task and the remaining tasks as sources, by index into
/// [`MetaDataset::tasks`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LotoSplit {
    pub source_indices: Vec<usize>,
    pub target_index: usize,
}

impl LotoSplit {
    pub fn sources<'a>(&self, dataset: &'a MetaDataset) -> Vec<&'a Task> {
        self.source_indices.iter().map(|&i| &dataset.tasks[i]).collect()
    }

    pub fn source_tasks(&self, dataset: &MetaDataset) -> Vec<Task> {
        self.source_indices.iter().map(|&i| dataset.tasks[i].clone()).collect()
    }

    pub fn target<'a>(&self, dataset: &'a MetaDataset) -> &'a Task {
        &dataset.tasks[self.target_index]
    }
}

/// Leave-one-task-out: every task is the target exactly once.
pub fn loto_splits(dataset: &MetaDataset) -> Vec<LotoSplit> {
    let t = dataset.tasks.len();
    (0..t)
        .map(|target| LotoSplit {
            source_indices: (0..t).filter(|&i| i != target).collect(),
            target_index: target,
        })
        .collect()
}

/// Fixed protocol: each listed test task is a target; sources are always the
/// complement of the whole test set.
pub fn fixed_splits(dataset: &MetaDataset, test_ids: &[String]) -> Result<Vec<LotoSplit>> {
    let mut test = Vec::new();
    for id in test_ids {
        let i = dataset
            .tasks
            .iter()
            .position(|t| &t.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("fixed split names unknown task `{id}`")))?;
        if !test.contains(&i) {
            test.push(i);
        }
    }
    let sources: Vec<usize> = (0..dataset.tasks.len()).filter(|i| !test.contains(i)).collect();
    if sources.is_empty() {
        return Err(Error::InvalidArgument("fixed split leaves no source tasks".into()));
    }
    Ok(test
        .into_iter()
        .map(|target_index| LotoSplit {
            source_indices: sources.clone(),
            target_index,
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedSplit {
    pub test: Vec<String>,
}

/// `dataset.json`: paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub space: PathBuf,
    pub tasks: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_split: Option<FixedSplit>,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dataset: MetaDataset,
    pub fixed_split: Option<FixedSplit>,
}

impl LoadedDataset {
    pub fn splits(&self) -> Result<Vec<LotoSplit>> {
        match &self.fixed_split {
            Some(f) => fixed_splits(&self.dataset, &f.test),
            None => Ok(loto_splits(&self.dataset)),
        }
    }
}

/// Load a dataset from a manifest file, or from a directory containing
/// `dataset.json`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path.push("dataset.json");
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let space = SearchSpace::load(base.join(&manifest.space))?;
    let tasks = manifest
        .tasks
        .iter()
        .map(|p| load_task_csv(base.join(p), &space))
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        dataset: MetaDataset::new(space, tasks)?,
        fixed_split: manifest.fixed_split,
    })
}

/// Load every `*.csv` file of `dir` as a task of `space`.
pub fn load_metadata(dir: impl AsRef<Path>, space: &SearchSpace) -> Result<MetaDataset> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let tasks = files
        .iter()
        .map(|p| load_task_csv(p, space))
        .collect::<Result<Vec<_>>>()?;
    MetaDataset::new(space.clone(), tasks)
}

/// Parse `<task_id>.csv`: header is the parameter names in space order
/// followed by `objective`.
pub fn load_task_csv(path: impl AsRef<Path>, space: &SearchSpace) -> Result<Task> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad task file name {}", path.display())))?
        .to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let load_err = |line: usize, message: String| Error::Load {
        file: path.to_path_buf(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let expected: Vec<&str> = space
        .params()
        .iter()
        .map(|p| p.name.as_str())
        .chain(std::iter::once(OBJECTIVE_COLUMN))
        .collect();
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        if let Some(unknown) = got.iter().find(|c| !expected.contains(c)) {
            return Err(load_err(1, format!("unknown column `{unknown}`")));
        }
        return Err(load_err(1, format!("header must be `{}`", expected.join(","))));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            load_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let mut config = Config::new();
        for (p, cell) in space.params().iter().zip(row.iter()) {
            if cell.is_empty() {
                continue;
            }
            let v = match p.kind {
                ParamKind::Continuous { .. } => Value::Real(
                    cell.parse::<f64>()
                        .map_err(|_| load_err(line, format!("`{}`: `{cell}` is not a number", p.name)))?,
                ),
                ParamKind::Categorical { .. } => Value::Choice(cell.to_string()),
            };
            config.insert(&p.name, v);
        }
        let y_cell = &row[space.params().len()];
        let y: f64 = y_cell
            .parse()
            .map_err(|_| load_err(line, format!("objective `{y_cell}` is not a number")))?;
        if !y.is_finite() {
            return Err(load_err(line, "objective is not finite".into()));
        }
        let violations = space.validate(&config);
        if !violations.is_empty() {
            let msg = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
            return Err(load_err(line, format!("invalid config: {msg}")));
        }
        let key: Vec<u64> = space.encode(&config)?.iter().map(|x| x.to_bits()).collect();
        if !seen.insert(key) {
            return Err(load_err(line, "duplicate config".into()));
        }
        records.push(Record { config, y });
    }
    Task::new(id, records, space).map_err(|e| load_err(0, e.to_string()))
}

/// Canonical CSV: `{}` float formatting (shortest round-trip), `\n` line endings.
pub fn write_task_csv<W: Write>(task: &Task, space: &SearchSpace, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header: Vec<&str> = space.params().iter().map(|p| p.name.as_str()).collect();
    header.push(OBJECTIVE_COLUMN);
    w.write_record(&header)?;
    for r in &task.records {
        let mut row: Vec<String> = space
            .params()
            .iter()
            .map(|p| r.config.get(&p.name).map(Value::to_string).unwrap_or_default())
            .collect();
        row.push(r.y.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_task_csv(task: &Task, space: &SearchSpace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_task_csv(task, space, std::io::BufWriter::new(file))
}

/// Write `space.json`, one CSV per task and `dataset.json` into `dir`.
pub fn save_dataset(dataset: &MetaDataset, fixed_split: Option<&FixedSplit>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let space_path = dir.join("space.json");
    std::fs::write(&space_path, dataset.space.to_json()).map_err(|e| Error::io(&space_path, e))?;
    let mut files = Vec::new();
    for t in &dataset.tasks {
        let name = PathBuf::from(format!("{}.csv", t.id));
        save_task_csv(t, &dataset.space, dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        space: "space.json".into(),
        tasks: files,
        fixed_split: fixed_split.cloned(),
    };
    let path = dir.join("dataset.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
