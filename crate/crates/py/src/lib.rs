//! Python bindings: search spaces, datasets, meta-training, checkpoints,
//! surrogate predictions, expected improvement, the warm-start search and
//! the benchmark and sine-demo drivers.

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fsbo::bo::expected_improvement as ei_closed_form;
use fsbo::dkgp::{fine_tune, rows_to_matrix};
use fsbo::harness::stats::derive_seed as derive_seed_impl;
use fsbo::harness::{run_benchmark as run_benchmark_impl, sine_demo as sine_demo_impl, BenchmarkSpec, SineDemoConfig};
use fsbo::meta_train::{meta_train as meta_train_impl, TrainConfig};
use fsbo::metadata::{load_manifest, MetaDataset};
use fsbo::space::{Config, SearchSpace, Value};
use fsbo::warmstart::{evolve as evolve_impl, EaConfig, ResponseMatrix};

create_exception!(fsbo, FsboError, PyException);

fn err(e: fsbo::Error) -> PyErr {
    FsboError::new_err(format!("{}: {e}", e.kind()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    FsboError::new_err(format!("json: {e}"))
}

fn config_from_dict(d: &Bound<'_, PyDict>) -> PyResult<Config> {
    let mut c = Config::new();
    for (k, v) in d.iter() {
        let name: String = k.extract()?;
        let value = match v.extract::<f64>() {
            Ok(x) => Value::Real(x),
            Err(_) => Value::Choice(v.extract::<String>()?),
        };
        c.insert(&name, value);
    }
    Ok(c)
}

fn config_to_dict<'py>(py: Python<'py>, c: &Config) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in &c.0 {
        match v {
            Value::Real(x) => d.set_item(k, *x)?,
            Value::Choice(s) => d.set_item(k, s)?,
        }
    }
    Ok(d)
}

fn matrix(rows: &[Vec<f64>], dim: usize) -> PyResult<DMatrix<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(FsboError::new_err(format!(
            "dimension: expected rows of {dim}, got {}",
            r.len()
        )));
    }
    Ok(rows_to_matrix(rows, dim))
}

/// Mixed continuous/categorical search space.
#[pyclass(name = "SearchSpace", module = "fsbo", skip_from_py_object)]
#[derive(Clone)]
struct PySearchSpace {
    inner: SearchSpace,
}

#[pymethods]
impl PySearchSpace {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        SearchSpace::from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        SearchSpace::builtin(name).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        SearchSpace::load(path).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name.clone()).collect()
    }

    #[getter]
    fn encoded_dim(&self) -> usize {
        self.inner.encoded_dim()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn encode(&self, config: &Bound<'_, PyDict>) -> PyResult<Vec<f64>> {
        self.inner.encode(&config_from_dict(config)?).map_err(err)
    }

    fn decode<'py>(&self, py: Python<'py>, encoded: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        config_to_dict(py, &self.inner.decode(&encoded).map_err(err)?)
    }

    /// Human-readable constraint violations; empty when valid.
    fn validate(&self, config: &Bound<'_, PyDict>) -> PyResult<Vec<String>> {
        Ok(self
            .inner
            .validate(&config_from_dict(config)?)
            .iter()
            .map(|v| v.to_string())
            .collect())
    }

    fn sample_uniform<'py>(&self, py: Python<'py>, n: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| config_to_dict(py, &self.inner.sample_uniform(&mut rng)))
            .collect()
    }

    fn lhs_sample<'py>(&self, py: Python<'py>, n: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.inner
            .lhs_sample(n, &mut rng)
            .iter()
            .map(|c| config_to_dict(py, c))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("SearchSpace({})", self.names().join(", "))
    }
}

/// Tasks of one search space, loaded from a manifest.
#[pyclass(name = "Dataset", module = "fsbo")]
struct PyDataset {
    inner: MetaDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_manifest(path).map(|l| Self { inner: l.dataset }).map_err(err)
    }

    #[getter]
    fn space(&self) -> PySearchSpace {
        PySearchSpace {
            inner: self.inner.space().clone(),
        }
    }

    #[getter]
    fn task_ids(&self) -> Vec<String> {
        self.inner.tasks().iter().map(|t| t.id().to_string()).collect()
    }

    /// Encoded inputs and objective values of one task.
    fn task(&self, id: &str) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let t = self
            .inner
            .task(id)
            .ok_or_else(|| FsboError::new_err(format!("invalid_argument: unknown task `{id}`")))?;
        Ok((t.encoded().to_vec(), t.ys()))
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.tasks().len()
    }
}

/// Meta-trained deep-kernel surrogate with its provenance.
#[pyclass(name = "Checkpoint", module = "fsbo", skip_from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: fsbo::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        fsbo::Checkpoint::load(path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        fsbo::Checkpoint::from_json(text)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn space_fingerprint(&self) -> String {
        self.inner.space_fingerprint.clone()
    }

    #[getter]
    fn dataset_fingerprint(&self) -> String {
        self.inner.dataset_fingerprint.clone()
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.loss_trace.clone()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.surrogate.n_params()
    }

    /// Posterior mean and variance at `x_query` after fine-tuning on the
    /// observations; inputs are encoded rows.
    #[pyo3(signature = (x_obs, y_obs, x_query, fine_tune_steps = 100, lr = 1e-3))]
    fn predict(
        &self,
        x_obs: Vec<Vec<f64>>,
        y_obs: Vec<f64>,
        x_query: Vec<Vec<f64>>,
        fine_tune_steps: usize,
        lr: f64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let dim = self.inner.arch().input_dim;
        let xo = matrix(&x_obs, dim)?;
        let xq = matrix(&x_query, dim)?;
        if y_obs.len() != x_obs.len() {
            return Err(FsboError::new_err("dimension: one label per observation expected"));
        }
        let surrogate = if fine_tune_steps > 0 && !y_obs.is_empty() {
            fine_tune(&self.inner.surrogate, &xo, &y_obs, fine_tune_steps, lr).surrogate
        } else {
            self.inner.surrogate.clone()
        };
        let p = surrogate.posterior(&xo, &y_obs, &xq, false).map_err(err)?;
        Ok((p.mean, p.variance))
    }
}

/// Meta-train on every task of a manifest; `config` is a training
/// configuration JSON string.
#[pyfunction]
#[pyo3(signature = (dataset_path, config = None, exclude = Vec::new()))]
fn meta_train(dataset_path: &str, config: Option<&str>, exclude: Vec<String>) -> PyResult<PyCheckpoint> {
    let loaded = load_manifest(dataset_path).map_err(err)?;
    let cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => TrainConfig::default(),
    };
    let tasks: Vec<_> = loaded
        .dataset
        .tasks()
        .iter()
        .filter(|t| !exclude.iter().any(|e| e == t.id()))
        .cloned()
        .collect();
    meta_train_impl(loaded.dataset.space(), &tasks, &cfg)
        .map(|inner| PyCheckpoint { inner })
        .map_err(err)
}

/// Closed-form expected improvement of a Gaussian over `best`, for maximization.
#[pyfunction]
fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    ei_closed_form(mean, variance, best)
}

/// Warm-start subset search over a `C × T` matrix of normalized responses.
/// Returns the sorted row indices and their loss.
#[pyfunction]
#[pyo3(signature = (values, set_size = 5, steps = 100_000, population_size = 100, seed = 0))]
fn evolve(
    values: Vec<Vec<f64>>,
    set_size: usize,
    steps: usize,
    population_size: usize,
    seed: u64,
) -> PyResult<(Vec<usize>, f64)> {
    let t = values.first().map_or(0, Vec::len);
    let m = matrix(&values, t)?;
    let rm = ResponseMatrix::from_values(vec![Config::new(); values.len()], m).map_err(err)?;
    let cfg = EaConfig {
        set_size,
        steps,
        population_size,
        seed,
        ..EaConfig::default()
    };
    let r = evolve_impl(&rm, &cfg).map_err(err)?;
    Ok((r.best, r.best_loss))
}

#[pyfunction]
#[pyo3(signature = (base_seed, tag, indices = Vec::new()))]
fn derive_seed(base_seed: u64, tag: &str, indices: Vec<u64>) -> u64 {
    derive_seed_impl(base_seed, tag, &indices)
}

/// Run a benchmark spec file; writes the report when `out_dir` is given.
/// Returns `(method, trial, mean_regret, std_regret, n)` summary rows.
#[pyfunction]
#[pyo3(signature = (spec_path, out_dir = None))]
fn run_benchmark(
    py: Python<'_>,
    spec_path: &str,
    out_dir: Option<&str>,
) -> PyResult<Vec<(String, usize, f64, f64, usize)>> {
    let spec = BenchmarkSpec::load(spec_path).map_err(err)?;
    let report = py
        .detach(|| -> fsbo::Result<_> {
            let loaded = spec.load_dataset()?;
            let cache = out_dir.map(|d| std::path::Path::new(d).join("checkpoints"));
            let report = run_benchmark_impl(&spec, &loaded, cache.as_deref())?;
            if let Some(d) = out_dir {
                report.save(d)?;
            }
            Ok(report)
        })
        .map_err(err)?;
    Ok(report
        .summary
        .iter()
        .map(|s| (s.method.name().to_string(), s.trial, s.mean_regret, s.std_regret, s.n))
        .collect())
}

/// Sine-wave few-shot demo; returns the simple regret after every
/// evaluation for each target, as `(fsbo, random)` pairs.
#[pyfunction]
#[pyo3(signature = (source_tasks = 50, targets = 20, iterations = 10_000, seed = 0, out_dir = None))]
#[allow(clippy::type_complexity)]
fn sine_demo(
    py: Python<'_>,
    source_tasks: usize,
    targets: usize,
    iterations: usize,
    seed: u64,
    out_dir: Option<&str>,
) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut cfg = SineDemoConfig {
        source_tasks,
        targets,
        seed,
        ..SineDemoConfig::default()
    };
    cfg.train.outer_iterations = iterations;
    let demo = py
        .detach(|| -> fsbo::Result<_> {
            let demo = sine_demo_impl(&cfg)?;
            if let Some(d) = out_dir {
                demo.save(d)?;
            }
            Ok(demo)
        })
        .map_err(err)?;
    Ok(demo
        .targets
        .iter()
        .map(|t| (t.fsbo_regret(), t.random_regret()))
        .collect())
}

#[pymodule]
#[pyo3(name = "fsbo")]
fn fsbo_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FsboError", m.py().get_type::<FsboError>())?;
    m.add_class::<PySearchSpace>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(meta_train, m)?)?;
    m.add_function(wrap_pyfunction!(expected_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(evolve, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(sine_demo, m)?)?;
    Ok(())
}
