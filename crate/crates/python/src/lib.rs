//! Python bindings.
//!
//! ```python
//! import abode
//! abode.synth_csv("house.csv", seed=1)
//! data = abode.Dataset.from_csv("house.csv", "house", seed=0)
//! run = abode.train(data, epochs=10, seed=0)
//! print(run.best_epoch, abode.evaluate(run.model, data, "test"))
//! ```

use std::path::PathBuf;

use abode_core::checkpoint::Checkpoint;
use abode_core::data::{
    build_windows, load_series, split_normalize_oversample, synth_series, write_series, ClassCounts, DatasetCase,
    NormFit, SynthProfile, WindowSample, FEATURE_ROWS, WINDOW_MINUTES,
};
use abode_core::eval::{confusion, metrics, Metrics};
use abode_core::gradcheck::{check_model, GradcheckOptions};
use abode_core::model::{AbodeNet, ModelConfig};
use abode_core::training::{self, lr_schedule, DecayMode, Snapshot, TrainConfig};
use abode_core::Tensor;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: abode_core::Error) -> PyErr {
    match e {
        abode_core::Error::Input { .. } | abode_core::Error::Data(_) | abode_core::Error::Tensor(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn value_err(message: String) -> PyErr {
    PyValueError::new_err(message)
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    Ok(d)
}

/// A prepared case: windows split 3:1:1, normalized, training set balanced.
#[pyclass(module = "abode", skip_from_py_object)]
#[derive(Clone)]
pub struct Dataset {
    inner: DatasetCase,
}

impl Dataset {
    fn split(&self, name: &str) -> PyResult<&[WindowSample]> {
        match name {
            "train" => Ok(&self.inner.train),
            "val" => Ok(&self.inner.val),
            "test" => Ok(&self.inner.test),
            other => Err(value_err(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (path, case_id, seed = 0, norm_fit = "train"))]
    fn from_csv(path: PathBuf, case_id: &str, seed: u64, norm_fit: &str) -> PyResult<Self> {
        let norm_fit: NormFit = norm_fit.parse().map_err(value_err)?;
        let series = load_series(&path, case_id).map_err(py_err)?;
        let inner = split_normalize_oversample(case_id, &build_windows(&series), seed, norm_fit).map_err(py_err)?;
        Ok(Dataset { inner })
    }

    /// A synthetic household with the default profile.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, days = 42, appliance_load = 400.0))]
    fn synthetic(seed: u64, days: usize, appliance_load: f64) -> PyResult<Self> {
        let profile = SynthProfile {
            days,
            appliance_load_w: appliance_load,
            ..SynthProfile::default()
        };
        let windows = build_windows(&synth_series(&profile, seed));
        let inner = split_normalize_oversample("synthetic", &windows, seed, NormFit::Train).map_err(py_err)?;
        Ok(Dataset { inner })
    }

    #[getter]
    fn case_id(&self) -> String {
        self.inner.id.clone()
    }

    /// `(occupied, vacant)` over all windows.
    #[getter]
    fn class_counts(&self) -> (usize, usize) {
        (self.inner.counts.occupied, self.inner.counts.vacant)
    }

    /// Number of samples in `split`.
    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// Flat row-major features (`n * 180` values) and labels of `split`.
    fn arrays(&self, split: &str) -> PyResult<(Vec<f64>, Vec<bool>)> {
        let s = self.split(split)?;
        Ok((
            s.iter().flat_map(|w| w.features.iter().copied()).collect(),
            s.iter().map(|w| w.occupied).collect(),
        ))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(case={:?}, train={}, val={}, test={})",
            self.inner.id,
            self.inner.train.len(),
            self.inner.val.len(),
            self.inner.test.len()
        )
    }
}

/// The occupancy network.
#[pyclass(module = "abode", skip_from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: AbodeNet,
}

#[pymethods]
impl Model {
    /// A freshly initialised network with the default architecture.
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let inner = AbodeNet::new(ModelConfig::default(), &mut rng).map_err(py_err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Model {
            inner: ckpt.model().map_err(py_err)?,
        })
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|(k, _)| k.clone()).collect()
    }

    /// `(shape, flat data)` of a parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let p = self
            .inner
            .params()
            .get(name)
            .ok_or_else(|| value_err(format!("no parameter `{name}`")))?;
        Ok((p.value.shape().to_vec(), p.value.data().to_vec()))
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Class probabilities `[vacant, occupied]` for `n` windows given as a
    /// flat row-major list of `n * 180` features.
    fn predict_proba(&mut self, features: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
        let per = FEATURE_ROWS * WINDOW_MINUTES;
        if features.is_empty() || !features.len().is_multiple_of(per) {
            return Err(value_err(format!(
                "expected a positive multiple of {per} values, got {}",
                features.len()
            )));
        }
        let n = features.len() / per;
        let x = Tensor::new([n, 1, FEATURE_ROWS, WINDOW_MINUTES], features).map_err(|e| py_err(e.into()))?;
        let probs = self.inner.predict_proba(&x, 256).map_err(py_err)?;
        Ok(probs.data().chunks(2).map(|r| (r[0], r[1])).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model(parameters={})", self.num_parameters())
    }
}

/// Result of [`train`]: the best-validation network and the epoch log.
#[pyclass(module = "abode")]
pub struct TrainRun {
    case: String,
    config: TrainConfig,
    best: Snapshot,
    #[pyo3(get)]
    log: Vec<(usize, f64, f64, f64, f64)>,
}

#[pymethods]
impl TrainRun {
    #[getter]
    fn best_epoch(&self) -> usize {
        self.best.epoch
    }

    #[getter]
    fn val_f1(&self) -> f64 {
        self.best.val_f1
    }

    #[getter]
    fn model(&self) -> Model {
        Model {
            inner: self.best.model.clone(),
        }
    }

    /// Writes a JSON checkpoint of the best epoch.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_snapshot(&self.case, &self.best, &self.config)
            .save(&path)
            .map_err(py_err)
    }
}

/// Trains a network; the log rows are `(epoch, train_loss, val_acc, val_f1, lr)`.
#[pyfunction]
#[pyo3(signature = (dataset, epochs = 100, lr = 1e-3, weight_decay = 5e-4, warmup = 7, batch_size = 64, decay = "coupled", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    dataset: &Dataset,
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    warmup: usize,
    batch_size: usize,
    decay: &str,
    seed: u64,
) -> PyResult<TrainRun> {
    let config = TrainConfig {
        learning_rate: lr,
        weight_decay,
        max_epochs: epochs,
        warmup_epochs: warmup,
        batch_size,
        decay: decay.parse::<DecayMode>().map_err(value_err)?,
        seed,
    };
    let data = &dataset.inner;
    let outcome = py
        .detach(|| training::train_case(data, &ModelConfig::default(), &config))
        .map_err(py_err)?;
    Ok(TrainRun {
        case: data.id.clone(),
        config,
        log: outcome
            .log
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.val_acc, r.val_f1, r.lr))
            .collect(),
        best: outcome.best,
    })
}

/// Accuracy, precision, recall and F1 of `model` on one split.
#[pyfunction]
#[pyo3(signature = (model, dataset, split = "test"))]
fn evaluate<'py>(py: Python<'py>, model: &mut Model, dataset: &Dataset, split: &str) -> PyResult<Bound<'py, PyDict>> {
    let m = training::evaluate(&mut model.inner, dataset.split(split)?).map_err(py_err)?;
    metrics_dict(py, &m)
}

/// Metrics for boolean predictions against labels (occupied is positive).
#[pyfunction]
fn score<'py>(py: Python<'py>, predictions: Vec<bool>, labels: Vec<bool>) -> PyResult<Bound<'py, PyDict>> {
    let c = confusion(&predictions, &labels).map_err(py_err)?;
    metrics_dict(py, &metrics(&c))
}

/// Writes a synthetic household CSV; returns `(windows, occupied, vacant)`.
#[pyfunction]
#[pyo3(signature = (path, seed = 0, days = 42, appliance_load = 400.0))]
fn synth_csv(path: PathBuf, seed: u64, days: usize, appliance_load: f64) -> PyResult<(usize, usize, usize)> {
    let profile = SynthProfile {
        days,
        appliance_load_w: appliance_load,
        ..SynthProfile::default()
    };
    let series = synth_series(&profile, seed);
    let file = std::fs::File::create(&path).map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", path.display())))?;
    write_series(&series, std::io::BufWriter::new(file)).map_err(py_err)?;
    let c = ClassCounts::of(&build_windows(&series));
    Ok((c.total(), c.occupied, c.vacant))
}

/// Finite-difference check; maps each parameter group to `(max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, coords = 24))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, coords: usize) -> PyResult<Bound<'py, PyDict>> {
    let options = GradcheckOptions {
        coords_per_tensor: coords,
        ..GradcheckOptions::new()
    };
    let report = py.detach(|| check_model(seed, &options)).map_err(py_err)?;
    let d = PyDict::new(py);
    for g in &report.groups {
        d.set_item(g.group.as_str(), (g.max_rel_error, g.passed))?;
    }
    Ok(d)
}

/// Learning rate at `epoch` under linear warmup then cosine decay.
#[pyfunction(name = "lr_schedule")]
#[pyo3(signature = (epoch, lr = 1e-3, warmup = 7, epochs = 100))]
fn lr_at(epoch: f64, lr: f64, warmup: usize, epochs: usize) -> f64 {
    let config = TrainConfig {
        learning_rate: lr,
        warmup_epochs: warmup,
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    lr_schedule(epoch, &config)
}

#[pymodule]
fn abode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<TrainRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(synth_csv, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
