//! Python bindings: configuration, scenes and sensors, the model, and the
//! evaluation and diagnostic entry points.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use spycer::bundle::{read_scene, read_sensors_file, write_scene, write_sensors_file};
use spycer::config::RunConfig;
use spycer::engine::FaultInjection;
use spycer::eval::{export_map, make_folds, residual_map, run_experiment, Fitted, Method};
use spycer::gradcheck::{run_gradcheck, GradcheckConfig};
use spycer::grid::{extract_patch, VariableGrid, PATCH};
use spycer::model::SpycerModel;
use spycer::sim::{simulate as run_simulation, write_synthetic};
use spycer::train::train as run_training;
use spycer::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Row-major grid as nested lists with `None` at nodata pixels.
fn grid_rows(g: &VariableGrid) -> Vec<Vec<Option<f32>>> {
    let w = g.meta.width;
    (0..g.meta.height)
        .map(|r| (0..w).map(|c| (!g.nodata_mask[r * w + c]).then(|| g.values[r * w + c])).collect())
        .collect()
}

#[pyclass(name = "RunConfig", module = "spycer_py", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, or the TOML file at `path`.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load_or_default(path.as_deref()).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::from_toml(text).map_err(py_err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { inner: self.inner.clone().with_seed(seed) }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.sim.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[getter]
    fn methods(&self) -> Vec<String> {
        self.inner.eval.methods.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(grid={}x{}, channels={}, blocks={}, epochs={}, seed={})",
            self.inner.sim.grid.width,
            self.inner.sim.grid.height,
            self.inner.model.channels,
            self.inner.model.blocks,
            self.inner.train.epochs,
            self.inner.sim.seed
        )
    }
}

#[pyclass(name = "Scene", module = "spycer_py", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: spycer::grid::Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_scene(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        write_scene(&dir, &self.inner).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.meta.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.meta.height
    }

    #[getter]
    fn resolution_m(&self) -> f64 {
        self.inner.meta.resolution_m
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.inner.dates.iter().map(|d| d.date_label.clone()).collect()
    }

    /// LST at `date` as nested rows.
    fn lst(&self, date: &str) -> PyResult<Vec<Vec<Option<f32>>>> {
        Ok(grid_rows(self.inner.lst(date).map_err(py_err)?))
    }

    fn __repr__(&self) -> String {
        format!("Scene({}x{}, {} dates)", self.inner.meta.width, self.inner.meta.height, self.inner.dates.len())
    }
}

#[pyclass(name = "SensorNetwork", module = "spycer_py", from_py_object)]
#[derive(Clone)]
struct PySensorNetwork {
    inner: spycer::grid::SensorNetwork,
}

#[pymethods]
impl PySensorNetwork {
    /// Reads a sensor CSV against the scene grid; sensors too close to the
    /// border are dropped.
    #[staticmethod]
    fn load(path: PathBuf, scene: &PyScene) -> PyResult<Self> {
        let (inner, _) = read_sensors_file(&path, &scene.inner.meta).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_sensors_file(&path, &self.inner).map_err(py_err)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids()
    }

    /// `(date, tair_c)` pairs of one sensor.
    fn readings(&self, id: &str) -> PyResult<Vec<(String, f64)>> {
        let s = self.inner.get(id).ok_or_else(|| PyKeyError::new_err(id.to_string()))?;
        Ok(s.readings.iter().map(|(d, v)| (d.clone(), *v)).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "spycer_py")]
struct PyModel {
    inner: SpycerModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: SpycerModel::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Trains on every usable patch; returns the model and the per-epoch
    /// `(epoch, sup, phys, total)` losses.
    #[staticmethod]
    fn train(
        py: Python<'_>,
        scene: &PyScene,
        sensors: &PySensorNetwork,
        config: &PyRunConfig,
    ) -> PyResult<(Self, Vec<(usize, f64, f64, f64)>)> {
        let c = &config.inner;
        let (model, history) = py
            .detach(|| run_training(&scene.inner, &sensors.inner, &c.model, &c.physics, &c.train))
            .map_err(py_err)?;
        let h = history.epochs.iter().map(|e| (e.epoch, e.sup_loss, e.phys_loss, e.total)).collect();
        Ok((Self { inner: model }, h))
    }

    /// NSAT map at `date`, nested rows with `None` on the border.
    fn predict_map(&self, py: Python<'_>, scene: &PyScene, date: &str) -> PyResult<Vec<Vec<Option<f32>>>> {
        let fitted = Fitted::Spycer(Box::new(self.inner.clone()));
        let g = py.detach(|| export_map(&fitted, &scene.inner, date)).map_err(py_err)?;
        Ok(grid_rows(&g))
    }

    /// Physics residual map at `date`.
    fn residual_map(&self, py: Python<'_>, scene: &PyScene, date: &str, config: &PyRunConfig) -> PyResult<Vec<Vec<Option<f32>>>> {
        let g = py.detach(|| residual_map(&self.inner, &config.inner.physics, &scene.inner, date)).map_err(py_err)?;
        Ok(grid_rows(&g))
    }

    /// 7×7 neighbor weights around one sensor.
    #[pyo3(signature = (scene, sensors, sensor, date, gaussian=true))]
    fn attention(&self, scene: &PyScene, sensors: &PySensorNetwork, sensor: &str, date: &str, gaussian: bool) -> PyResult<Vec<Vec<f64>>> {
        let s = sensors.inner.get(sensor).ok_or_else(|| PyKeyError::new_err(sensor.to_string()))?;
        let patch = extract_patch(&scene.inner, s, date).map_err(py_err)?;
        let w = self.inner.attention(&[&patch], gaussian).map_err(py_err)?;
        Ok(w[0].chunks(PATCH).map(|r| r.to_vec()).collect())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.net_param_count()
    }
}

/// Generates a synthetic scene, writes it to `out_dir` and returns it.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn simulate(py: Python<'_>, config: &PyRunConfig, out_dir: Option<PathBuf>) -> PyResult<(PyScene, PySensorNetwork)> {
    let s = py.detach(|| run_simulation(&config.inner.sim)).map_err(py_err)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir).map_err(|e| py_err(e.into()))?;
        write_synthetic(&dir, &s).map_err(py_err)?;
    }
    Ok((PyScene { inner: s.scene }, PySensorNetwork { inner: s.sensors }))
}

/// Sensor-held-out cross-validation. Returns the metric table as a list of
/// dicts, one per (method, month) cell.
#[pyfunction]
#[pyo3(signature = (scene, sensors, config, methods=None, folds=None))]
fn evaluate<'py>(
    py: Python<'py>,
    scene: &PyScene,
    sensors: &PySensorNetwork,
    config: &PyRunConfig,
    methods: Option<Vec<String>>,
    folds: Option<usize>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = config.inner.clone();
    if let Some(m) = methods {
        cfg.eval.methods = m;
    }
    if let Some(f) = folds {
        cfg.eval.folds = f;
    }
    cfg.validate().map_err(py_err)?;
    let methods: Vec<Method> = cfg.methods().map_err(py_err)?;
    let result = py
        .detach(|| {
            let plan = make_folds(&sensors.inner.ids(), cfg.eval.folds, cfg.eval.seed)?;
            run_experiment(&scene.inner, &sensors.inner, &methods, &plan, &cfg.experiment())
        })
        .map_err(py_err)?;
    result
        .table
        .cells
        .iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("method", &c.method)?;
            d.set_item("month", &c.month)?;
            d.set_item("rmse_mean", c.rmse_mean)?;
            d.set_item("rmse_std", c.rmse_std)?;
            d.set_item("mae_mean", c.mae_mean)?;
            d.set_item("mae_std", c.mae_std)?;
            d.set_item("n_folds", c.n_folds)?;
            d.set_item("n_samples", c.n_samples)?;
            Ok(d)
        })
        .collect()
}

/// Finite-difference check of every backward rule; returns
/// `(passed, max_relative_error, report)`.
#[pyfunction]
#[pyo3(signature = (seeds=10, seed=7, corrupt_backward=false))]
fn gradcheck(py: Python<'_>, seeds: usize, seed: u64, corrupt_backward: bool) -> PyResult<(bool, f64, String)> {
    let cfg = GradcheckConfig {
        seeds,
        base_seed: seed,
        fault: if corrupt_backward { FaultInjection::ReluBackward } else { FaultInjection::None },
        ..Default::default()
    };
    let report = py.detach(|| run_gradcheck(&cfg)).map_err(py_err)?;
    Ok((report.passed(), report.max_error(), report.render()))
}

#[pyfunction]
fn rmse(preds: Vec<f64>, truths: Vec<f64>) -> PyResult<f64> {
    spycer::eval::rmse(&preds, &truths).map_err(py_err)
}

#[pyfunction]
fn mae(preds: Vec<f64>, truths: Vec<f64>) -> PyResult<f64> {
    spycer::eval::mae(&preds, &truths).map_err(py_err)
}

#[pymodule]
fn spycer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PySensorNetwork>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    Ok(())
}
