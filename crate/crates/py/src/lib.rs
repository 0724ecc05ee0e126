//! Python bindings. Structured results (reports, metrics) cross the boundary
//! as plain dicts decoded from their JSON form.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use stef_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stef_core::evaluation::{self, HistoricalAverage, Predictor};
use stef_core::grid::{self, build_samples, split_dataset, DatasetSplit};
use stef_core::model::{predict_batch, ModelParams, StefConfig};
use stef_core::synth::SynthConfig;
use stef_core::training::{self, TrainConfig};
use stef_core::Tensor;

create_exception!(stef, StefError, PyException);

fn to_py(e: stef_core::Error) -> PyErr {
    match e {
        stef_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        stef_core::Error::Invalid(_) | stef_core::Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        other => StefError::new_err(other.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| StefError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "GridSpec", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGridSpec {
    inner: grid::GridSpec,
}

#[pymethods]
impl PyGridSpec {
    #[new]
    #[pyo3(signature = (min_lat, max_lat, min_lon, max_lon, width, height, resolution_minutes = 60))]
    fn new(
        min_lat: f64,
        max_lat: f64,
        min_lon: f64,
        max_lon: f64,
        width: usize,
        height: usize,
        resolution_minutes: u32,
    ) -> PyResult<Self> {
        let mut inner = grid::GridSpec::new(min_lat, max_lat, min_lon, max_lon, width, height).map_err(to_py)?;
        inner.resolution_minutes = resolution_minutes;
        inner.validate().map_err(to_py)?;
        Ok(PyGridSpec { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn cells(&self) -> usize {
        self.inner.cells()
    }

    /// `(w, h)` of the cell containing a point, or `None` outside the grid.
    fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        self.inner.cell_of(lat, lon)
    }

    fn __repr__(&self) -> String {
        let g = &self.inner;
        format!(
            "GridSpec(lat {}..{}, lon {}..{}, {}x{}, {} min)",
            g.min_lat, g.max_lat, g.min_lon, g.max_lon, g.width, g.height, g.resolution_minutes
        )
    }
}

#[pyclass(name = "DemandSeries", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDemandSeries {
    inner: grid::DemandSeries,
}

#[pymethods]
impl PyDemandSeries {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDemandSeries { inner: grid::read_demand(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        grid::write_demand(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn grid(&self) -> PyGridSpec {
        PyGridSpec { inner: self.inner.grid().clone() }
    }

    #[getter]
    fn start_time(&self) -> String {
        self.inner.start_time().to_rfc3339()
    }

    fn total(&self) -> u64 {
        self.inner.total()
    }

    /// Counts at one step, row-major `(w, h)`.
    fn frame(&self, step: usize) -> PyResult<Vec<u32>> {
        if step >= self.inner.steps() {
            return Err(PyValueError::new_err(format!("step {step} out of range")));
        }
        Ok(self.inner.frame(step).to_vec())
    }

    fn counts(&self) -> Vec<u32> {
        self.inner.counts().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.steps()
    }
}

#[pyclass(name = "FactorSeries", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFactorSeries {
    inner: grid::FactorSeries,
}

#[pymethods]
impl PyFactorSeries {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFactorSeries { inner: grid::read_factors(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        grid::write_factors(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn num_factors(&self) -> usize {
        self.inner.num_factors()
    }

    /// Activations at one step, row-major `(w, h, m)`.
    fn frame(&self, step: usize) -> PyResult<Vec<u8>> {
        if step >= self.inner.steps() {
            return Err(PyValueError::new_err(format!("step {step} out of range")));
        }
        Ok(self.inner.frame(step).to_vec())
    }
}

/// Generates a synthetic dataset from a config dict. Returns
/// `(demand, factors, pois)` with POIs as a list of dicts.
#[pyfunction]
fn synth<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
) -> PyResult<(PyDemandSeries, PyFactorSeries, Bound<'py, PyAny>)> {
    let cfg: SynthConfig = from_json(py, config)?;
    let data = stef_core::synth::generate(&cfg).map_err(to_py)?;
    let pois = json_to_py(py, &data.pois)?;
    Ok((PyDemandSeries { inner: data.demand }, PyFactorSeries { inner: data.factors }, pois))
}

/// Bins `(iso_time, lat, lon)` tuples into a demand series.
#[pyfunction]
fn rasterize(
    trips: Vec<(String, f64, f64)>,
    grid: &PyGridSpec,
    start: &str,
    steps: usize,
) -> PyResult<PyDemandSeries> {
    let records = trips
        .into_iter()
        .map(|(t, lat, lon)| {
            Ok(grid::TripRecord { pickup_time: grid::parse_timestamp(&t)?, pickup_lat: lat, pickup_lon: lon })
        })
        .collect::<stef_core::Result<Vec<_>>>()
        .map_err(to_py)?;
    let start = grid::parse_timestamp(start).map_err(to_py)?;
    let (series, _) = grid::rasterize_trips(&records, &grid.inner, start, steps).map_err(to_py)?;
    Ok(PyDemandSeries { inner: series })
}

/// Encodes a list of POI dicts into a factor series.
#[pyfunction]
fn encode_factors(
    py: Python<'_>,
    pois: &Bound<'_, PyAny>,
    grid: &PyGridSpec,
    start: &str,
    steps: usize,
    num_factors: usize,
) -> PyResult<PyFactorSeries> {
    let pois: Vec<grid::PoiRecord> = from_json(py, pois)?;
    let start = grid::parse_timestamp(start).map_err(to_py)?;
    let (series, _) = grid::encode_external_factors(&pois, &grid.inner, start, steps, num_factors).map_err(to_py)?;
    Ok(PyFactorSeries { inner: series })
}

fn split(
    demand: &PyDemandSeries,
    factors: &PyFactorSeries,
    lags: usize,
    ratios: (f64, f64, f64),
) -> PyResult<DatasetSplit> {
    let samples = build_samples(&demand.inner, &factors.inner, lags).map_err(to_py)?;
    split_dataset(&samples, ratios).map_err(to_py)
}

fn pick<'a>(parts: &'a DatasetSplit, name: &str) -> PyResult<&'a grid::SampleSet> {
    match name {
        "train" => Ok(&parts.train),
        "validation" => Ok(&parts.validation),
        "test" => Ok(&parts.test),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

/// The CNN + LSTM forecaster.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    seed: u64,
    trained_epochs: usize,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (width, height, factors, lags = 4, kernels = 32, dense_width = 128, lstm_units = 128, input_scale = 1.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        width: usize,
        height: usize,
        factors: usize,
        lags: usize,
        kernels: usize,
        dense_width: usize,
        lstm_units: usize,
        input_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = StefConfig { lags, width, height, kernels, factors, dense_width, lstm_units, input_scale };
        let params = ModelParams::init(&config, seed).map_err(to_py)?;
        Ok(PyModel { params, seed, trained_epochs: 0 })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(to_py)?;
        Ok(PyModel { params: ckpt.params, seed: ckpt.seed, trained_epochs: ckpt.trained_epochs })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = Checkpoint { params: self.params.clone(), seed: self.seed, trained_epochs: self.trained_epochs };
        save_checkpoint(&path, &ckpt).map_err(to_py)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.params.config)
    }

    fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Trains in place on a chronological split and returns the report dict.
    /// `config` accepts the same keys as the CLI training config.
    #[pyo3(signature = (demand, factors, config = None, split_ratios = (0.65, 0.15, 0.20)))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        demand: &PyDemandSeries,
        factors: &PyFactorSeries,
        config: Option<&Bound<'py, PyAny>>,
        split_ratios: (f64, f64, f64),
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = match config {
            Some(c) => from_json(py, c)?,
            None => TrainConfig::default(),
        };
        let parts = split(demand, factors, self.params.config.lags, split_ratios)?;
        let (best, report) =
            training::train(self.params.clone(), &parts.train, &parts.validation, &cfg).map_err(to_py)?;
        self.params = best;
        self.trained_epochs += report.epochs.len();
        json_to_py(py, &report)
    }

    /// Infer-mode forecasts for every sample of a series, flat `[B, W, H]`.
    fn predict(&self, demand: &PyDemandSeries, factors: &PyFactorSeries) -> PyResult<Vec<f64>> {
        let samples = build_samples(&demand.inner, &factors.inner, self.params.config.lags).map_err(to_py)?;
        Ok(predict_batch(&self.params, &samples).map_err(to_py)?.into_data())
    }

    /// One-step metrics on a split.
    #[pyo3(signature = (demand, factors, split = "test", split_ratios = (0.65, 0.15, 0.20)))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        demand: &PyDemandSeries,
        factors: &PyFactorSeries,
        split: &str,
        split_ratios: (f64, f64, f64),
    ) -> PyResult<Bound<'py, PyAny>> {
        let parts = self::split(demand, factors, self.params.config.lags, split_ratios)?;
        let set = pick(&parts, split)?;
        let report = evaluation::evaluate_one_step(&self.params, set, split).map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Rolling evaluation over the last `window` steps; returns
    /// `{"metrics": ..., "trace": [...]}`.
    #[pyo3(signature = (demand, factors, window = 168))]
    fn roll<'py>(
        &self,
        py: Python<'py>,
        demand: &PyDemandSeries,
        factors: &PyFactorSeries,
        window: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        rolling(py, &self.params, self.params.config.lags, demand, factors, window)
    }
}

fn rolling<'py, P: Predictor>(
    py: Python<'py>,
    predictor: &P,
    lags: usize,
    demand: &PyDemandSeries,
    factors: &PyFactorSeries,
    window: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let out = evaluation::rolling_evaluate(predictor, &demand.inner, &factors.inner, lags, window).map_err(to_py)?;
    let value = serde_json::json!({ "metrics": out.metrics, "trace": out.trace });
    json_to_py(py, &value)
}

/// Test-split metrics of the hour-of-week historical average fitted on the
/// span covered by the training split.
#[pyfunction]
#[pyo3(signature = (demand, factors, lags = 4, split_ratios = (0.65, 0.15, 0.20)))]
fn baseline_evaluate<'py>(
    py: Python<'py>,
    demand: &PyDemandSeries,
    factors: &PyFactorSeries,
    lags: usize,
    split_ratios: (f64, f64, f64),
) -> PyResult<Bound<'py, PyAny>> {
    let parts = split(demand, factors, lags, split_ratios)?;
    let end = parts.train.target_steps().last().copied().unwrap_or(0) + 1;
    let ha = HistoricalAverage::fit(&demand.inner.slice(0..end).map_err(to_py)?).map_err(to_py)?;
    let report = evaluation::evaluate_one_step(&ha, &parts.test, "test").map_err(to_py)?;
    json_to_py(py, &report)
}

/// MAE / RMSE / MAPE for flat predictions and targets of shape `[B, W, H]`.
#[pyfunction]
fn compute_metrics<'py>(
    py: Python<'py>,
    preds: Vec<f64>,
    targets: Vec<f64>,
    shape: (usize, usize, usize),
) -> PyResult<Bound<'py, PyAny>> {
    let dims = vec![shape.0, shape.1, shape.2];
    let p = Tensor::new(dims.clone(), preds).map_err(to_py)?;
    let t = Tensor::new(dims, targets).map_err(to_py)?;
    let report = evaluation::compute_metrics(&p, &t).map_err(to_py)?;
    json_to_py(py, &report)
}

#[pymodule]
fn stef(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StefError", m.py().get_type::<StefError>())?;
    m.add_class::<PyGridSpec>()?;
    m.add_class::<PyDemandSeries>()?;
    m.add_class::<PyFactorSeries>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(encode_factors, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    Ok(())
}
