//! Python bindings for the edgesim device model, codec, classifier and
//! session engine.
//!
//! Structured values cross the boundary as plain dicts and lists.

use edgesim_core::analytics::{self, ClassifierThresholds};
use edgesim_core::experiment::{self, ScriptKind, ScriptedResponder, SessionPlan, SimRig, TrialRecord};
use edgesim_core::frame::CELLS;
use edgesim_core::mechmodel::{self, MechanismConfig};
use edgesim_core::protocol::{self, Message};
use edgesim_core::{Axis, Condition, Device, DeviceCommand, DeviceConfig, FsrFrame};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(edgesim, DeviceError, PyException, "The device refused a command.");

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn parse_condition(s: &str) -> PyResult<Condition> {
    s.parse().map_err(value_err)
}

fn parse_axis(s: &str) -> PyResult<Axis> {
    match s.trim().to_ascii_lowercase().as_str() {
        "surface" => Ok(Axis::Surface),
        "edge" => Ok(Axis::Edge),
        _ => Err(PyValueError::new_err(format!("unknown axis `{s}` (expected surface or edge)"))),
    }
}

fn parse_config(config_toml: Option<&str>) -> PyResult<DeviceConfig> {
    match config_toml {
        Some(text) => DeviceConfig::from_toml_str(text).map_err(value_err),
        None => Ok(DeviceConfig::default()),
    }
}

/// Surface displacement per motor step, mm.
#[pyfunction]
fn surface_mm_per_step() -> f64 {
    MechanismConfig::default().surface.mm_per_step()
}

#[pyfunction]
fn surface_steps_to_mm(steps: i64) -> f64 {
    mechmodel::surface_steps_to_mm(steps, &MechanismConfig::default().surface)
}

/// Output angle of one edge motor step after the gearbox, degrees.
#[pyfunction]
fn edge_effective_step_deg() -> f64 {
    mechmodel::edge_effective_step_deg(&MechanismConfig::default().edge)
}

#[pyfunction]
fn edge_cable_mm_per_step() -> f64 {
    mechmodel::edge_cable_mm_per_step(&MechanismConfig::default().edge)
}

/// Net edge contact force for a cable tension, N.
#[pyfunction]
fn edge_net_force_n(cable_tension_n: f64) -> PyResult<f64> {
    mechmodel::edge_net_force_n(cable_tension_n, &MechanismConfig::default().edge).map_err(value_err)
}

/// Battery life with both motors drawing continuously, hours.
#[pyfunction]
fn endurance_h() -> PyResult<f64> {
    mechmodel::endurance_all_h(&MechanismConfig::default().power).map_err(value_err)
}

/// Validates a protocol message given as a dict and returns its wire line.
#[pyfunction]
fn encode(message: &Bound<'_, PyAny>) -> PyResult<String> {
    let msg: Message = from_py(message)?;
    Ok(protocol::encode_line(&msg))
}

/// Parses one wire line into a dict. Raises ValueError on malformed input.
#[pyfunction]
fn decode<'py>(py: Python<'py>, line: &str) -> PyResult<Bound<'py, PyAny>> {
    let msg = protocol::decode(line.as_bytes()).map_err(value_err)?;
    to_py(py, &msg)
}

/// A 6x6 pressure frame, row-major.
#[pyclass(name = "Frame", frozen)]
struct PyFrame {
    inner: FsrFrame,
}

#[pymethods]
impl PyFrame {
    #[new]
    fn new(t_ms: u64, cells: Vec<f64>) -> PyResult<Self> {
        let cells: [f64; CELLS] = cells
            .try_into()
            .map_err(|v: Vec<f64>| PyValueError::new_err(format!("expected {CELLS} cells, got {}", v.len())))?;
        Ok(PyFrame {
            inner: FsrFrame::new(t_ms, cells),
        })
    }

    #[getter]
    fn t_ms(&self) -> u64 {
        self.inner.t_ms
    }

    #[getter]
    fn cells(&self) -> Vec<f64> {
        self.inner.cells.to_vec()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.cells.chunks(6).map(<[f64]>::to_vec).collect()
    }

    fn total(&self) -> f64 {
        self.inner.total()
    }

    /// Copy with outlier cells replaced by the interior median.
    fn masked(&self) -> PyFrame {
        PyFrame {
            inner: analytics::mask_outliers(&self.inner),
        }
    }

    /// Share of the total load on the band of rows under the edge.
    fn band_ratio(&self) -> PyResult<f64> {
        analytics::band_ratio(&self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Frame(t_ms={}, total={:.3})", self.inner.t_ms, self.inner.total())
    }
}

impl From<FsrFrame> for PyFrame {
    fn from(inner: FsrFrame) -> Self {
        PyFrame { inner }
    }
}

fn frames_out(frames: Vec<FsrFrame>) -> Vec<PyFrame> {
    frames.into_iter().map(PyFrame::from).collect()
}

/// The simulated device on simulated time. Nothing moves until `tick`.
#[pyclass(name = "Device")]
struct PyDevice {
    inner: Device,
}

impl PyDevice {
    fn apply(&mut self, command: DeviceCommand) -> PyResult<()> {
        self.inner
            .apply(&command)
            .map_err(|e| DeviceError::new_err(e.to_string()))
    }
}

#[pymethods]
impl PyDevice {
    /// `config_toml` overrides the default configuration key by key.
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        let inner = Device::new(parse_config(config_toml)?).map_err(value_err)?;
        Ok(PyDevice { inner })
    }

    fn calibrate(&mut self, axis: &str) -> PyResult<()> {
        let axis = parse_axis(axis)?;
        self.inner
            .calibrate(axis)
            .map_err(|e| DeviceError::new_err(e.to_string()))
    }

    fn preset(&mut self, condition: &str) -> PyResult<()> {
        let condition = parse_condition(condition)?;
        self.apply(DeviceCommand::Preset(condition))
    }

    #[pyo3(signature = (surface_mm=None, edge_mm=None))]
    fn move_to(&mut self, surface_mm: Option<f64>, edge_mm: Option<f64>) -> PyResult<()> {
        self.apply(DeviceCommand::Move { surface_mm, edge_mm })
    }

    #[pyo3(signature = (enable, rate_hz=10.0))]
    fn stream(&mut self, enable: bool, rate_hz: f64) -> PyResult<()> {
        self.apply(DeviceCommand::Stream { enable, rate_hz })
    }

    /// Advances simulated time and returns frames emitted meanwhile.
    fn tick(&mut self, dt_ms: u64) -> Vec<PyFrame> {
        frames_out(self.inner.tick(dt_ms))
    }

    /// Runs until both axes rest; returns (elapsed_ms, frames).
    #[pyo3(signature = (dt_ms=10, max_ms=experiment::SETTLE_LIMIT_MS))]
    fn run_until_settled(&mut self, dt_ms: u64, max_ms: u64) -> (u64, Vec<PyFrame>) {
        let (elapsed, frames) = self.inner.run_until_settled(dt_ms, max_ms);
        (elapsed, frames_out(frames))
    }

    /// Presets `condition`, waits for it to settle and samples `count` frames.
    #[pyo3(signature = (condition, count, rate_hz=10.0))]
    fn settled_frames(&mut self, condition: &str, count: usize, rate_hz: f64) -> PyResult<Vec<PyFrame>> {
        let condition = parse_condition(condition)?;
        self.inner
            .settled_frames(condition, count, rate_hz)
            .map(frames_out)
            .map_err(|e| DeviceError::new_err(e.to_string()))
    }

    fn frame(&self) -> PyFrame {
        self.inner.frame_now().into()
    }

    fn status<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &Message::from_status(self.inner.status()))
    }

    #[getter]
    fn clock_ms(&self) -> u64 {
        self.inner.clock_ms()
    }

    #[getter]
    fn moving(&self) -> bool {
        self.inner.is_moving()
    }

    #[getter]
    fn settle_eta_ms(&self) -> u64 {
        self.inner.settle_eta_ms()
    }
}

fn labelled(items: Vec<(String, PyRef<'_, PyFrame>)>) -> PyResult<Vec<(Condition, FsrFrame)>> {
    items
        .into_iter()
        .map(|(label, frame)| Ok((parse_condition(&label)?, frame.inner.clone())))
        .collect()
}

/// Contact classifier with per-session intensity thresholds.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    thresholds: ClassifierThresholds,
}

#[pymethods]
impl PyClassifier {
    /// Fits thresholds on `(label, frame)` pairs covering light and heavy conditions.
    #[staticmethod]
    fn calibrate(frames: Vec<(String, PyRef<'_, PyFrame>)>) -> PyResult<Self> {
        let thresholds = analytics::calibrate_on_labelled(&labelled(frames)?).map_err(value_err)?;
        Ok(PyClassifier { thresholds })
    }

    /// Condition label for one frame, after outlier masking.
    fn classify(&self, frame: PyRef<'_, PyFrame>) -> PyResult<String> {
        let class = analytics::classify(&analytics::mask_outliers(&frame.inner), &self.thresholds).map_err(value_err)?;
        Ok(class.condition().to_string())
    }

    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        frames: Vec<(String, PyRef<'_, PyFrame>)>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let report = analytics::evaluate(&labelled(frames)?, &self.thresholds).map_err(value_err)?;
        let out = to_py(py, &report)?;
        out.set_item("geometry_accuracy", report.geometry_accuracy())?;
        out.set_item("condition_accuracy", report.condition_accuracy())?;
        Ok(out)
    }

    #[getter]
    fn thresholds<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.thresholds)
    }
}

/// Shuffled presentation order for `repetitions` of each stimulus.
#[pyfunction]
#[pyo3(signature = (seed, repetitions=5))]
fn make_schedule(seed: u64, repetitions: u32) -> PyResult<Vec<String>> {
    let plan = SessionPlan {
        repetitions,
        rng_seed: seed,
        ..SessionPlan::default()
    };
    let schedule = experiment::make_schedule(&plan).map_err(value_err)?;
    Ok(schedule.iter().map(ToString::to_string).collect())
}

/// Runs a full session on the simulator with a scripted participant.
///
/// `responder` is `perfect`, `silent` or `confusion:FROM->TO:p,...`.
/// Returns a dict with the schedule, records, completion flag and stats.
#[pyfunction]
#[pyo3(signature = (seed=0, repetitions=5, responder="perfect", isi_s=3.0, config_toml=None))]
fn run_sim_session<'py>(
    py: Python<'py>,
    seed: u64,
    repetitions: u32,
    responder: &str,
    isi_s: f64,
    config_toml: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: ScriptKind = responder.parse().map_err(value_err)?;
    let plan = SessionPlan {
        repetitions,
        isi_s,
        rng_seed: seed,
        ..SessionPlan::default()
    };
    let device = Device::new(parse_config(config_toml)?).map_err(value_err)?;
    let mut rig = SimRig::calibrated(device);
    let mut responder = ScriptedResponder::new(kind, seed);
    let log = experiment::run_session(&plan, &mut rig, &mut responder, &mut experiment::NoEvents, None)
        .map_err(value_err)?;
    let out = to_py(py, &log)?;
    out.set_item("stats", to_py(py, &experiment::compute_stats(&log.records).ok())?)?;
    Ok(out)
}

/// Per-condition accuracy, mean response time and confusion for trial records.
#[pyfunction]
fn compute_stats<'py>(py: Python<'py>, records: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let records: Vec<TrialRecord> = from_py(records)?;
    let stats = experiment::compute_stats(&records).map_err(value_err)?;
    to_py(py, &stats)
}

#[pymodule]
pub fn edgesim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DeviceError", m.py().get_type::<DeviceError>())?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyDevice>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(surface_mm_per_step, m)?)?;
    m.add_function(wrap_pyfunction!(surface_steps_to_mm, m)?)?;
    m.add_function(wrap_pyfunction!(edge_effective_step_deg, m)?)?;
    m.add_function(wrap_pyfunction!(edge_cable_mm_per_step, m)?)?;
    m.add_function(wrap_pyfunction!(edge_net_force_n, m)?)?;
    m.add_function(wrap_pyfunction!(endurance_h, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(make_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(run_sim_session, m)?)?;
    m.add_function(wrap_pyfunction!(compute_stats, m)?)?;
    Ok(())
}
