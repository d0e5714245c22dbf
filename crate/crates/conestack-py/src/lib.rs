//! Python bindings: the simulation, replay and evaluation entry points plus
//! the core pose/angle primitives. Structured data crosses the boundary as
//! JSON/TOML strings, matching the CLI file formats.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use conestack::config::ScenarioConfig;
use conestack::geom::Rng;
use conestack::lidar::LidarPipelineParams;
use conestack::log::{from_jsonl, to_jsonl};
use conestack::sim::{replay_estimators, run_simulation};
use conestack::track::TrackSpec;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_config(config_toml: Option<&str>) -> PyResult<ScenarioConfig> {
    match config_toml {
        Some(text) => {
            ScenarioConfig::from_toml_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
        }
        None => Ok(ScenarioConfig::default()),
    }
}

/// Wrap an angle to (-pi, pi].
#[pyfunction]
fn wrap_angle(a: f64) -> PyResult<f64> {
    conestack::geom::wrap_angle(a).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// An SE(2) pose (x, y, heading), heading kept in (-pi, pi].
#[pyclass(name = "Pose2D", from_py_object)]
#[derive(Clone)]
struct PyPose2D {
    inner: conestack::geom::Pose2D,
}

#[pymethods]
impl PyPose2D {
    #[new]
    fn new(x: f64, y: f64, theta: f64) -> PyResult<Self> {
        Ok(PyPose2D {
            inner: conestack::geom::Pose2D::new(x, y, theta)
                .map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    fn compose(&self, other: &PyPose2D) -> PyPose2D {
        PyPose2D {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> PyPose2D {
        PyPose2D {
            inner: self.inner.inverse(),
        }
    }

    fn to_world(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.inner.to_world(nalgebra::Vector2::new(x, y));
        (p.x, p.y)
    }

    fn to_body(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.inner.to_body(nalgebra::Vector2::new(x, y));
        (p.x, p.y)
    }

    fn __repr__(&self) -> String {
        format!(
            "Pose2D(x={}, y={}, theta={})",
            self.inner.x, self.inner.y, self.inner.theta
        )
    }
}

/// The committed default scenario as a TOML string.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ScenarioConfig::default().to_toml_string().map_err(err)
}

/// Generate the ground-truth track for a seed; returns track JSON.
#[pyfunction]
#[pyo3(signature = (seed, config_toml=None))]
fn generate_track(seed: u64, config_toml: Option<&str>) -> PyResult<String> {
    let mut cfg = parse_config(config_toml)?;
    cfg.seed = seed;
    let mut rng = Rng::derive(cfg.seed, 1);
    let track = conestack::track::generate_track(&mut rng, &cfg.track).map_err(err)?;
    serde_json::to_string(&track).map_err(err)
}

/// Run the closed-loop scenario; returns a dict with the JSONL log, the
/// track JSON, and run statistics.
#[pyfunction]
#[pyo3(signature = (config_toml=None))]
fn simulate(py: Python<'_>, config_toml: Option<&str>) -> PyResult<Py<PyDict>> {
    let cfg = parse_config(config_toml)?;
    let out = run_simulation(&cfg).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("log", to_jsonl(&out.events).map_err(err)?)?;
    dict.set_item("track", serde_json::to_string(&out.track).map_err(err)?)?;
    dict.set_item("real_time_factor", out.stats.real_time_factor)?;
    dict.set_item("estimator_wall_s", out.stats.estimator_wall_s)?;
    dict.set_item("gss_nis_mean", out.stats.gss_nis_mean)?;
    Ok(dict.into())
}

/// Re-run the estimators over a recorded JSONL log; returns the replayed
/// log (bit-identical to the original for the same config).
#[pyfunction]
#[pyo3(signature = (log_jsonl, config_toml=None))]
fn replay(log_jsonl: &str, config_toml: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config_toml)?;
    let events = from_jsonl(log_jsonl).map_err(err)?;
    let (out, _) = replay_estimators(&events, &cfg).map_err(err)?;
    to_jsonl(&out).map_err(err)
}

/// Evaluate a log against a track; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (log_jsonl, track_json, config_toml=None))]
fn evaluate(log_jsonl: &str, track_json: &str, config_toml: Option<&str>) -> PyResult<String> {
    let events = from_jsonl(log_jsonl).map_err(err)?;
    let track: TrackSpec = serde_json::from_str(track_json).map_err(err)?;
    let script = match config_toml {
        Some(_) => parse_config(config_toml)?.failures,
        None => Default::default(),
    };
    let report = conestack::eval::evaluate(&events, &track, &script, None).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// Export one stream of a JSONL log as CSV.
#[pyfunction]
fn stream_csv(log_jsonl: &str, stream: &str) -> PyResult<String> {
    let events = from_jsonl(log_jsonl).map_err(err)?;
    conestack::eval::stream_to_csv(&events, stream)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Color probabilities [blue, yellow, orange, unknown] from a vertical
/// intensity profile of a LiDAR cone candidate.
#[pyfunction]
fn classify_cone_color(profile: Vec<f64>, n_points: usize) -> PyResult<[f64; 4]> {
    conestack::lidar::classify_color(&profile, n_points, &LidarPipelineParams::default())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn conestack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose2D>()?;
    m.add_function(wrap_pyfunction!(wrap_angle, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_track, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(stream_csv, m)?)?;
    m.add_function(wrap_pyfunction!(classify_cone_color, m)?)?;
    Ok(())
}
