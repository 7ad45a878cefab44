//! Python bindings: phantom, renderer, detectors, control law and closed-loop scans.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use usvs::control::{x_correction as core_x_correction, ScanEntry};
use usvs::detector::{Detection, GroundTruthDetector};
use usvs::harness::compute_metrics;
use usvs::renderer::GroundTruth;
use usvs::stream::{FrameMessage, WireMessage};
use usvs::{CnnDetector, ControlConfig, FrameGeometry, PhantomModel, ProbePose, VesselDetector};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Phantom", from_py_object)]
#[derive(Clone)]
struct PyPhantom {
    inner: PhantomModel,
}

#[pymethods]
impl PyPhantom {
    #[new]
    #[pyo3(signature = (rotation_deg = 0.0, straight = false))]
    fn new(rotation_deg: f64, straight: bool) -> PyResult<Self> {
        let base = if straight { PhantomModel::straight() } else { PhantomModel::default() };
        let inner = base.with_rotation(rotation_deg);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: PhantomModel::load(&path).map_err(value_err)? })
    }

    #[getter]
    fn length_mm(&self) -> f64 {
        self.inner.length_mm
    }

    #[getter]
    fn rotation_deg(&self) -> f64 {
        self.inner.rotation_z_deg
    }

    #[getter]
    fn stiffness_n_per_mm(&self) -> f64 {
        self.inner.stiffness_n_per_mm
    }

    fn centerline_at(&self, s: f64) -> PyResult<(f64, f64, f64)> {
        let p = self.inner.centerline_at(s).map_err(value_err)?;
        Ok((p.x, p.y, p.z))
    }

    fn contact_force(&self, x: f64, y: f64, z: f64) -> f64 {
        self.inner.contact_force(&ProbePose::new(x, y, z))
    }

    #[pyo3(signature = (height_mm = 3.0))]
    fn start_pose(&self, height_mm: f64) -> (f64, f64, f64) {
        let p = self.inner.start_pose(height_mm).position;
        (p.x, p.y, p.z)
    }

    fn to_config(&self) -> String {
        self.inner.to_config_string()
    }
}

#[pyclass(name = "Frame", skip_from_py_object)]
struct PyFrame {
    frame: usvs::UsFrame,
    truth: GroundTruth,
}

#[pymethods]
impl PyFrame {
    #[getter]
    fn rows(&self) -> usize {
        self.frame.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.frame.cols
    }

    #[getter]
    fn spacing_mm(&self) -> f64 {
        self.frame.spacing_mm
    }

    /// Row-major 8-bit pixels.
    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.frame.pixels)
    }

    /// Analytic ground truth for the pose the frame was rendered at.
    fn truth<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("vessel_visible", self.truth.vessel_visible)?;
        d.set_item("center_px", self.truth.center_px)?;
        d.set_item("lumen_fully_inside", self.truth.lumen_fully_inside)?;
        d.set_item("offset_mm", self.truth.offset_mm)?;
        Ok(d)
    }

    /// Wire encoding as a frame message.
    #[pyo3(signature = (seq = 0))]
    fn encode<'py>(&self, py: Python<'py>, seq: u32) -> PyResult<Bound<'py, PyBytes>> {
        let msg = FrameMessage::from_frame(&self.frame, seq).map_err(value_err)?;
        Ok(PyBytes::new(py, &msg.encode()))
    }
}

#[pyclass(name = "Renderer", skip_from_py_object)]
struct PyRenderer {
    inner: usvs::Renderer,
}

#[pymethods]
impl PyRenderer {
    #[new]
    fn new() -> Self {
        Self { inner: usvs::Renderer::new(FrameGeometry::default()) }
    }

    #[pyo3(signature = (phantom, x, y, z, seed = 0))]
    fn render(&self, phantom: &PyPhantom, x: f64, y: f64, z: f64, seed: u64) -> PyFrame {
        let (frame, truth) = self.inner.render(&phantom.inner, &ProbePose::new(x, y, z), seed);
        PyFrame { frame, truth }
    }
}

enum Backend {
    Oracle,
    Cnn(CnnDetector),
}

#[pyclass(name = "Detector", skip_from_py_object)]
struct PyDetector {
    backend: Backend,
}

impl PyDetector {
    fn as_dyn(&self) -> &dyn VesselDetector {
        match &self.backend {
            Backend::Oracle => &GroundTruthDetector,
            Backend::Cnn(d) => d,
        }
    }
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("vessel_present", d.vessel_present)?;
    out.set_item("presence_prob", d.presence_prob)?;
    out.set_item("center_px", d.center_px)?;
    out.set_item("center_mm_offset", d.center_mm_offset)?;
    Ok(out)
}

#[pymethods]
impl PyDetector {
    /// Detector that reads the analytic ground truth.
    #[staticmethod]
    fn oracle() -> Self {
        Self { backend: Backend::Oracle }
    }

    /// Loads trained classifier and regressor weights from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let det = CnnDetector::load(&dir, FrameGeometry::default()).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { backend: Backend::Cnn(det) })
    }

    /// Untrained networks with seeded initial weights.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn untrained(seed: u64) -> PyResult<Self> {
        let det = CnnDetector::untrained(FrameGeometry::default(), seed).map_err(value_err)?;
        Ok(Self { backend: Backend::Cnn(det) })
    }

    #[getter]
    fn is_oracle(&self) -> bool {
        matches!(self.backend, Backend::Oracle)
    }

    fn detect<'py>(&self, py: Python<'py>, frame: &PyFrame) -> PyResult<Bound<'py, PyDict>> {
        let d = self.as_dyn().detect(&frame.frame, &frame.truth).map_err(value_err)?;
        detection_dict(py, &d)
    }
}

/// Lateral end-effector command for a detection `offset_mm` off the image centre.
#[pyfunction]
fn x_correction(offset_mm: f64) -> PyResult<f64> {
    let g = FrameGeometry::default();
    let d = Detection::at(1.0, (g.center_col() + offset_mm / g.spacing_mm, 0.0), &g);
    core_x_correction(&d, &ControlConfig::default()).map_err(value_err)
}

#[pyclass(name = "ScanResult", skip_from_py_object)]
struct PyScanResult {
    log: usvs::ScanLog,
    margin_mm: f64,
}

fn entry_dict<'py>(py: Python<'py>, e: &ScanEntry) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let p = e.pose.position;
    d.set_item("step", e.step)?;
    d.set_item("time_ms", e.time_ms)?;
    d.set_item("x_mm", p.x)?;
    d.set_item("y_mm", p.y)?;
    d.set_item("z_mm", p.z)?;
    d.set_item("force_n", e.force_n)?;
    d.set_item("detected", e.detected)?;
    d.set_item("det_offset_mm", e.det_offset_mm)?;
    d.set_item("gt_offset_mm", e.gt_offset_mm)?;
    d.set_item("gt_lumen_fully_visible", e.gt_lumen_fully_visible)?;
    d.set_item("cmd_dx_mm", e.cmd_dx_mm)?;
    Ok(d)
}

#[pymethods]
impl PyScanResult {
    #[getter]
    fn stop_reason(&self) -> &'static str {
        self.log.stop_reason.as_str()
    }

    #[getter]
    fn distance_scanned_mm(&self) -> f64 {
        self.log.distance_scanned_mm
    }

    fn __len__(&self) -> usize {
        self.log.entries.len()
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.log.entries.iter().map(|e| entry_dict(py, e)).collect()
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let m = compute_metrics(&self.log, self.margin_mm).map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("pct_full_lumen_visible", m.pct_full_lumen_visible)?;
        d.set_item("mae_mm", m.mae_mm)?;
        d.set_item("max_mm", m.max_mm)?;
        d.set_item("margin_mm", m.margin_mm)?;
        d.set_item("frames_without_offset", m.frames_without_offset)?;
        Ok(d)
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.log.save_csv(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }
}

/// Closed-loop scan in simulation; the oracle detector is used when none is given.
#[pyfunction]
#[pyo3(signature = (phantom, detector = None, seed = 0, scan_length_mm = 140.0))]
fn run_scan(
    py: Python<'_>,
    phantom: &PyPhantom,
    detector: Option<PyRef<'_, PyDetector>>,
    seed: u64,
    scan_length_mm: f64,
) -> PyResult<PyScanResult> {
    let cfg = ControlConfig { scan_length_mm, ..ControlConfig::default() };
    cfg.validate().map_err(value_err)?;
    let renderer = usvs::Renderer::new(FrameGeometry::default());
    let det: &dyn VesselDetector = match &detector {
        Some(d) => d.as_dyn(),
        None => &GroundTruthDetector,
    };
    let ph = &phantom.inner;
    let log = py
        .detach(|| usvs::run_scan(ph, &cfg, det, &renderer, seed))
        .map_err(value_err)?;
    Ok(PyScanResult { log, margin_mm: cfg.margin_mm() })
}

#[pymodule]
fn usvs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyRenderer>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyScanResult>()?;
    m.add_function(wrap_pyfunction!(x_correction, m)?)?;
    m.add_function(wrap_pyfunction!(run_scan, m)?)?;
    Ok(())
}
