//! Python bindings: geometry, relations, metrics, the noise schedule, and the
//! train/evaluate pipeline driven by a TOML run configuration.

use std::path::PathBuf;

use layoutmm::cli::{self, RunConfig};
use layoutmm::diffusion::{self, NoiseSchedule};
use layoutmm::geometry::{self, BBox};
use layoutmm::layout::{self, Layout, LayoutElement, RelationMatrix};
use layoutmm::losses::{self, RelLossParams};
use layoutmm::{metrics, Error};
use pyo3::exceptions::{PyArithmeticError, PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Usage(_) | Error::InvalidConfig(_) => PyValueError::new_err(msg),
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::Json { .. } => PyOSError::new_err(msg),
        Error::NumericalFailure { .. } => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn bbox(b: (f64, f64, f64, f64)) -> BBox {
    BBox::new(b.0, b.1, b.2, b.3)
}

/// IoU of two `(x1, y1, x2, y2)` boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    geometry::iou(&bbox(a), &bbox(b))
}

/// Fraction of `inner` covered by `outer`.
#[pyfunction]
fn coverage(inner: (f64, f64, f64, f64), outer: (f64, f64, f64, f64)) -> f64 {
    geometry::coverage(&bbox(inner), &bbox(outer))
}

/// Size-relation logits `[smaller, equal, larger]` for a log-area ratio.
#[pyfunction]
#[pyo3(signature = (d, alpha = 0.1, tau = 0.6))]
fn size_logits(d: f64, alpha: f64, tau: f64) -> [f64; 3] {
    let p = RelLossParams { alpha_margin: alpha, tau_rel: tau, ..RelLossParams::default() };
    losses::size_logits(d, &p)
}

/// Fixed-capacity layout; elements are `(category, (cx, cy, w, h))`.
#[pyclass(name = "Layout", module = "layoutmm", from_py_object)]
#[derive(Clone)]
struct PyLayout {
    inner: Layout,
}

#[pymethods]
impl PyLayout {
    #[new]
    fn new(elements: Vec<(usize, [f64; 4])>, capacity: usize) -> PyResult<Self> {
        let els: Vec<LayoutElement> = elements.into_iter().map(|(c, b)| LayoutElement::new(c, b)).collect();
        Ok(Self { inner: Layout::from_elements(&els, capacity).map_err(to_py)? })
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    #[getter]
    fn num_valid(&self) -> usize {
        self.inner.num_valid()
    }

    fn elements(&self) -> Vec<(usize, [f64; 4])> {
        self.inner.iter_valid().map(|(_, e)| (e.category, e.bbox)).collect()
    }

    /// Pairwise and canvas relations of this layout.
    #[pyo3(signature = (alpha = layout::DEFAULT_MARGIN_ALPHA))]
    fn relations(&self, alpha: f64) -> PyRelations {
        PyRelations { inner: layout::extract_relations(&self.inner, alpha) }
    }

    /// Mean IoU over non-underlay pairs, or `None` with fewer than two.
    fn overlay(&self) -> Option<f64> {
        metrics::overlay(&self.inner, &cli::scheme())
    }

    /// `(loose, strict)` underlay effectiveness, or `None` without underlays.
    fn underlay_effectiveness(&self) -> Option<(f64, f64)> {
        metrics::underlay_effectiveness(&self.inner, &cli::scheme())
    }

    fn __len__(&self) -> usize {
        self.inner.num_valid()
    }

    fn __repr__(&self) -> String {
        format!("Layout(num_valid={}, capacity={})", self.inner.num_valid(), self.inner.capacity())
    }
}

/// Relation codes indexed `(i, j, channel)`; index 0 is the canvas.
#[pyclass(name = "RelationMatrix", module = "layoutmm", from_py_object)]
#[derive(Clone)]
struct PyRelations {
    inner: RelationMatrix,
}

#[pymethods]
impl PyRelations {
    #[new]
    fn new(num_slots: usize) -> Self {
        Self { inner: RelationMatrix::zeros(num_slots) }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn get(&self, i: usize, j: usize, channel: usize) -> PyResult<u8> {
        let d = self.inner.dim();
        if i >= d || j >= d || channel > 1 {
            return Err(PyIndexError::new_err(format!("({i}, {j}, {channel}) outside {d}x{d}x2")));
        }
        Ok(self.inner.get(i, j, channel))
    }

    /// Sets `(i, j)` and its mirrored entry `(j, i)`.
    fn set_pair(&mut self, i: usize, j: usize, channel: usize, code: u8) -> PyResult<()> {
        self.inner.set_pair(i, j, channel, code).map_err(to_py)
    }

    fn num_specified(&self) -> usize {
        self.inner.num_specified()
    }
}

/// Fraction of specified relations the layout does not satisfy.
#[pyfunction]
#[pyo3(signature = (layout, relations, alpha = layout::DEFAULT_MARGIN_ALPHA))]
fn violation_rate(layout: &PyLayout, relations: &PyRelations, alpha: f64) -> Option<f64> {
    metrics::violation_rate(&layout.inner, &relations.inner, alpha)
}

/// Linear β schedule.
#[pyclass(name = "NoiseSchedule", module = "layoutmm")]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps = 1000, beta_start = 1e-4, beta_end = 0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self { inner: diffusion::make_schedule(steps, beta_start, beta_end).map_err(to_py)? })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.steps() {
            return Err(PyIndexError::new_err(format!("t = {t} past {} steps", self.inner.steps())));
        }
        Ok(self.inner.alpha_bar(t))
    }
}

impl PySchedule {
    fn check(&self, t: usize) -> PyResult<()> {
        if t == 0 || t > self.inner.steps() {
            return Err(PyIndexError::new_err(format!("t = {t} outside 1..={}", self.inner.steps())));
        }
        Ok(())
    }
}

/// A run configuration and the pipeline stages that consume it.
#[pyclass(name = "Run", module = "layoutmm")]
struct PyRun {
    cfg: RunConfig,
}

#[pymethods]
impl PyRun {
    /// Parses TOML; `output_dir` overrides the configured one when given.
    #[new]
    #[pyo3(signature = (toml = "", output_dir = None))]
    fn new(toml: &str, output_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut cfg = RunConfig::from_toml(toml).map_err(to_py)?;
        if let Some(dir) = output_dir {
            cfg.output_dir = dir;
        }
        Ok(Self { cfg })
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.cfg.output_dir.clone()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.cfg.to_toml().map_err(to_py)
    }

    #[pyo3(signature = (force = false))]
    fn synth(&self, py: Python<'_>, force: bool) -> PyResult<()> {
        py.detach(|| cli::cmd_synth(&self.cfg, force)).map_err(to_py)
    }

    /// Pre-trains and returns the base checkpoint path.
    fn train(&self, py: Python<'_>) -> PyResult<PathBuf> {
        py.detach(|| cli::cmd_train(&self.cfg)).map_err(to_py)
    }

    /// Fine-tunes adapters on `base` and returns the adapter path.
    fn finetune(&self, py: Python<'_>, base: PathBuf) -> PyResult<PathBuf> {
        py.detach(|| cli::cmd_finetune(&self.cfg, &base)).map_err(to_py)
    }

    /// Evaluates on the test split; returns the report as a JSON string.
    #[pyo3(signature = (checkpoint, adapter = None, name = "report"))]
    fn evaluate(&self, py: Python<'_>, checkpoint: PathBuf, adapter: Option<PathBuf>, name: &str) -> PyResult<String> {
        let dir = py.detach(|| cli::cmd_eval(&self.cfg, &checkpoint, adapter.as_deref(), None, name)).map_err(to_py)?;
        let path = dir.join("report.json");
        std::fs::read_to_string(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))
    }
}

#[pymodule(name = "layoutmm")]
fn layoutmm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(size_logits, m)?)?;
    m.add_function(wrap_pyfunction!(violation_rate, m)?)?;
    m.add_class::<PyLayout>()?;
    m.add_class::<PyRelations>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyRun>()?;
    m.add("EXIT_USAGE", cli::EXIT_USAGE)?;
    m.add("EXIT_NUMERICAL", cli::EXIT_NUMERICAL)?;
    m.add("EXIT_IO", cli::EXIT_IO)?;
    Ok(())
}
