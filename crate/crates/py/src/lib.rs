//! Python bindings. Arrays cross the boundary as flat row-major lists plus
//! a shape.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lapirn::diffeo::{self, TransformKind};
use lapirn::engine::{self, TrainConfig};
use lapirn::gradcheck::{check_all, GradCheckConfig};
use lapirn::io::{self, Tensor};
use lapirn::{metrics, pyramid, similarity, synth};

fn to_py(e: lapirn::Error) -> PyErr {
    match e {
        lapirn::Error::Numerical(m) => PyArithmeticError::new_err(m),
        lapirn::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense float array, channels first.
#[pyclass(name = "Field", module = "lapirn", skip_from_py_object)]
#[derive(Clone)]
pub struct PyField {
    inner: lapirn::Field,
}

#[pymethods]
impl PyField {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: lapirn::Field::new(shape, data).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(PyValueError::new_err(format!("extents must be positive, got {shape:?}")));
        }
        Ok(Self {
            inner: lapirn::Field::zeros(&shape),
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn max_abs(&self) -> f32 {
        self.inner.max_abs()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: PyRef<'_, PyField>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Field(shape={:?})", self.inner.shape())
    }
}

impl From<lapirn::Field> for PyField {
    fn from(inner: lapirn::Field) -> Self {
        Self { inner }
    }
}

/// Integer segmentation map.
#[pyclass(name = "LabelMap", module = "lapirn", skip_from_py_object)]
#[derive(Clone)]
pub struct PyLabelMap {
    inner: lapirn::LabelMap,
}

#[pymethods]
impl PyLabelMap {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<u16>) -> PyResult<Self> {
        Ok(Self {
            inner: lapirn::LabelMap::new(shape, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<u16> {
        self.inner.data().to_vec()
    }

    fn labels(&self) -> Vec<u16> {
        self.inner.labels()
    }

    fn __eq__(&self, other: PyRef<'_, PyLabelMap>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("LabelMap(shape={:?})", self.inner.shape())
    }
}

impl From<lapirn::LabelMap> for PyLabelMap {
    fn from(inner: lapirn::LabelMap) -> Self {
        Self { inner }
    }
}

fn parse_mode(mode: &str) -> PyResult<TransformKind> {
    mode.parse().map_err(to_py)
}

/// Pyramid levels, coarsest first.
#[pyfunction]
fn build_pyramid(img: PyRef<'_, PyField>, levels: usize) -> PyResult<Vec<PyField>> {
    let p = pyramid::build_pyramid(&img.inner, levels).map_err(to_py)?;
    Ok(p.levels.into_iter().map(PyField::from).collect())
}

#[pyfunction]
fn warp(img: PyRef<'_, PyField>, disp: PyRef<'_, PyField>) -> PyResult<PyField> {
    pyramid::warp(&img.inner, &disp.inner).map(PyField::from).map_err(to_py)
}

#[pyfunction]
fn upsample_disp(v: PyRef<'_, PyField>) -> PyResult<PyField> {
    pyramid::upsample_disp(&v.inner).map(PyField::from).map_err(to_py)
}

/// Displacement obtained by scaling and squaring `v`.
#[pyfunction]
#[pyo3(signature = (v, steps = diffeo::DEFAULT_TIME_STEPS))]
fn integrate(v: PyRef<'_, PyField>, steps: usize) -> PyResult<PyField> {
    diffeo::integrate(&v.inner, steps).map(|t| t.disp.into()).map_err(to_py)
}

#[pyfunction]
fn compose(a: PyRef<'_, PyField>, b: PyRef<'_, PyField>) -> PyResult<PyField> {
    diffeo::compose(&a.inner, &b.inner).map(PyField::from).map_err(to_py)
}

#[pyfunction]
fn jacobian_det(disp: PyRef<'_, PyField>) -> PyResult<PyField> {
    let t = diffeo::Transform::displacement(disp.inner.clone()).map_err(to_py)?;
    diffeo::jacobian_det(&t).map(PyField::from).map_err(to_py)
}

/// `(percent of non-positive determinants, determinant std)`.
#[pyfunction]
fn folding_stats(det: PyRef<'_, PyField>) -> (f64, f64) {
    let s = diffeo::folding_stats(&det.inner);
    (s.pct_nonpositive, s.std)
}

#[pyfunction]
#[pyo3(signature = (fixed, moving, window, eps = 1e-5))]
fn local_ncc(fixed: PyRef<'_, PyField>, moving: PyRef<'_, PyField>, window: usize, eps: f32) -> PyResult<f32> {
    similarity::local_ncc_value(&fixed.inner, &moving.inner, window, eps).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (a, b, labels = None))]
fn dice(a: PyRef<'_, PyLabelMap>, b: PyRef<'_, PyLabelMap>, labels: Option<Vec<u16>>) -> PyResult<BTreeMap<u16, f64>> {
    let labels = labels.unwrap_or_else(|| metrics::foreground_labels(&a.inner, &b.inner));
    metrics::dice(&a.inner, &b.inner, &labels).map_err(to_py)
}

#[pyfunction]
fn warp_labels(seg: PyRef<'_, PyLabelMap>, disp: PyRef<'_, PyField>) -> PyResult<PyLabelMap> {
    let t = diffeo::Transform::displacement(disp.inner.clone()).map_err(to_py)?;
    metrics::warp_labels(&seg.inner, &t).map(PyLabelMap::from).map_err(to_py)
}

/// Mean volume ratio over labels, or `None` when no label qualifies.
#[pyfunction]
#[pyo3(signature = (moving, warped, labels = None))]
fn topology_change(
    moving: PyRef<'_, PyLabelMap>,
    warped: PyRef<'_, PyLabelMap>,
    labels: Option<Vec<u16>>,
) -> PyResult<Option<f64>> {
    let labels = labels.unwrap_or_else(|| {
        let mut l = moving.inner.labels();
        l.retain(|&x| x != metrics::BACKGROUND);
        l
    });
    metrics::topology_change(&moving.inner, &warped.inner, &labels)
        .map(|t| t.value)
        .map_err(to_py)
}

#[pyfunction]
fn synth_pair<'py>(py: Python<'py>, seed: u64, size: Vec<usize>, scale: f32) -> PyResult<Bound<'py, PyDict>> {
    let p = synth::synth_pair(seed, &size, scale).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("fixed", PyField::from(p.fixed))?;
    d.set_item("moving", PyField::from(p.moving))?;
    d.set_item("velocity", PyField::from(p.velocity))?;
    d.set_item("disp_true", PyField::from(p.truth.disp))?;
    d.set_item("seg_fixed", PyLabelMap::from(p.seg_fixed))?;
    d.set_item("seg_moving", PyLabelMap::from(p.seg_moving))?;
    Ok(d)
}

/// Direct optimization of the velocity pyramid for one pair.
#[pyfunction]
#[pyo3(signature = (fixed, moving, mode = "diffeo", levels = 3, iters = 500, lr = 1e-4, lam = None, time_steps = 7))]
#[allow(clippy::too_many_arguments)]
fn register_direct<'py>(
    py: Python<'py>,
    fixed: PyRef<'_, PyField>,
    moving: PyRef<'_, PyField>,
    mode: &str,
    levels: usize,
    iters: usize,
    lr: f32,
    lam: Option<f32>,
    time_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = TrainConfig::for_mode(parse_mode(mode)?);
    cfg.levels = levels;
    cfg.steps_per_level = iters;
    cfg.lr = lr;
    cfg.time_steps = time_steps;
    if let Some(l) = lam {
        cfg.lambda = l;
    }
    let (f, m) = (fixed.inner.clone(), moving.inner.clone());
    let out = py.detach(move || engine::register_direct(&f, &m, &cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("disp", PyField::from(out.transform.disp))?;
    d.set_item("velocity", PyField::from(out.velocity))?;
    d.set_item("warped", PyField::from(out.warped))?;
    d.set_item("pct_folding", out.report.pct_folding)?;
    d.set_item("jac_std", out.report.jac_std)?;
    d.set_item("seconds", out.report.seconds)?;
    d.set_item("final_loss", out.log.rows.last().map(|r| r.loss))?;
    Ok(d)
}

/// Reads an LPT1 file as a `Field` or `LabelMap`.
#[pyfunction]
fn read_tensor(py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
    match io::load_tensor(path).map_err(to_py)? {
        Tensor::F32(f) => Ok(Py::new(py, PyField::from(f))?.into_any()),
        Tensor::U16(l) => Ok(Py::new(py, PyLabelMap::from(l))?.into_any()),
    }
}

#[pyfunction]
fn write_tensor(path: &str, obj: &Bound<'_, PyAny>) -> PyResult<()> {
    let t = if let Ok(f) = obj.cast::<PyField>() {
        Tensor::F32(f.borrow().inner.clone())
    } else if let Ok(l) = obj.cast::<PyLabelMap>() {
        Tensor::U16(l.borrow().inner.clone())
    } else {
        return Err(PyValueError::new_err("expected a Field or LabelMap"));
    };
    io::save_tensor(path, &t).map_err(to_py)
}

/// `(op name, passed)` for every differentiable op.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, bool)>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    Ok(check_all(&cfg)
        .map_err(to_py)?
        .iter()
        .map(|r| (r.kind.name().to_string(), r.passed()))
        .collect())
}

#[pymodule]
#[pyo3(name = "lapirn")]
fn lapirn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyField>()?;
    m.add_class::<PyLabelMap>()?;
    m.add_function(wrap_pyfunction!(build_pyramid, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_disp, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian_det, m)?)?;
    m.add_function(wrap_pyfunction!(folding_stats, m)?)?;
    m.add_function(wrap_pyfunction!(local_ncc, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(warp_labels, m)?)?;
    m.add_function(wrap_pyfunction!(topology_change, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pair, m)?)?;
    m.add_function(wrap_pyfunction!(register_direct, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
