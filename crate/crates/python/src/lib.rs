//! Python bindings: tensors, the stylization model, cost sweeps, the
//! verification suites and the overfit check.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use axial_style::attention::{amsa_flops, msa_grid_flops, AmsaVariant};
use axial_style::codec::{ppm, CodecConfig};
use axial_style::dit::DitConfig;
use axial_style::trainer::{self, TrainConfig};
use axial_style::verify::{self, Suite};
use axial_style::{bench, Error};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io(_) => PyOSError::new_err(msg),
        Error::NonFinite { .. } | Error::Divergence { .. } => PyArithmeticError::new_err(msg),
        Error::Shape { .. } | Error::Axis { .. } | Error::Config(_) | Error::Format(_) => PyValueError::new_err(msg),
        Error::Contract(_) | Error::Determinism { .. } | Error::Accounting(_) => PyRuntimeError::new_err(msg),
    }
}

fn variant(name: &str) -> PyResult<AmsaVariant> {
    name.parse().map_err(py_err)
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", unsendable)]
pub struct PyTensor {
    inner: axial_style::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: axial_style::Tensor::new(data, &shape).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn uniform(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Self {
        PyTensor {
            inner: axial_style::Rng::new(seed).uniform_tensor(&shape, lo, hi),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Codec plus transformer with seeded random or checkpointed weights.
#[pyclass(name = "Model", unsendable)]
pub struct PyModel {
    inner: axial_style::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0, embed_dim=16, heads=2, base_channels=4, variant="standard", unimodal=false, interaction=true))]
    fn new(
        seed: u64,
        embed_dim: usize,
        heads: usize,
        base_channels: usize,
        variant: &str,
        unimodal: bool,
        interaction: bool,
    ) -> PyResult<Self> {
        let dit = DitConfig {
            embed_dim,
            heads,
            variant: self::variant(variant)?,
            unimodal,
            interaction_enabled: interaction,
            ..DitConfig::default()
        };
        let codec = CodecConfig {
            base_channels,
            embed_dim,
        };
        Ok(PyModel {
            inner: axial_style::Model::init(dit, codec, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: axial_style::Model::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// `content: [T, 3, H, W]`, `style: [1, 3, H, W]`; returns raw pixels.
    fn stylize(&self, content: &PyTensor, style: &PyTensor) -> PyResult<PyTensor> {
        let out = self.inner.stylize(&content.inner, &style.inner).map_err(py_err)?;
        Ok(PyTensor {
            inner: out.images.detach(),
        })
    }

    fn parameter_count(&self) -> usize {
        self.inner.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[pyfunction]
fn read_ppm(path: PathBuf) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: ppm::read_ppm(&path).map_err(py_err)?,
    })
}

#[pyfunction]
fn write_ppm(path: PathBuf, image: &PyTensor) -> PyResult<()> {
    ppm::write_ppm(&path, &image.inner).map_err(py_err)
}

/// `(score, projection)` FLOPs of full attention over an `h x w` grid.
#[pyfunction]
#[pyo3(signature = (h, w, d=512, heads=8, t=1))]
fn msa_cost(h: u64, w: u64, d: u64, heads: u64, t: u64) -> (u64, u64) {
    let f = msa_grid_flops(t, h, w, d, heads);
    (f.score, f.projection)
}

/// `(score, projection)` FLOPs of axial attention over an `h x w` grid.
#[pyfunction]
#[pyo3(signature = (h, w, d=512, heads=8, t=1, t_kv=1, variant="standard"))]
fn amsa_cost(h: u64, w: u64, d: u64, heads: u64, t: u64, t_kv: u64, variant: &str) -> PyResult<(u64, u64)> {
    let f = amsa_flops(t, t_kv, h, w, d, heads, self::variant(variant)?);
    Ok((f.score, f.projection))
}

/// `(side, msa score, amsa score, ratio)` for each square grid side.
#[pyfunction]
#[pyo3(signature = (sides, d=512, heads=8, variant="standard"))]
fn sweep(sides: Vec<usize>, d: usize, heads: usize, variant: &str) -> PyResult<Vec<(usize, u64, u64, f64)>> {
    let grid: Vec<(usize, usize)> = sides.iter().map(|&s| (s, s)).collect();
    let rows = bench::sweep(&grid, 1, d, heads, self::variant(variant)?).map_err(py_err)?;
    Ok(rows
        .iter()
        .map(|r| (r.dims.h, r.msa.score_flops, r.amsa.score_flops, r.score_ratio))
        .collect())
}

/// `[(check, value, tolerance, passed)]` for one suite.
#[pyfunction]
#[pyo3(signature = (suite, seed=0))]
fn run_suite(suite: &str, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let suite: Suite = suite.parse().map_err(py_err)?;
    let report = verify::run(suite, seed).map_err(py_err)?;
    Ok(report
        .checks
        .into_iter()
        .map(|c| (c.name, c.value, c.tolerance, c.passed))
        .collect())
}

/// `(initial_loss, final_loss, ratio, encoder_unchanged)`.
#[pyfunction]
#[pyo3(signature = (seed=0, steps=200))]
fn overfit_check(seed: u64, steps: usize) -> PyResult<(f64, f64, f64, bool)> {
    let cfg = TrainConfig {
        seed,
        steps,
        ..TrainConfig::default()
    };
    let (r, _) = trainer::overfit_check(&cfg).map_err(py_err)?;
    Ok((r.initial_loss, r.final_loss, r.ratio, r.encoder_unchanged))
}

#[pymodule]
fn axial_style_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(write_ppm, m)?)?;
    m.add_function(wrap_pyfunction!(msa_cost, m)?)?;
    m.add_function(wrap_pyfunction!(amsa_cost, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(overfit_check, m)?)?;
    Ok(())
}
