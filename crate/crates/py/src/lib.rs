//! Python bindings. Tensors cross the boundary as flat `float` lists plus a
//! shape; structured reports come back as plain dicts.

use std::path::PathBuf;

use hbl_core::diagnostics;
use hbl_core::hadamard::{hadamard_forward, HadamardPlan};
use hbl_core::kernels;
use hbl_core::quant::{self, ActBits, QuantConfig};
use hbl_core::toytrain::{self, Checkpoint, Stage, StageOptions, TrainConfig};
use hbl_core::{Error, Tensor};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

pyo3::create_exception!(hbl, HblError, PyValueError);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => HblError::new_err(other.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "Tensor", module = "hbl", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::from_vec(&shape, data).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.data()
    }

    fn allclose(&self, other: &PyTensor, atol: f32) -> PyResult<bool> {
        self.inner.allclose(&other.inner, atol).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "TernaryWeight", module = "hbl", skip_from_py_object)]
pub struct PyTernaryWeight {
    inner: quant::TernaryWeight,
}

#[pymethods]
impl PyTernaryWeight {
    #[getter]
    fn alpha(&self) -> f32 {
        self.inner.alpha
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows(), self.inner.cols())
    }

    /// Values in {-1, 0, 1}.
    fn trits(&self) -> PyTensor {
        let data = self.inner.trits().into_iter().map(f32::from).collect();
        PyTensor {
            inner: Tensor::from_vec(&[self.inner.rows(), self.inner.cols()], data).unwrap(),
        }
    }

    fn packed(&self) -> Vec<u8> {
        self.inner.packed.bytes().to_vec()
    }

    fn dequantize(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.dequantize(),
        }
    }
}

#[pyclass(name = "QuantizedActivation", module = "hbl", skip_from_py_object)]
pub struct PyQuantizedActivation {
    inner: quant::QuantizedActivation,
}

#[pymethods]
impl PyQuantizedActivation {
    /// Stored codes; KV codes are the raw unsigned values.
    fn codes(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.raw_codes(),
        }
    }

    #[getter]
    fn scales(&self) -> Vec<f32> {
        self.inner.scales.clone()
    }

    #[getter]
    fn token_bits(&self) -> Vec<u32> {
        self.inner.token_bits.clone()
    }

    fn step(&self, token: usize) -> PyResult<f32> {
        if token >= self.inner.n_tokens {
            return Err(PyValueError::new_err(format!("token {token} out of range")));
        }
        Ok(self.inner.step(token))
    }

    fn dequantize(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.dequantize(),
        }
    }
}

#[pyfunction]
fn hadamard(x: &PyTensor) -> PyResult<PyTensor> {
    let plan = HadamardPlan::new(x.inner.last_dim()).map_err(err)?;
    Ok(PyTensor {
        inner: hadamard_forward(&x.inner, &plan).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (x, a, b))]
fn round_clip(x: &PyTensor, a: i32, b: i32) -> PyResult<PyTensor> {
    if a >= b {
        return Err(PyValueError::new_err("round_clip needs a < b"));
    }
    Ok(PyTensor {
        inner: quant::round_clip(&x.inner, a, b),
    })
}

#[pyfunction]
fn quantize_weight(w: &PyTensor) -> PyResult<PyTernaryWeight> {
    Ok(PyTernaryWeight {
        inner: quant::quantize_weight(&w.inner, &QuantConfig::default()).map_err(err)?,
    })
}

/// Per-token INT8 absmax (`bits=8`) or INT4 absmean (`bits=4`).
#[pyfunction]
fn quantize_act(x: &PyTensor, bits: u32) -> PyResult<PyQuantizedActivation> {
    let mode = match bits {
        8 => ActBits::A8,
        4 => ActBits::A4,
        b => return Err(err(Error::BadBitWidth(b))),
    };
    Ok(PyQuantizedActivation {
        inner: mode.quantize(&x.inner, &QuantConfig::default()),
    })
}

#[pyfunction]
#[pyo3(signature = (x, bits, bos_mask=None))]
fn quantize_kv(
    x: &PyTensor,
    bits: u32,
    bos_mask: Option<Vec<bool>>,
) -> PyResult<PyQuantizedActivation> {
    let mask = bos_mask.unwrap_or_default();
    Ok(PyQuantizedActivation {
        inner: quant::quantize_kv_unsigned(&x.inner, bits, &mask, &QuantConfig::default())
            .map_err(err)?,
    })
}

/// `[tokens, out]` product of ternary weights and quantized activations,
/// accumulated in integers.
#[pyfunction]
fn gemm_ternary(w: &PyTernaryWeight, x: &PyQuantizedActivation) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: kernels::gemm_ternary_int(&w.inner.packed, &x.inner, w.inner.alpha).map_err(err)?,
    })
}

#[pyfunction]
fn gemm_reference(w: &PyTensor, x: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: kernels::gemm_reference(&w.inner, &x.inner).map_err(err)?,
    })
}

#[pyfunction]
fn dist_stats(py: Python<'_>, x: &PyTensor) -> PyResult<Py<PyAny>> {
    to_py(py, &diagnostics::dist_stats(&x.inner).map_err(err)?)
}

#[pyfunction]
fn rotate_compare(py: Python<'_>, x: &PyTensor, bits: u32) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &diagnostics::rotate_compare(&x.inner, bits).map_err(err)?,
    )
}

#[pyfunction]
fn histogram(py: Python<'_>, x: &PyTensor, bins: usize, min: f32, max: f32) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &diagnostics::histogram(&x.inner, bins, min, max).map_err(err)?,
    )
}

/// Default training configuration as a dict.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &TrainConfig::default())
}

fn parse_config(config: &str) -> PyResult<TrainConfig> {
    let cfg: TrainConfig = serde_json::from_str(config).map_err(|e| err(e.into()))?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct StageReport<'a> {
    stage: Stage,
    step: usize,
    final_loss: Option<f32>,
    diverged: Option<toytrain::Divergence>,
    curve: &'a [toytrain::LossPoint],
}

/// Runs one training stage. `config` is the JSON text of a training config;
/// the checkpoint is written to `out` when given.
#[pyfunction]
#[pyo3(signature = (config, stage, resume=None, out=None))]
fn train_stage(
    py: Python<'_>,
    config: &str,
    stage: &str,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let stage = match stage {
        "a8" => Stage::A8,
        "a4" => Stage::A4,
        s => return Err(PyValueError::new_err(format!("unknown stage {s:?}"))),
    };
    let resume = resume.map(Checkpoint::load).transpose().map_err(err)?;
    let run = toytrain::train_stage(&cfg, stage, resume, StageOptions::default()).map_err(err)?;
    if let Some(dir) = out {
        run.checkpoint.save(dir).map_err(err)?;
    }
    to_py(
        py,
        &StageReport {
            stage,
            step: run.checkpoint.step,
            final_loss: run.final_loss(),
            diverged: run.diverged,
            curve: &run.curve,
        },
    )
}

#[pyfunction]
fn run_ablation(py: Python<'_>, config: &str) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let report = toytrain::run_ablation(&cfg, &toytrain::VARIANTS).map_err(err)?;
    to_py(py, &report)
}

#[pymodule]
fn hbl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HblError", m.py().get_type::<HblError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTernaryWeight>()?;
    m.add_class::<PyQuantizedActivation>()?;
    m.add_function(wrap_pyfunction!(hadamard, m)?)?;
    m.add_function(wrap_pyfunction!(round_clip, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_weight, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_act, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_kv, m)?)?;
    m.add_function(wrap_pyfunction!(gemm_ternary, m)?)?;
    m.add_function(wrap_pyfunction!(gemm_reference, m)?)?;
    m.add_function(wrap_pyfunction!(dist_stats, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_compare, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    Ok(())
}
