//! Python bindings: tensors, models, the label codec, cost reports, losses
//! and training.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use c3ae::codec::{self, make_bins};
use c3ae::config::{ModelKind, TrainConfig};
use c3ae::cost::{self, CostReport, ReportFormat};
use c3ae::data::{self, DatasetManifest, SynthSpec, DEFAULT_SCALES};
use c3ae::gradcheck as fd;
use c3ae::nn::{self, Architecture, ConcatMode, ModelGraph};
use c3ae::{loss, train, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::ChecksumMismatch { .. } | Error::BadMagic => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for c3ae::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "c3ae", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: c3ae::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: c3ae::Tensor::new(shape, data).py()?,
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Per-term loss breakdown.
#[pyclass(name = "LossReport", module = "c3ae", get_all)]
struct PyLossReport {
    kl: f64,
    l1_reg: f64,
    mae: f64,
    total: f64,
    alpha: f64,
    lambda_: f64,
}

#[pymethods]
impl PyLossReport {
    #[new]
    #[pyo3(signature = (kl, l1_reg, mae, alpha=loss::DEFAULT_ALPHA, lambda_=loss::DEFAULT_LAMBDA))]
    fn new(kl: f64, l1_reg: f64, mae: f64, alpha: f64, lambda_: f64) -> Self {
        let r = loss::LossReport::new(kl, l1_reg, mae, alpha, lambda_);
        PyLossReport {
            kl: r.kl,
            l1_reg: r.l1_reg,
            mae: r.mae,
            total: r.total,
            alpha,
            lambda_,
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "LossReport(kl={}, l1_reg={}, mae={}, total={})",
            self.kl, self.l1_reg, self.mae, self.total
        )
    }
}

fn architecture(arch: &str, concat: &str, se: bool, residual: bool) -> PyResult<Architecture> {
    let kind: ModelKind = arch.parse().py()?;
    Ok(Architecture {
        branches: if kind == ModelKind::Full { 3 } else { 1 },
        concat: concat.parse::<ConcatMode>().py()?,
        use_se: se,
        use_residual: residual,
        ..Architecture::plain()
    })
}

/// A compact age-estimation network with its weights.
#[pyclass(name = "Model", module = "c3ae", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelGraph,
}

#[pymethods]
impl PyModel {
    /// Builds and seeds a fresh model.
    #[new]
    #[pyo3(signature = (arch="plain", concat="flatten", se=false, residual=false, seed=0))]
    fn new(arch: &str, concat: &str, se: bool, residual: bool, seed: u64) -> PyResult<Self> {
        let mut inner = nn::build(&architecture(arch, concat, se, residual)?).py()?;
        inner
            .initialize(seed, codec::BinGrid::default_training().bins())
            .py()?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn from_bytes(bytes: &[u8]) -> PyResult<Self> {
        Ok(PyModel {
            inner: nn::deserialize(bytes).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| py_err(Error::Io { path, source: e }))?;
        Self::from_bytes(&bytes)
    }

    fn to_bytes(&self) -> Vec<u8> {
        nn::serialize(&self.inner)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, self.to_bytes()).map_err(|e| py_err(Error::Io { path, source: e }))
    }

    #[getter]
    fn branches(&self) -> usize {
        self.inner.branches()
    }

    #[getter]
    fn n_bins(&self) -> usize {
        self.inner.n_bins()
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().map(|(k, _)| k.to_string()).collect()
    }

    fn param(&self, name: &str) -> PyResult<PyTensor> {
        let t = self
            .inner
            .param(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))?;
        Ok(PyTensor { inner: t.clone() })
    }

    /// Inference on one input tensor per branch; returns `(ages, distribution)`.
    fn infer(&self, inputs: Vec<PyTensor>) -> PyResult<(Vec<f64>, PyTensor)> {
        let inputs: Vec<c3ae::Tensor> = inputs.into_iter().map(|t| t.inner).collect();
        let p = self.inner.infer(&inputs).py()?;
        Ok((
            p.age,
            PyTensor {
                inner: p.distribution,
            },
        ))
    }

    /// Predicts from PPM files: one per branch, or one with `auto_crop`.
    #[pyo3(signature = (paths, auto_crop=false))]
    fn predict(&self, paths: Vec<PathBuf>, auto_crop: bool) -> PyResult<(f64, Vec<f64>)> {
        let images = paths
            .iter()
            .map(data::load_ppm)
            .collect::<c3ae::Result<Vec<_>>>()
            .py()?;
        let branches = self.inner.branches();
        let inputs = if auto_crop {
            match images.as_slice() {
                [one] => data::model_inputs(one, None, branches, DEFAULT_SCALES).py()?,
                _ => return Err(PyValueError::new_err("auto_crop takes exactly one image")),
            }
        } else if images.len() == branches {
            images
                .iter()
                .map(|img| data::square_crop(img, data::crop::image_center(img)?, 1.0))
                .collect::<c3ae::Result<Vec<_>>>()
                .py()?
        } else {
            return Err(PyValueError::new_err(format!(
                "model has {branches} branches but {} images were given; use auto_crop=True with one image",
                images.len()
            )));
        };
        let p = self.inner.infer(&inputs).py()?;
        Ok((p.age[0], p.distribution.into_data()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(branches={}, params={})",
            self.inner.branches(),
            self.inner.stored_values()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (age, k=10.0, min=0.0, max=110.0))]
fn encode(age: f64, k: f64, min: f64, max: f64) -> PyResult<Vec<f64>> {
    let grid = make_bins(min, max, k).py()?;
    Ok(codec::encode(age, &grid).py()?.weights)
}

#[pyfunction]
#[pyo3(signature = (weights, k=10.0, min=0.0, max=110.0))]
fn decode(weights: Vec<f64>, k: f64, min: f64, max: f64) -> PyResult<f64> {
    let grid = make_bins(min, max, k).py()?;
    codec::decode(&weights, &grid).py()
}

#[pyfunction]
fn bins(min: f64, max: f64, k: f64) -> PyResult<Vec<f64>> {
    Ok(make_bins(min, max, k).py()?.bins().to_vec())
}

#[pyfunction]
fn reduction_ratio(m: f64, n: f64, m_hat: f64, n_hat: f64, d_k: f64) -> PyResult<f64> {
    cost::depthwise_reduction_ratio(m, n, m_hat, n_hat, d_k).py()
}

/// Rendered cost report, `format` is `text` or `csv`.
#[pyfunction]
#[pyo3(signature = (arch="plain", concat="flatten", se=false, residual=false, format="text"))]
fn analyze(arch: &str, concat: &str, se: bool, residual: bool, format: &str) -> PyResult<String> {
    let graph = nn::build(&architecture(arch, concat, se, residual)?).py()?;
    let format: ReportFormat = format.parse().py()?;
    Ok(cost::render_report(&CostReport::analyze(&graph).py()?, format))
}

/// `(layer, params)` per report row.
#[pyfunction]
#[pyo3(signature = (arch="plain", concat="flatten", se=false, residual=false))]
fn param_counts(arch: &str, concat: &str, se: bool, residual: bool) -> PyResult<Vec<(String, usize)>> {
    let graph = nn::build(&architecture(arch, concat, se, residual)?).py()?;
    let report = CostReport::analyze(&graph).py()?;
    Ok(report.rows.into_iter().map(|r| (r.layer, r.params)).collect())
}

#[pyfunction]
fn kl_divergence(target: PyTensor, predicted: PyTensor) -> PyResult<f64> {
    loss::kl_divergence(&target.inner, &predicted.inner).py()
}

/// `(op, probes, max_rel_error, passed)` per finite-difference check.
#[pyfunction]
#[pyo3(signature = (seed=7, probes=fd::MIN_PROBES))]
fn gradcheck(py: Python<'_>, seed: u64, probes: usize) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let results = py.detach(|| fd::run_suite(seed, probes)).py()?;
    Ok(results
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.probes, r.max_rel_error, passed)
        })
        .collect())
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, count=50, seed=0))]
fn synth(out: PathBuf, count: usize, seed: u64) -> PyResult<PathBuf> {
    let spec = SynthSpec {
        count,
        seed,
        ..Default::default()
    };
    data::write_synthetic(&out, &spec).py()?;
    Ok(out.join("manifest.csv"))
}

/// Trains from `key = value` config text and a manifest path. Returns the
/// model and the log as `(epoch, kl, mae, total, lr, val_mae)` rows.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn train_model(
    py: Python<'_>,
    config: &str,
    manifest: PathBuf,
) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64, f64, Option<f64>)>)> {
    let cfg = TrainConfig::parse(config).py()?;
    let outcome = py
        .detach(|| -> c3ae::Result<_> {
            let m = DatasetManifest::load(&manifest)?;
            m.check_ages(&cfg.grid()?)?;
            let samples = data::load_samples(&m, cfg.architecture()?.branches, cfg.crop_scales)?;
            let split = m.split(cfg.val_fraction, cfg.seed)?;
            let pick =
                |idx: &[usize]| -> Vec<data::Sample> { idx.iter().map(|&i| samples[i].clone()).collect() };
            train::train(&cfg, &pick(&split.train), &pick(&split.val))
        })
        .py()?;
    let log = outcome
        .log
        .iter()
        .map(|e| (e.epoch, e.kl, e.mae, e.total, e.lr, e.val_mae))
        .collect();
    Ok((PyModel { inner: outcome.model }, log))
}

#[pymodule]
#[pyo3(name = "c3ae")]
fn c3ae_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLossReport>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(bins, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(param_counts, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add("DEFAULT_ALPHA", loss::DEFAULT_ALPHA)?;
    m.add("DEFAULT_LAMBDA", loss::DEFAULT_LAMBDA)?;
    Ok(())
}
