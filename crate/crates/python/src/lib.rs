//! Python bindings: feature maps, shift operators, networks, training,
//! gradient checks, metrics and PGM I/O.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use opkernel::checkpoint::{Checkpoint, RngDescriptor};
use opkernel::data::{denormalize, normalize, PairMeta, SamplePair};
use opkernel::layers::{self, Activation, BiasMode, Resample};
use opkernel::tensor::{self, ShiftVector};
use opkernel::trainer::{self, TrainConfig};

fn to_py(e: opkernel::Error) -> PyErr {
    match e {
        opkernel::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for opkernel::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_mode(s: &str) -> PyResult<BiasMode> {
    opkernel::cli::parse_mode(s).map_err(PyValueError::new_err)
}

fn parse_activation(s: &str) -> PyResult<Activation> {
    match s {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        _ => Err(PyValueError::new_err(format!("unknown activation {s:?}"))),
    }
}

/// Dense row-major 2D map of floats.
#[pyclass(name = "FeatureMap", module = "pyopkernel", from_py_object)]
#[derive(Clone)]
struct PyFeatureMap {
    inner: tensor::FeatureMap,
}

impl From<tensor::FeatureMap> for PyFeatureMap {
    fn from(inner: tensor::FeatureMap) -> Self {
        PyFeatureMap { inner }
    }
}

#[pymethods]
impl PyFeatureMap {
    /// Builds a map from a list of equally long rows.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err("rows must be non-empty and of equal length"));
        }
        let n = rows.len();
        Ok(tensor::FeatureMap::from_vec(n, cols, rows.into_iter().flatten().collect())
            .py()?
            .into())
    }

    #[staticmethod]
    fn zeros(rows: usize, cols: usize) -> Self {
        tensor::FeatureMap::zeros(rows, cols).into()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.dims()
    }

    fn get(&self, m: usize, n: usize) -> PyResult<f64> {
        if m >= self.inner.rows() || n >= self.inner.cols() {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(self.inner.get(m, n))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        self.inner
            .as_slice()
            .chunks(self.inner.cols())
            .map(<[f64]>::to_vec)
            .collect()
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn dot(&self, other: &PyFeatureMap) -> PyResult<f64> {
        self.inner.dot(&other.inner).py()
    }

    /// `out(m, n) = self(m + a, n + b)`, zero filled.
    fn shift_integer(&self, a: i64, b: i64, gamma: u32) -> PyResult<Self> {
        Ok(tensor::shift_integer(&self.inner, a, b, gamma).py()?.into())
    }

    /// Bilinear read at `(m + alpha, n + beta)`.
    fn shift_fractional(&self, alpha: f64, beta: f64, gamma: u32) -> PyResult<Self> {
        let sv = ShiftVector::new(alpha, beta, gamma).py()?;
        Ok(tensor::shift_fractional(&self.inner, &sv).py()?.into())
    }

    /// Adjoint of `shift_fractional` for the same shift.
    fn shift_fractional_adjoint(&self, alpha: f64, beta: f64) -> Self {
        let (fa, fb) = (alpha.floor(), beta.floor());
        let (rows, cols) = self.inner.dims();
        tensor::reverse_interpolate_window(&self.inner, alpha - fa, beta - fb, (-fa as i64, -fb as i64), rows, cols).into()
    }

    fn conv2d_valid(&self, kernel: &PyFeatureMap) -> PyResult<Self> {
        Ok(tensor::conv2d_valid(&self.inner, &kernel.inner).py()?.into())
    }

    fn __repr__(&self) -> String {
        let (r, c) = self.inner.dims();
        format!("FeatureMap({r}x{c})")
    }
}

/// Layer description; `bias_mode` is `none`, `random` or `learnable`.
#[pyclass(name = "LayerSpec", module = "pyopkernel", from_py_object)]
#[derive(Clone)]
struct PyLayerSpec {
    inner: layers::LayerSpec,
}

#[pymethods]
impl PyLayerSpec {
    #[new]
    #[pyo3(signature = (neurons, kernel, q, bias_mode = "none", gamma = 0, activation = "tanh", down = None, up = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        neurons: usize,
        kernel: usize,
        q: usize,
        bias_mode: &str,
        gamma: u32,
        activation: &str,
        down: Option<(usize, usize)>,
        up: Option<(usize, usize)>,
    ) -> PyResult<Self> {
        let resample = match (down, up) {
            (None, None) => Resample::None,
            (Some((ssx, ssy)), None) => Resample::Down { ssx, ssy },
            (None, Some((usx, usy))) => Resample::Up { usx, usy },
            _ => return Err(PyValueError::new_err("a layer resamples at most once")),
        };
        let inner = layers::LayerSpec::new(neurons, kernel, q, parse_mode(bias_mode)?, gamma)
            .with_activation(parse_activation(activation)?)
            .with_resample(resample);
        inner.validate().py()?;
        Ok(PyLayerSpec { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("spec serializes")
    }

    fn __repr__(&self) -> String {
        format!("LayerSpec({})", self.to_json())
    }
}

fn samples(inputs: &[PyFeatureMap], targets: &[PyFeatureMap]) -> PyResult<Vec<SamplePair>> {
    if inputs.len() != targets.len() {
        return Err(PyValueError::new_err("inputs and targets differ in length"));
    }
    Ok(inputs
        .iter()
        .zip(targets)
        .map(|(i, t)| SamplePair {
            input: i.inner.clone(),
            target: t.inner.clone(),
            meta: PairMeta::Shift { a: 0, b: 0 },
        })
        .collect())
}

/// Single-input-channel network.
#[pyclass(name = "Network", module = "pyopkernel", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: layers::Network,
    seed: u64,
    iterations: usize,
}

#[pymethods]
impl PyNetwork {
    /// Seeded random initialisation.
    #[new]
    #[pyo3(signature = (specs, seed = 0, weight_init_range = 0.1, zero_bias = false))]
    fn new(specs: Vec<PyLayerSpec>, seed: u64, weight_init_range: f64, zero_bias: bool) -> PyResult<Self> {
        let arch: Vec<_> = specs.into_iter().map(|s| s.inner).collect();
        let cfg = TrainConfig {
            seed,
            weight_init_range,
            bias_init: if zero_bias { trainer::BiasInit::Zero } else { trainer::BiasInit::Uniform },
            ..TrainConfig::default()
        };
        let inner = trainer::init_network(1, &arch, &cfg, &mut trainer::run_rng(seed)).py()?;
        Ok(PyNetwork { inner, seed, iterations: 0 })
    }

    fn predict(&self, input: &PyFeatureMap) -> PyResult<Vec<PyFeatureMap>> {
        Ok(self
            .inner
            .predict(std::slice::from_ref(&input.inner))
            .py()?
            .into_iter()
            .map(Into::into)
            .collect())
    }

    #[pyo3(signature = (include_spatial_bias = false))]
    fn param_count(&self, include_spatial_bias: bool) -> usize {
        layers::param_count(&self.inner, include_spatial_bias)
    }

    /// `(layer, neuron, input, alpha, beta)` for every connection.
    fn spatial_biases(&self) -> Vec<(usize, usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for (l, layer) in self.inner.layers.iter().enumerate() {
            for (i, row) in layer.connections.iter().enumerate() {
                for (k, c) in row.iter().enumerate() {
                    out.push((l, i, k, c.bias.alpha, c.bias.beta));
                }
            }
        }
        out
    }

    /// Loss and flattened analytic gradients for one sample.
    fn gradients(&self, input: &PyFeatureMap, target: &PyFeatureMap) -> PyResult<(f64, Vec<f64>)> {
        let (loss, grads) = opkernel::backprop::sample_gradients(
            &self.inner,
            std::slice::from_ref(&input.inner),
            std::slice::from_ref(&target.inner),
        )
        .py()?;
        Ok((loss, grads.flatten()))
    }

    /// SGD training in place; returns the per-iteration losses.
    #[pyo3(signature = (inputs, targets, max_iter = 200, lr_weights = 0.1, lr_bias = 10.0, min_mse = 1e-3, stop_snr_db = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        inputs: Vec<PyFeatureMap>,
        targets: Vec<PyFeatureMap>,
        max_iter: usize,
        lr_weights: f64,
        lr_bias: f64,
        min_mse: f64,
        stop_snr_db: Option<f64>,
    ) -> PyResult<Vec<f64>> {
        let data = samples(&inputs, &targets)?;
        let cfg = TrainConfig {
            max_iter,
            lr_weights,
            lr_bias,
            min_mse,
            stop_snr_db,
            seed: self.seed,
            ..TrainConfig::default()
        };
        let report = trainer::train(&mut self.inner, &data, &cfg).py()?;
        self.iterations += report.iterations;
        Ok(report.loss)
    }

    /// Mean `(mse, snr_db, psnr_db)` over the samples.
    #[pyo3(signature = (inputs, targets, peak = 2.0))]
    fn evaluate(&self, inputs: Vec<PyFeatureMap>, targets: Vec<PyFeatureMap>, peak: f64) -> PyResult<(f64, f64, f64)> {
        let (s, _, _) = trainer::evaluate(&self.inner, &samples(&inputs, &targets)?, peak).py()?;
        Ok((s.mse, s.snr_db, s.psnr_db))
    }

    fn to_json(&self) -> String {
        Checkpoint::from_network(&self.inner, self.iterations, RngDescriptor::chacha8(self.seed)).to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let ck = Checkpoint::from_json(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyNetwork {
            inner: ck.to_network().py()?,
            seed: ck.rng.seed,
            iterations: ck.iteration,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_network(&self.inner, self.iterations, RngDescriptor::chacha8(self.seed))
            .save(&path)
            .py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        Ok(PyNetwork {
            inner: ck.to_network().py()?,
            seed: ck.rng.seed,
            iterations: ck.iteration,
        })
    }
}

#[pyfunction]
fn mse(pred: &PyFeatureMap, target: &PyFeatureMap) -> PyResult<f64> {
    opkernel::metrics::mse(&pred.inner, &target.inner).py()
}

#[pyfunction]
fn snr_db(pred: &PyFeatureMap, target: &PyFeatureMap) -> PyResult<f64> {
    opkernel::metrics::snr_db(&pred.inner, &target.inner).py()
}

#[pyfunction]
#[pyo3(signature = (pred, target, peak = 2.0))]
fn psnr_db(pred: &PyFeatureMap, target: &PyFeatureMap, peak: f64) -> PyResult<f64> {
    opkernel::metrics::psnr_db(&pred.inner, &target.inner, peak).py()
}

/// Runs the finite-difference suite; returns `(passed, checked, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (modes = vec!["none".to_string(), "random".to_string(), "learnable".to_string()], networks = 20, seed = 2024))]
fn gradcheck(modes: Vec<String>, networks: usize, seed: u64) -> PyResult<(bool, usize, f64)> {
    let modes = modes.iter().map(|m| parse_mode(m)).collect::<PyResult<Vec<_>>>()?;
    let cfg = opkernel::gradcheck::SuiteConfig {
        networks,
        seed,
        ..Default::default()
    };
    let results = opkernel::gradcheck::run_suite(&cfg, &modes, None).py()?;
    let passed = results.iter().all(|(_, _, r)| r.passed());
    let checked = results.iter().map(|(_, _, r)| r.entries.len()).sum();
    let worst = results.iter().map(|(_, _, r)| r.max_rel_error()).fold(0.0, f64::max);
    Ok((passed, checked, worst))
}

/// Reads an 8-bit PGM/PPM as a map normalized to `[-1, 1]`.
#[pyfunction]
fn read_pgm(path: PathBuf) -> PyResult<PyFeatureMap> {
    Ok(normalize(&opkernel::pgm::read_pgm(&path).py()?).into())
}

/// Writes a `[-1, 1]` map as an 8-bit P5 PGM.
#[pyfunction]
fn write_pgm(path: PathBuf, map: &PyFeatureMap) -> PyResult<()> {
    opkernel::pgm::write_pgm(&path, &denormalize(&map.inner)).py()
}

#[pymodule]
fn pyopkernel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyLayerSpec>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(snr_db, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_db, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(write_pgm, m)?)?;
    Ok(())
}
