//! Python bindings for the despeckle library.

use std::path::PathBuf;

use despeckle::eval::{self, FilterKind};
use despeckle::model::{self, ModelConfig};
use despeckle::train::{self, TrainConfig};
use despeckle::{checkpoint, data, noise, DatasetSplit, Error};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::ShapeMismatch(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Single-channel image with values nominally in [0, 1], row-major.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: data::ImageTensor,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, values: Vec<f32>) -> PyResult<Self> {
        let inner = data::ImageTensor::new(height, width, 1, values).map_err(to_py)?;
        Ok(PyImage { inner })
    }

    /// Loads a PNG/JPEG/.spkt file as luminance resized to `resolution`.
    #[staticmethod]
    fn load(path: PathBuf, resolution: usize) -> PyResult<Self> {
        let inner = data::load_image(&path, resolution).map_err(to_py)?;
        Ok(PyImage { inner })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    /// Clean reference attached by synthesis, if any.
    #[getter]
    fn clean(&self) -> Option<PyImage> {
        self.inner.clean().map(|c| PyImage { inner: c.without_ref() })
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        data::write_png(&self.inner, &path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}, mean={:.4})", self.inner.height, self.inner.width, self.inner.mean())
    }
}

#[pyclass(name = "NoiseSpec", from_py_object)]
#[derive(Clone)]
pub struct PyNoiseSpec {
    inner: despeckle::NoiseSpec,
}

#[pymethods]
impl PyNoiseSpec {
    #[new]
    #[pyo3(signature = (alpha_level, alpha_jitter = 0.0, add_sigma = 0.0))]
    fn new(alpha_level: f64, alpha_jitter: f64, add_sigma: f64) -> PyResult<Self> {
        let inner = despeckle::NoiseSpec { alpha_level, alpha_jitter, add_sigma };
        inner.validate().map_err(to_py)?;
        Ok(PyNoiseSpec { inner })
    }

    #[getter]
    fn alpha_level(&self) -> f64 {
        self.inner.alpha_level
    }

    #[getter]
    fn alpha_jitter(&self) -> f64 {
        self.inner.alpha_jitter
    }

    fn __repr__(&self) -> String {
        format!("NoiseSpec(alpha_level={}, alpha_jitter={})", self.inner.alpha_level, self.inner.alpha_jitter)
    }
}

/// Trained or freshly initialized encoder + reconstruction parameters.
#[pyclass(name = "Model")]
pub struct PyModel {
    params: despeckle::ModelParameters<f32>,
}

#[pymethods]
impl PyModel {
    /// Random init; `widths` are the four stage widths.
    #[staticmethod]
    #[pyo3(signature = (widths = [32, 64, 128, 256], seed = 0))]
    fn init(widths: [usize; 4], seed: u64) -> PyResult<Self> {
        let params = model::init_model(&ModelConfig::with_widths(widths), seed).map_err(to_py)?;
        Ok(PyModel { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel { params: ck.state.params })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn denoise(&self, py: Python<'_>, image: &PyImage) -> PyResult<PyImage> {
        let inner = py.detach(|| model::denoise(&self.params, &image.inner)).map_err(to_py)?;
        Ok(PyImage { inner })
    }

    /// Inference latent as (channels, height, width, flat values).
    fn encode(&self, image: &PyImage) -> PyResult<(usize, usize, usize, Vec<f32>)> {
        let z = model::encode(&self.params, &image.inner, false, 0.0, 0).map_err(to_py)?;
        let f = z.values;
        Ok((f.channels, f.height, f.width, f.data))
    }

    /// Multiply-accumulate count of one inference pass at `size x size`.
    fn flops(&self, size: usize) -> PyResult<u64> {
        model::forward_flops(&self.params.config, size, size).map_err(to_py)
    }
}

#[pyfunction]
fn synthetic_shapes(count: usize, resolution: usize, seed: u64) -> Vec<PyImage> {
    data::synthetic_shapes(count, resolution, seed)
        .into_iter()
        .map(|inner| PyImage { inner })
        .collect()
}

/// Speckle-corrupts `clean`; returns the observation (with the clean image
/// attached) and the drawn alpha.
#[pyfunction]
fn synth_speckle(clean: &PyImage, spec: &PyNoiseSpec, seed: u64) -> PyResult<(PyImage, f64)> {
    let (inner, alpha) = noise::synth_speckle(&clean.inner, &spec.inner, seed).map_err(to_py)?;
    Ok((PyImage { inner }, alpha))
}

#[pyfunction]
fn noise_mixture(values: Vec<f64>, sigma: f64, seed: u64) -> PyResult<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(PyValueError::new_err("sigma must be finite and nonnegative"));
    }
    Ok(noise::noise_mixture(&values, sigma, seed))
}

#[pyfunction]
#[pyo3(signature = (image, kappa = noise::DEFAULT_KAPPA))]
fn adaptive_sigma(image: &PyImage, kappa: f64) -> f64 {
    noise::adaptive_sigma(&image.inner, kappa)
}

#[pyfunction]
#[pyo3(signature = (a, b, max_val = 1.0))]
fn psnr(a: &PyImage, b: &PyImage, max_val: f64) -> PyResult<f64> {
    eval::psnr(&a.inner, &b.inner, max_val).map_err(to_py)
}

/// Classical filter: "lee", "median" or "gaussian".
#[pyfunction]
#[pyo3(signature = (image, kind, window = 5))]
fn baseline_filter(image: &PyImage, kind: &str, window: usize) -> PyResult<PyImage> {
    let kind: FilterKind = kind.parse().map_err(to_py)?;
    let inner = eval::baseline_filter(&image.inner, kind, window).map_err(to_py)?;
    Ok(PyImage { inner })
}

/// Trains on noisy observations and returns the model plus per-epoch
/// (agreement, reconstruction) losses.
#[pyfunction]
#[pyo3(signature = (observations, widths = [8, 16, 32, 64], epochs = 100, batch_size = 8, seed = 0))]
fn fit(
    py: Python<'_>,
    observations: Vec<PyImage>,
    widths: [usize; 4],
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<(PyModel, Vec<(f64, f64)>)> {
    let split = DatasetSplit {
        train: observations.into_iter().map(|o| o.inner).collect(),
        test: Vec::new(),
        split_ratio: 1.0,
        seed,
    };
    let model_cfg = ModelConfig::with_widths(widths);
    let train_cfg = TrainConfig { epochs, batch_size, seed, ..TrainConfig::default() };
    let state = py
        .detach(|| train::fit(&split, &model_cfg, &train_cfg))
        .map_err(to_py)?;
    let history = state.history.iter().map(|r| (r.agreement, r.reconstruction)).collect();
    Ok((PyModel { params: state.params }, history))
}

#[pymodule]
fn despeckle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyNoiseSpec>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic_shapes, m)?)?;
    m.add_function(wrap_pyfunction!(synth_speckle, m)?)?;
    m.add_function(wrap_pyfunction!(noise_mixture, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_filter, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
