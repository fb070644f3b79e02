//! Python bindings. Built with maturin as the `droplet` extension module.
//!
//! Images cross the boundary as flat row-major lists of floats (or encoded
//! bytes); detection releases the GIL.

use std::collections::HashMap;

use droplet as dl;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn to_py_err(e: dl::Error) -> PyErr {
    match e {
        dl::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Grayscale image with float pixels, row-major.
#[pyclass(name = "Image", module = "droplet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: dl::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: dl::Image::new(width, height, data).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(width: usize, height: usize) -> PyResult<Self> {
        Ok(Self {
            inner: dl::Image::zeros(width, height).map_err(to_py_err)?,
        })
    }

    /// Decodes PNG, TIFF or raw bytes (format sniffed from the content).
    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: dl::decode_image(data).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dl::load_image(path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        dl::save_image(&self.inner, path).map_err(to_py_err)
    }

    /// Raw encoding: little-endian u32 width, height, then f32 pixels.
    fn to_raw<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &dl::image_core::encode_raw(&self.inner))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// `(height, width)`, matching numpy's convention.
    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<f32> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) out of bounds")));
        }
        Ok(self.inner.get(x, y))
    }

    fn __repr__(&self) -> String {
        format!("Image(width={}, height={})", self.inner.width(), self.inner.height())
    }
}

#[pyclass(name = "DetectionParams", module = "droplet", frozen, from_py_object)]
#[derive(Clone)]
struct PyDetectionParams {
    inner: dl::DetectionParams,
}

#[pymethods]
impl PyDetectionParams {
    #[new]
    #[pyo3(signature = (
        min_sigma = 2.0, max_sigma = 15.0, n_bin = 26, truncate = 5.0, threshold = 0.1,
        overlap = Some(0.5), neighborhood = 3, backend = "fft", preprocess = true,
        smooth_sigma = 1.0, saturation = 0.0035
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        min_sigma: f64,
        max_sigma: f64,
        n_bin: usize,
        truncate: f64,
        threshold: f64,
        overlap: Option<f64>,
        neighborhood: usize,
        backend: &str,
        preprocess: bool,
        smooth_sigma: f64,
        saturation: f64,
    ) -> PyResult<Self> {
        let inner = dl::DetectionParams {
            min_sigma,
            max_sigma,
            n_bin,
            truncate,
            threshold,
            overlap,
            neighborhood,
            backend: backend.parse().map_err(to_py_err)?,
            preprocess: dl::PreprocessParams {
                enabled: preprocess,
                smooth_sigma,
                saturation,
            },
        };
        inner.validate().map_err(to_py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn min_sigma(&self) -> f64 {
        self.inner.min_sigma
    }

    #[getter]
    fn max_sigma(&self) -> f64 {
        self.inner.max_sigma
    }

    #[getter]
    fn n_bin(&self) -> usize {
        self.inner.n_bin
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold
    }

    #[getter]
    fn overlap(&self) -> Option<f64> {
        self.inner.overlap
    }

    #[getter]
    fn backend(&self) -> String {
        self.inner.backend.to_string()
    }

    /// The sigma ladder, `n_bin + 1` values.
    fn sigmas(&self) -> PyResult<Vec<f64>> {
        Ok(self.inner.ladder().map_err(to_py_err)?.sigmas().to_vec())
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("DetectionParams({})", self.to_json())
    }
}

#[pyclass(name = "Blob", module = "droplet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyBlob {
    inner: dl::Blob,
}

#[pymethods]
impl PyBlob {
    #[new]
    #[pyo3(signature = (x, y, sigma, response = 1.0))]
    fn new(x: usize, y: usize, sigma: f64, response: f64) -> Self {
        Self {
            inner: dl::Blob::new(x, y, sigma, response, false),
        }
    }

    #[getter]
    fn x(&self) -> usize {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> usize {
        self.inner.y
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.inner.radius
    }

    #[getter]
    fn response(&self) -> f64 {
        self.inner.response
    }

    #[getter]
    fn at_scale_boundary(&self) -> bool {
        self.inner.at_scale_boundary
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!(
            "Blob(x={}, y={}, sigma={}, radius={:.3}, response={:.4})",
            b.x, b.y, b.sigma, b.radius, b.response
        )
    }
}

#[pyclass(name = "Detection", module = "droplet", frozen)]
struct PyDetection {
    inner: dl::Detection,
}

#[pymethods]
impl PyDetection {
    #[getter]
    fn blobs(&self) -> Vec<PyBlob> {
        self.inner
            .blobs
            .blobs
            .iter()
            .map(|b| PyBlob { inner: b.clone() })
            .collect()
    }

    /// `{"bin_center_px": [...], "count": [...], "volume_weight": [...]}`
    #[getter]
    fn histogram(&self) -> HashMap<&'static str, Vec<f64>> {
        let h = &self.inner.histogram;
        HashMap::from([
            ("bin_center_px", h.bin_centers.clone()),
            ("count", h.counts.iter().map(|&c| c as f64).collect()),
            ("volume_weight", h.volume_weights.clone()),
        ])
    }

    #[getter]
    fn timings(&self) -> HashMap<&'static str, f64> {
        let t = &self.inner.timings;
        HashMap::from([
            ("preprocess_ms", t.preprocess_ms),
            ("convolve_ms", t.convolve_ms),
            ("extrema_ms", t.extrema_ms),
            ("prune_ms", t.prune_ms),
            ("total_ms", t.total_ms),
        ])
    }

    /// The same JSON document the `droplet detect` command writes.
    #[pyo3(signature = (image_name = "image"))]
    fn to_json(&self, image_name: &str) -> PyResult<String> {
        self.inner.blobs.to_json(image_name).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.blobs.len()
    }
}

/// Reusable detector; caches FFT plans per image shape.
#[pyclass(name = "Detector", module = "droplet", frozen)]
struct PyDetector {
    inner: dl::Detector,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (params = None))]
    fn new(params: Option<PyDetectionParams>) -> PyResult<Self> {
        let params = params.map(|p| p.inner).unwrap_or_default();
        Ok(Self {
            inner: dl::Detector::new(params).map_err(to_py_err)?,
        })
    }

    fn detect(&self, py: Python<'_>, image: &PyImage) -> PyResult<PyDetection> {
        let img = &image.inner;
        let inner = py.detach(|| self.inner.detect(img)).map_err(to_py_err)?;
        Ok(PyDetection { inner })
    }

    #[getter]
    fn params(&self) -> PyDetectionParams {
        PyDetectionParams {
            inner: self.inner.params().clone(),
        }
    }

    #[getter]
    fn plan_builds(&self) -> usize {
        self.inner.plan_builds()
    }
}

#[pyfunction]
#[pyo3(signature = (image, params = None))]
fn detect(py: Python<'_>, image: &PyImage, params: Option<PyDetectionParams>) -> PyResult<PyDetection> {
    PyDetector::new(params)?.detect(py, image)
}

#[pyfunction]
#[pyo3(signature = (image, smooth_sigma = 1.0, saturation = 0.0035))]
fn preprocess(image: &PyImage, smooth_sigma: f64, saturation: f64) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: dl::preprocess(&image.inner, smooth_sigma, saturation).map_err(to_py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (image, saturation = 0.0035))]
fn contrast_stretch(image: &PyImage, saturation: f64) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: dl::contrast_stretch(&image.inner, saturation).map_err(to_py_err)?,
    })
}

/// Renders a noise-free scene. Returns `(image, [(x, y, r), ...])`.
/// (x, y, r) of a ground-truth disk.
type Circle = (f64, f64, f64);

#[pyfunction]
#[pyo3(signature = (width, height, n_spheres, r_min, r_max, seed, allow_overlap = false, flat = false))]
#[allow(clippy::too_many_arguments)]
fn render_scene(
    width: usize,
    height: usize,
    n_spheres: usize,
    r_min: f64,
    r_max: f64,
    seed: u64,
    allow_overlap: bool,
    flat: bool,
) -> PyResult<(PyImage, Vec<Circle>)> {
    let mut params = dl::RenderParams::new(width, height, n_spheres, (r_min, r_max), seed);
    params.allow_overlap = allow_overlap;
    params.shading = if flat {
        dl::Shading::Flat
    } else {
        dl::Shading::SphereCap
    };
    let scene = dl::render_scene(&params).map_err(to_py_err)?;
    let truths = scene.truths.iter().map(|t| (t.x, t.y, t.r)).collect();
    Ok((PyImage { inner: scene.image }, truths))
}

#[pyfunction]
#[pyo3(signature = (image, seed, poisson_scale = 255.0, gaussian_sigma = 0.01))]
fn add_noise(image: &PyImage, seed: u64, poisson_scale: f64, gaussian_sigma: f64) -> PyResult<PyImage> {
    let scene = dl::Scene {
        image: image.inner.clone(),
        truths: Vec::new(),
        seed,
        noise: None,
    };
    let noisy = dl::add_noise(&scene, poisson_scale, gaussian_sigma, seed).map_err(to_py_err)?;
    Ok(PyImage { inner: noisy.image })
}

/// Greedy VOC matching. Returns a dict with tp, fp, fn, precision, recall.
#[pyfunction]
#[pyo3(signature = (blobs, truths, iou_threshold = 0.5))]
fn match_voc(
    blobs: Vec<PyRef<'_, PyBlob>>,
    truths: Vec<(f64, f64, f64)>,
    iou_threshold: f64,
) -> PyResult<HashMap<&'static str, f64>> {
    let preds: Vec<dl::Blob> = blobs.iter().map(|b| b.inner.clone()).collect();
    let truths: Vec<dl::GroundTruthCircle> = truths
        .into_iter()
        .map(|(x, y, r)| dl::GroundTruthCircle { x, y, r })
        .collect();
    let rep = dl::match_voc(&preds, &truths, iou_threshold).map_err(to_py_err)?;
    Ok(HashMap::from([
        ("tp", rep.tp as f64),
        ("fp", rep.fp as f64),
        ("fn", rep.fn_ as f64),
        ("precision", rep.precision),
        ("recall", rep.recall),
    ]))
}

#[pymodule]
#[pyo3(name = "droplet")]
fn droplet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyDetectionParams>()?;
    m.add_class::<PyBlob>()?;
    m.add_class::<PyDetection>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(contrast_stretch, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(match_voc, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
