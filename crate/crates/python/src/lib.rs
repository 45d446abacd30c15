//! Python bindings for the focuslite engine.

use std::path::PathBuf;

use focuslite::bench;
use focuslite::data::{self, LabelKind, Rgb8Tile};
use focuslite::heatmap::{self, NormMode};
use focuslite::metrics::{self, MetricResult};
use focuslite::tensor::ImageTensor;
use focuslite::training::{self, TrainConfig};
use focuslite::{LossKind, ModelParams};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;

fn err(e: focuslite::Error) -> PyErr {
    match e {
        focuslite::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn metric(r: MetricResult) -> PyResult<f64> {
    r.map_err(|e| PyValueError::new_err(e.to_string()))
}

fn metric_or_nan(r: &MetricResult) -> f64 {
    r.as_ref().copied().unwrap_or(f64::NAN)
}

fn pool(threads: Option<usize>) -> PyResult<Option<rayon::ThreadPool>> {
    match threads {
        None | Some(1) => Ok(None),
        Some(0) => Err(PyValueError::new_err("threads must be positive")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// An RGB image with values in [0, 1].
#[pyclass(module = "focuslite")]
struct Image {
    inner: ImageTensor,
}

#[pymethods]
impl Image {
    /// Decodes an image file (PNG, JPEG, TIFF, BMP) as 8-bit RGB.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_tile(path).map_err(err)?,
        })
    }

    /// From interleaved 8-bit RGB bytes.
    #[staticmethod]
    fn from_rgb8(height: usize, width: usize, data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: ImageTensor::from_u8(height, width, 3, data).map_err(err)?,
        })
    }

    /// Uniform grey image.
    #[staticmethod]
    fn filled(height: usize, width: usize, value: f32) -> PyResult<Self> {
        Ok(Self {
            inner: ImageTensor::filled(height, width, 3, value).map_err(err)?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn to_rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_u8())
    }

    fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.crop(top, left, height, width).map_err(err)?,
        })
    }

    fn gaussian_blur(&self, sigma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: data::gaussian_blur(&self.inner, sigma).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_tile(&self.inner, path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Image(height={}, width={}, channels={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.channels()
        )
    }
}

/// An N-kernel focus quality model.
#[pyclass(module = "focuslite")]
struct Model {
    inner: ModelParams,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn zeros(n_kernels: usize) -> PyResult<Self> {
        Ok(Self {
            inner: ModelParams::zeros(n_kernels).map_err(err)?,
        })
    }

    /// Training initialization with a seeded generator.
    #[staticmethod]
    #[pyo3(signature = (n_kernels, seed = training::DEFAULT_SEED))]
    fn initialized(n_kernels: usize, seed: u64) -> PyResult<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: ModelParams::initialized(n_kernels, &mut rng).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelParams::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: ModelParams::from_bytes(data).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(err)?))
    }

    #[getter]
    fn n_kernels(&self) -> usize {
        self.inner.n_kernels()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// "plcc" or "mse".
    #[getter]
    fn loss(&self) -> &'static str {
        self.inner.trained_with.name()
    }

    /// Flat parameter vector: kernels, conv biases, min weights, max weights, bias.
    fn parameters(&self) -> Vec<f32> {
        self.inner.iter_values().collect()
    }

    /// Score of one 235×235 patch.
    fn score_patch(&self, patch: &Image) -> PyResult<f64> {
        Ok(self.inner.forward(&patch.inner).map_err(err)?.value)
    }

    /// Mean score over dense 235×235 crops at stride 128.
    #[pyo3(signature = (image, threads = None))]
    fn dense_score(&self, py: Python<'_>, image: &Image, threads: Option<usize>) -> PyResult<f64> {
        let pool = pool(threads)?;
        let (params, tile) = (&self.inner, &image.inner);
        py.detach(|| data::dense_score_in(params, tile, pool.as_ref()))
            .map(|(s, _)| s.value)
            .map_err(err)
    }

    /// `[(top, left, score), ...]` in row-major crop order.
    fn score_crops(&self, image: &Image) -> PyResult<Vec<(usize, usize, f64)>> {
        let crops = data::score_crops(&self.inner, &image.inner, None).map_err(err)?;
        let anchors = crops
            .row_offsets
            .iter()
            .flat_map(|&r| crops.col_offsets.iter().map(move |&c| (r, c)));
        Ok(anchors
            .zip(&crops.scores)
            .map(|((r, c), &s)| (r, c, s))
            .collect())
    }

    /// Magnitude and unwrapped phase grids (DC centred) of one kernel.
    #[pyo3(signature = (kernel = 0, fft_size = 64))]
    fn kernel_spectrum<'py>(
        &self,
        py: Python<'py>,
        kernel: usize,
        fft_size: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let s = self.inner.kernel_spectrum(kernel, fft_size).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("fft_size", s.fft_size)?;
        d.set_item("dc_index", s.dc_index)?;
        let magnitude: Vec<Vec<f64>> = s.channels.iter().map(|c| c.magnitude.clone()).collect();
        let phase: Vec<Vec<f64>> = s.channels.iter().map(|c| c.phase.clone()).collect();
        d.set_item("magnitude", magnitude)?;
        d.set_item("phase", phase)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n_kernels={}, params={}, loss={})",
            self.inner.n_kernels(),
            self.inner.param_count(),
            self.inner.trained_with
        )
    }
}

#[pyfunction]
fn srcc(predictions: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metric(metrics::srcc(&predictions, &labels))
}

#[pyfunction]
fn plcc(predictions: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    metric(metrics::plcc(&predictions, &labels))
}

/// `positives[i]` is true for blurry samples.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, positives: Vec<bool>) -> PyResult<f64> {
    metric(metrics::roc_auc(&scores, &positives))
}

#[pyfunction]
fn pr_auc(scores: Vec<f64>, positives: Vec<bool>) -> PyResult<f64> {
    metric(metrics::pr_auc(&scores, &positives))
}

#[pyfunction]
#[pyo3(signature = (z_levels, sharp_max = metrics::DEFAULT_SHARP_MAX_ZLEVEL))]
fn binarize_zlevels(z_levels: Vec<i64>, sharp_max: i64) -> PyResult<Vec<bool>> {
    metrics::binarize_zlevels(&z_levels, sharp_max).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (sec_per_patch, patches_per_wsi = bench::DEFAULT_PATCHES_PER_WSI, n_wsi = bench::DEFAULT_WSI_COUNT))]
fn estimate_scanner_throughput(sec_per_patch: f64, patches_per_wsi: f64, n_wsi: f64) -> PyResult<f64> {
    bench::estimate_scanner_throughput(patches_per_wsi, n_wsi, sec_per_patch).map_err(err)
}

/// Crop offsets along one axis of a tile.
#[pyfunction]
fn crop_positions(length: usize) -> PyResult<Vec<usize>> {
    data::crop_positions(length, focuslite::CROP_SIZE, focuslite::DENSE_STRIDE).map_err(err)
}

/// Times dense scoring of an 8-bit image; returns a dict with the report.
#[pyfunction]
#[pyo3(signature = (model, image, runs = 100, threads = 1, host = "unspecified"))]
fn time_patch_scoring<'py>(
    py: Python<'py>,
    model: &Model,
    image: &Image,
    runs: usize,
    threads: usize,
    host: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let tile = Rgb8Tile {
        height: image.inner.height(),
        width: image.inner.width(),
        bytes: image.inner.to_u8(),
    };
    let params = &model.inner;
    let r = py
        .detach(|| bench::time_patch_scoring(params, &tile, runs, threads, host))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("mean_seconds", r.mean_seconds)?;
    d.set_item("std_seconds", r.std_seconds)?;
    d.set_item("samples", r.samples)?;
    d.set_item("runs", r.runs)?;
    d.set_item("threads", r.threads)?;
    d.set_item("positions", r.positions)?;
    d.set_item("forward_calls", r.forward_calls)?;
    d.set_item("host", r.host)?;
    Ok(d)
}

/// Writes a synthetic blur-ramp dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, textures = 8, sigmas = vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0], size = 256, seed = training::DEFAULT_SEED))]
fn synth_dataset(
    out_dir: PathBuf,
    textures: usize,
    sigmas: Vec<f64>,
    size: usize,
    seed: u64,
) -> PyResult<PathBuf> {
    let tex = data::procedural_textures(textures, size, seed).map_err(err)?;
    data::synth_blur_dataset(&tex, &sigmas)
        .and_then(|d| d.write(out_dir))
        .map_err(err)
}

/// Trains on a manifest (one 60/20/20 split) and returns
/// `(model, per-epoch losses, test metrics)`.
#[pyfunction]
#[pyo3(signature = (manifest, n_kernels = 1, loss = "plcc", epochs = 120, batch_size = 64, learning_rate = 0.01, seed = training::DEFAULT_SEED))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    n_kernels: usize,
    loss: &str,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<(Model, Vec<f64>, Bound<'py, PyDict>)> {
    let loss: LossKind = loss.parse().map_err(err)?;
    let config = TrainConfig {
        loss,
        n_kernels,
        epochs,
        batch_size,
        learning_rate,
        seed,
        ..TrainConfig::default()
    };
    let m = data::load_manifest(&manifest).map_err(err)?;
    let tiles = data::load_tiles(&m).map_err(err)?;
    let kind = m.kind;
    let mut summary = py
        .detach(|| training::run_folds(&config, &tiles, kind, 1))
        .map_err(err)?;
    let fold = summary.folds.remove(0);
    let losses = fold.outcome.log.iter().map(|e| e.loss).collect();
    Ok((
        Model {
            inner: fold.outcome.params,
        },
        losses,
        report_dict(py, &fold.report)?,
    ))
}

fn report_dict<'py>(py: Python<'py>, r: &metrics::EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("samples", r.samples.len())?;
    d.set_item("srcc", metric_or_nan(&r.srcc))?;
    d.set_item("plcc", metric_or_nan(&r.plcc))?;
    d.set_item("roc_auc", metric_or_nan(&r.roc_auc))?;
    d.set_item("pr_auc", metric_or_nan(&r.pr_auc))?;
    Ok(d)
}

/// Dense-scores every tile of a manifest and returns the metric dict.
#[pyfunction]
#[pyo3(signature = (model, manifest, sharp_max = metrics::DEFAULT_SHARP_MAX_ZLEVEL))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &Model,
    manifest: PathBuf,
    sharp_max: i64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = data::load_manifest(&manifest).map_err(err)?;
    let tiles = data::load_tiles(&m).map_err(err)?;
    let kind: LabelKind = m.kind;
    let params = &model.inner;
    let report = py
        .detach(|| training::evaluate_parallel(params, &tiles, kind, sharp_max))
        .map_err(err)?;
    report_dict(py, &report)
}

/// Renders a heatmap overlay. `mode` is "per-scan" or "absolute".
#[pyfunction]
#[pyo3(signature = (model, scan, mode = "per-scan", lo = 0.0, hi = 12.0, alpha = heatmap::DEFAULT_ALPHA, path = None))]
#[allow(clippy::too_many_arguments)]
fn render_heatmap(
    model: &Model,
    scan: &Image,
    mode: &str,
    lo: f64,
    hi: f64,
    alpha: f64,
    path: Option<PathBuf>,
) -> PyResult<Image> {
    let mode = match mode.parse::<NormMode>().map_err(err)? {
        NormMode::Absolute { .. } => NormMode::Absolute { lo, hi },
        m => m,
    };
    let grid = heatmap::score_scan(&model.inner, &scan.inner, None).map_err(err)?;
    let norm = heatmap::normalize_grid(&grid, mode).map_err(err)?;
    let img = heatmap::render_overlay(&norm, &scan.inner, heatmap::jet, alpha).map_err(err)?;
    if let Some(p) = path {
        heatmap::write_png(&img, p).map_err(err)?;
    }
    Ok(Image { inner: img })
}

#[pymodule]
#[pyo3(name = "focuslite")]
fn focuslite_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CROP_SIZE", focuslite::CROP_SIZE)?;
    m.add("DENSE_STRIDE", focuslite::DENSE_STRIDE)?;
    m.add_class::<Image>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(srcc, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(pr_auc, m)?)?;
    m.add_function(wrap_pyfunction!(binarize_zlevels, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_scanner_throughput, m)?)?;
    m.add_function(wrap_pyfunction!(crop_positions, m)?)?;
    m.add_function(wrap_pyfunction!(time_patch_scoring, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_heatmap, m)?)?;
    Ok(())
}
