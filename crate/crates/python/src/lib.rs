//! Python bindings. Volumes cross the boundary as flat row-major lists
//! plus a shape tuple.

use std::path::PathBuf;

use ctpseg_core::attention::compute_weight_map;
use ctpseg_core::metrics::{binarize, evaluate_case, CaseInputs};
use ctpseg_core::nets::ModelBundle;
use ctpseg_core::perfusion::detect_perfusion_window;
use ctpseg_core::phantom::{generate_corpus, PhantomSpec};
use ctpseg_core::trainer::{self, TrainConfig as CoreConfig, CONFIG_KEYS};
use ctpseg_core::volume_io::{load_case, CaseRecord};
use ctpseg_core::Error;
use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn volume(data: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Array3<f32>> {
    Array3::from_shape_vec(shape, data).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn flat(a: &Array3<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

/// Detects the perfusion window of an accumulated-intensity curve.
#[pyfunction]
#[pyo3(signature = (curve, k = 5))]
fn detect_window<'py>(py: Python<'py>, curve: Vec<f64>, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let det = detect_perfusion_window(&curve, k).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("t_start", det.window.t_start)?;
    d.set_item("t_end", det.window.t_end)?;
    d.set_item("start_fallback", det.start_fallback)?;
    d.set_item("end_fallback", det.end_fallback)?;
    d.set_item("crossed", det.crossed)?;
    Ok(d)
}

/// Attention weight map of one binary slice, flattened row-major.
#[pyfunction]
#[pyo3(signature = (mask, shape, w = 1.5, d = 50.0))]
fn weight_map(mask: Vec<f32>, shape: (usize, usize), w: f64, d: f64) -> PyResult<Vec<f64>> {
    let m = Array2::from_shape_vec(shape, mask).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let wm = compute_weight_map(m.view(), w, d).map_err(to_py)?;
    Ok(wm.data.iter().copied().collect())
}

/// Writes `cases` synthetic cases plus a split file under `out`.
#[pyfunction]
#[pyo3(signature = (out, cases, seed = 0, dims = None, time_points = None, lesion_radius = None))]
fn generate_phantoms<'py>(
    py: Python<'py>,
    out: PathBuf,
    cases: usize,
    seed: u64,
    dims: Option<(usize, usize, usize)>,
    time_points: Option<usize>,
    lesion_radius: Option<(f64, f64)>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = PhantomSpec { seed, ..PhantomSpec::default() };
    if let Some((z, y, x)) = dims {
        spec.dims = [z, y, x];
    }
    if let Some(t) = time_points {
        spec.time_points = t;
    }
    if let Some(r) = lesion_radius {
        spec.lesion_radius_range = r;
    }
    let split = generate_corpus(cases, &spec, &out).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("train", split.train)?;
    d.set_item("val", split.val)?;
    d.set_item("test", split.test)?;
    Ok(d)
}

/// Training hyper-parameters. Keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &v.str()?.to_string()).map_err(to_py)?;
            }
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self { inner: CoreConfig::from_text(text).map_err(to_py)? })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        CONFIG_KEYS.to_vec()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value.str()?.to_string()).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.inner.lr_at(epoch)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        let parts: Vec<String> = CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}", self.inner.get(k).unwrap_or_default()))
            .collect();
        format!("TrainConfig({})", parts.join(", "))
    }
}

/// Trains on the cases listed in a split file and writes checkpoints to `out`.
#[pyfunction]
#[pyo3(signature = (config, data, out, split = None))]
fn train<'py>(
    py: Python<'py>,
    config: &TrainConfig,
    data: PathBuf,
    out: PathBuf,
    split: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let split = split.unwrap_or_else(|| data.join(ctpseg_core::phantom::SPLIT_FILE));
    let cfg = &config.inner;
    let (tr, va) = trainer::load_split_datasets(&data, &split, cfg).map_err(to_py)?;
    let res = trainer::train(cfg, &tr, &va, Some(&out)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("best_epoch", res.best_epoch)?;
    d.set_item("val_dice", res.val_dice)?;
    d.set_item("steps", res.log.len())?;
    d.set_item("final_loss", res.log.last().map(|l| l.loss.l_total))?;
    Ok(d)
}

/// A trained checkpoint.
#[pyclass(name = "Model")]
struct Model {
    bundle: ModelBundle,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { bundle: ModelBundle::load(&path).map_err(to_py)? })
    }

    #[getter]
    fn variant(&self) -> String {
        self.bundle.arch().variant.to_string()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.bundle.epoch
    }

    /// Segments the case stored in `case_dir`. Returns the flat mask, the
    /// flat pseudo-DWI (or `None`) and the volume shape.
    fn predict<'py>(&self, py: Python<'py>, case_dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let case: CaseRecord = load_case(&case_dir).map_err(to_py)?;
        let p = trainer::predict(&self.bundle, &case).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("shape", p.seg.dim())?;
        d.set_item("seg", flat(&p.seg))?;
        d.set_item("pseudo_dwi", p.pseudo_dwi.as_ref().map(flat))?;
        Ok(d)
    }
}

/// Segmentation metrics, plus synthesis metrics when `synth` and `dwi`
/// are both given. Undefined metrics come back as `None`.
#[pyfunction]
#[pyo3(signature = (seg, gt, shape, spacing = (1.0, 1.0, 1.0), synth = None, dwi = None))]
fn evaluate<'py>(
    py: Python<'py>,
    seg: Vec<f32>,
    gt: Vec<f32>,
    shape: (usize, usize, usize),
    spacing: (f64, f64, f64),
    synth: Option<Vec<f32>>,
    dwi: Option<Vec<f32>>,
) -> PyResult<Bound<'py, PyDict>> {
    let seg = binarize(volume(seg, shape)?.view());
    let gt = binarize(volume(gt, shape)?.view());
    let synth = synth.map(|v| volume(v, shape)).transpose()?;
    let dwi = dwi.map(|v| volume(v, shape)).transpose()?;
    let m = evaluate_case(&CaseInputs {
        case_id: "python",
        seg: seg.view(),
        gt: gt.view(),
        spacing_mm: [spacing.0, spacing.1, spacing.2],
        synth: synth.as_ref().map(|a| a.view()),
        dwi: dwi.as_ref().map(|a| a.view()),
    })
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dice", m.dice)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("hd_mm", m.hd_mm)?;
    d.set_item("assd_mm", m.assd_mm)?;
    d.set_item("rve", m.rve)?;
    d.set_item("ssim_global", m.ssim_global)?;
    d.set_item("ssim_local", m.ssim_local)?;
    d.set_item("psnr_global", m.psnr_global)?;
    d.set_item("psnr_local", m.psnr_local)?;
    d.set_item("lesion_volume_cc", m.lesion_volume_cc)?;
    d.set_item("size_bucket", m.size_bucket.map(|b| b.as_str()))?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "ctpseg")]
fn ctpseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(detect_window, m)?)?;
    m.add_function(wrap_pyfunction!(weight_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Model>()?;
    Ok(())
}
