use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pythonize::{depythonize, pythonize};
use serde::Serialize;

use mfssd::boxes::BBox;
use mfssd::checkpoint::Checkpoint;
use mfssd::cli::RunConfig;
use mfssd::data::{generate_dataset, load_dataset, Dataset};
use mfssd::detector::{build_mfssd, ArchConfig, DecodeConfig, Params, PriorConfig};
use mfssd::eval::{average_precision, detect_dataset, evaluate_model, ScoredBox, TruthBox};
use mfssd::optim::{lr_at, train, TrainConfig};
use mfssd::slimming::{count_params, finetune, prune, prune_to_reduction};
use mfssd::Error;

type Box4 = (f64, f64, f64, f64);

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::NonFinite { .. } => PyArithmeticError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn bbox(b: Box4) -> PyResult<BBox> {
    BBox::new(b.0, b.1, b.2, b.3).map_err(err)
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<PyObject> {
    Ok(pythonize(py, v)?.unbind())
}

fn run_config(config: Option<&Bound<'_, PyAny>>) -> PyResult<RunConfig> {
    match config {
        Some(c) if !c.is_none() => Ok(depythonize(c)?),
        _ => Ok(RunConfig::default()),
    }
}

/// Prior boxes as (cx, cy, w, h), finest level first.
#[pyfunction]
#[pyo3(signature = (feature_sizes, priors_per_cell, min_scale=0.2, max_scale=0.9))]
fn generate_priors(
    feature_sizes: Vec<usize>,
    priors_per_cell: Vec<usize>,
    min_scale: f64,
    max_scale: f64,
) -> PyResult<Vec<Box4>> {
    let cfg =
        PriorConfig::new(feature_sizes, priors_per_cell, min_scale, max_scale).map_err(err)?;
    let set = mfssd::detector::generate_priors(&cfg).map_err(err)?;
    Ok(set.boxes.iter().map(|b| (b.cx, b.cy, b.w, b.h)).collect())
}

#[pyfunction]
fn iou(a: Box4, b: Box4) -> PyResult<f64> {
    mfssd::boxes::iou(&bbox(a)?, &bbox(b)?).map_err(err)
}

/// Indices kept by greedy non-maximum suppression, highest score first.
#[pyfunction]
fn nms(boxes: Vec<Box4>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let b = boxes.into_iter().map(bbox).collect::<PyResult<Vec<_>>>()?;
    Ok(mfssd::detector::nms(&b, &scores, iou_threshold))
}

/// `detections`: (image, score, box); `truths`: (image, box). None without truths.
#[pyfunction]
#[pyo3(name = "average_precision", signature = (detections, truths, iou_threshold=0.5))]
fn average_precision_py(
    detections: Vec<(usize, f64, Box4)>,
    truths: Vec<(usize, Box4)>,
    iou_threshold: f64,
) -> PyResult<Option<f64>> {
    let d = detections
        .into_iter()
        .map(|(image, score, b)| {
            Ok(ScoredBox {
                image,
                score,
                bbox: bbox(b)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let t = truths
        .into_iter()
        .map(|(image, b)| {
            Ok(TruthBox {
                image,
                bbox: bbox(b)?,
                counted: true,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(average_precision(&d, &t, iou_threshold))
}

#[pyfunction]
#[pyo3(signature = (epoch, step, steps_per_epoch, config=None))]
fn learning_rate(
    epoch: usize,
    step: usize,
    steps_per_epoch: usize,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<f64> {
    let cfg: TrainConfig = run_config(config)?.train;
    cfg.validate().map_err(err)?;
    Ok(lr_at(&cfg, epoch, step, steps_per_epoch))
}

#[pyclass(name = "Dataset", module = "mfssd")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (seed, n, size=96, small_fraction=0.5))]
    fn generate(seed: u64, n: usize, size: usize, small_fraction: f64) -> PyResult<Self> {
        Ok(Self {
            inner: generate_dataset(seed, n, size, small_fraction).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.manifest.classes.clone()
    }

    /// Planar RGB bytes, channel-major.
    fn pixels<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(i))?;
        Ok(pyo3::types::PyBytes::new(py, &s.pixels))
    }

    /// (class_id, (xmin, ymin, xmax, ymax)) in unit coordinates.
    fn annotations(&self, i: usize) -> PyResult<Vec<(usize, Box4)>> {
        let s = self
            .inner
            .samples
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(i))?;
        Ok(s.annotations
            .iter()
            .map(|a| {
                (
                    a.class_id,
                    (a.bbox.xmin, a.bbox.ymin, a.bbox.xmax, a.bbox.ymax),
                )
            })
            .collect())
    }
}

/// A detector graph with its weights and provenance metadata.
#[pyclass(name = "Model", module = "mfssd")]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    /// Fresh weights for an architecture (`arch` mirrors the config's `arch` object).
    #[staticmethod]
    #[pyo3(signature = (seed=0, arch=None))]
    fn init(seed: u64, arch: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let arch: ArchConfig = match arch {
            Some(a) if !a.is_none() => depythonize(a)?,
            _ => ArchConfig::default(),
        };
        let graph = build_mfssd(&arch).map_err(err)?;
        let params = Params::init(&graph, seed).map_err(err)?;
        let meta = serde_json::json!({"stage": "init", "seed": seed, "arch": arch});
        Ok(Self {
            inner: Checkpoint::new(graph, params, meta).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn metadata(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.inner.metadata)
    }

    fn param_report(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &count_params(&self.inner.graph).map_err(err)?)
    }

    /// Returns the pruned model and the prune report.
    #[pyo3(signature = (ratio, iterations=1))]
    fn prune(&self, py: Python<'_>, ratio: f64, iterations: usize) -> PyResult<(Self, PyObject)> {
        let (g, p, report) =
            prune(&self.inner.graph, &self.inner.params, ratio, iterations).map_err(err)?;
        self.pruned(py, g, p, report)
    }

    fn prune_to_reduction(&self, py: Python<'_>, min_pct: f64) -> PyResult<(Self, PyObject)> {
        let (g, p, report) =
            prune_to_reduction(&self.inner.graph, &self.inner.params, min_pct).map_err(err)?;
        self.pruned(py, g, p, report)
    }

    /// Trains in place and returns the per-epoch log records.
    #[pyo3(signature = (dataset, config=None, sparsity_lambda=None))]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        config: Option<&Bound<'_, PyAny>>,
        sparsity_lambda: Option<f64>,
    ) -> PyResult<PyObject> {
        let mut cfg = run_config(config)?.train;
        if let Some(l) = sparsity_lambda {
            cfg.sparsity_lambda = l;
        }
        let logs = train(
            &self.inner.graph,
            &mut self.inner.params,
            &dataset.inner,
            &cfg,
            |_, _| {},
        )
        .map_err(err)?;
        to_py(py, &logs)
    }

    #[pyo3(signature = (dataset, config=None))]
    fn finetune(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<PyObject> {
        let cfg = run_config(config)?.train;
        let logs = finetune(
            &self.inner.graph,
            &mut self.inner.params,
            &dataset.inner,
            &cfg,
            |_, _| {},
        )
        .map_err(err)?;
        to_py(py, &logs)
    }

    /// Per-image detections as dicts with class_id, score, bbox, prior.
    #[pyo3(signature = (dataset, score_threshold=0.05, nms_iou=0.45, top_k=100))]
    fn detect(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        score_threshold: f64,
        nms_iou: f64,
        top_k: usize,
    ) -> PyResult<PyObject> {
        let cfg = DecodeConfig {
            score_threshold,
            nms_iou,
            top_k,
        };
        let dets = detect_dataset(
            &self.inner.graph,
            &self.inner.params,
            &dataset.inner,
            &cfg,
            32,
        )
        .map_err(err)?;
        to_py(py, &dets)
    }

    #[pyo3(signature = (dataset, iou_threshold=0.5))]
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        iou_threshold: f64,
    ) -> PyResult<PyObject> {
        let r = evaluate_model(
            &self.inner.graph,
            &self.inner.params,
            &dataset.inner,
            &DecodeConfig::default(),
            iou_threshold,
        )
        .map_err(err)?;
        to_py(py, &r)
    }
}

impl PyModel {
    fn pruned(
        &self,
        py: Python<'_>,
        graph: mfssd::detector::GraphSpec,
        params: Params<f32>,
        report: mfssd::slimming::PruneReport,
    ) -> PyResult<(Self, PyObject)> {
        let meta = serde_json::json!({
            "stage": "prune",
            "realized_ratio": report.realized_ratio,
            "param_reduction_pct": report.param_reduction_pct,
            "parent": self.inner.metadata,
        });
        let model = Self {
            inner: Checkpoint::new(graph, params, meta).map_err(err)?,
        };
        Ok((model, to_py(py, &report)?))
    }
}

#[pymodule]
#[pyo3(name = "mfssd")]
fn mfssd_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_priors, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision_py, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
