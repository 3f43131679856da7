//! Python bindings: configs, experiments, trained models, sketches and the
//! saliency and metric routines. Grids cross the boundary as nested lists;
//! structured results come back as dicts.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use gma_core::attention::select_granules as core_select_granules;
use gma_core::harness::train::checkpoint_bytes;
use gma_core::harness::{Experiment as CoreExperiment, RunConfig as CoreConfig, Split, TrainedModel as CoreTrained, Variant};
use gma_core::metrics::{self, RankedRound};
use gma_core::saliency::{rise_saliency_with, sample_masks as core_sample_masks};
use gma_core::sketch::{self, SketchSpec as CoreSketch};
use gma_core::{GmaError, Tensor};

fn py_err(e: GmaError) -> PyErr {
    match e {
        GmaError::Config(_) | GmaError::Shape { .. } | GmaError::Contract { .. } => PyValueError::new_err(e.to_string()),
        GmaError::Io(_) | GmaError::Format(_) | GmaError::Json(_) => PyIOError::new_err(e.to_string()),
        GmaError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

fn grid(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.dims().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn parse<T: std::str::FromStr<Err = GmaError>>(s: &str) -> PyResult<T> {
    s.parse::<T>().map_err(py_err)
}

/// Experiment configuration. Unspecified keys take their defaults.
#[pyclass(module = "gma", from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => CoreConfig::from_json(text).map_err(py_err)?,
            None => CoreConfig::default(),
        };
        Ok(RunConfig { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn with_variant(&self, variant: &str) -> PyResult<Self> {
        Ok(RunConfig {
            inner: self.inner.with_variant(parse::<Variant>(variant)?),
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(variant={}, seed={})", self.inner.variant, self.inner.seed)
    }
}

/// A trained dialog model and its per-epoch loss curve.
#[pyclass(module = "gma", unsendable)]
struct TrainedModel {
    inner: CoreTrained,
}

#[pymethods]
impl TrainedModel {
    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.model.variant.name()
    }

    #[getter]
    fn loss_curve(&self) -> Vec<f64> {
        self.inner.loss_curve.clone()
    }

    /// Checkpoint bytes in the same format the CLI writes.
    fn checkpoint<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = checkpoint_bytes(&self.inner.model, None).map_err(py_err)?;
        Ok(PyBytes::new(py, &bytes))
    }
}

/// Synthetic dataset plus the lazily trained saliency probe.
#[pyclass(module = "gma", unsendable)]
struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    #[new]
    fn new(config: &RunConfig) -> PyResult<Self> {
        Ok(Experiment {
            inner: CoreExperiment::generate(config.inner.clone()).map_err(py_err)?,
        })
    }

    #[getter]
    fn config(&self) -> RunConfig {
        RunConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn dialog_count(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.data.split(parse::<Split>(split)?).len())
    }

    #[pyo3(signature = (variant=None))]
    fn train(&mut self, variant: Option<&str>) -> PyResult<TrainedModel> {
        let mut cfg = self.inner.config.clone();
        if let Some(v) = variant {
            cfg = cfg.with_variant(parse::<Variant>(v)?);
        }
        Ok(TrainedModel {
            inner: self.inner.train(&cfg).map_err(py_err)?,
        })
    }

    /// Retrieval metrics of `model` on a split.
    #[pyo3(signature = (model, split="val"))]
    fn evaluate<'py>(&mut self, py: Python<'py>, model: &TrainedModel, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.inner.config.with_variant(model.inner.model.variant);
        let eval = self
            .inner
            .evaluate(&cfg, &model.inner.model, parse::<Split>(split)?)
            .map_err(py_err)?;
        to_py(py, &eval.metrics)
    }
}

/// Count-sketch hash tables derived from `(seed, input_dim, sketch_dim)`.
#[pyclass(module = "gma", from_py_object)]
#[derive(Clone)]
struct SketchSpec {
    inner: CoreSketch,
}

#[pymethods]
impl SketchSpec {
    #[new]
    fn new(seed: u64, input_dim: usize, sketch_dim: usize) -> PyResult<Self> {
        Ok(SketchSpec {
            inner: CoreSketch::new(seed, input_dim, sketch_dim).map_err(py_err)?,
        })
    }

    #[getter]
    fn buckets(&self) -> Vec<usize> {
        self.inner.buckets().to_vec()
    }

    #[getter]
    fn signs(&self) -> Vec<i8> {
        self.inner.signs().to_vec()
    }

    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.project(&x).map_err(py_err)
    }
}

/// Compact bilinear pooling of two vectors.
#[pyfunction]
fn mcb_pool(x: Vec<f64>, y: Vec<f64>, spec_x: &SketchSpec, spec_y: &SketchSpec) -> PyResult<Vec<f64>> {
    sketch::mcb_pool(&Tensor::vector(x), &Tensor::vector(y), (&spec_x.inner, &spec_y.inner))
        .map(Tensor::into_data)
        .map_err(py_err)
}

#[pyfunction]
fn circular_convolve(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    gma_core::fft::circular_convolve(&a, &b).map_err(py_err)
}

/// Row-major indices of the `k` most salient cells.
#[pyfunction]
fn select_granules(saliency: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    core_select_granules(&grid(saliency)?, k).map_err(py_err)
}

#[pyfunction]
fn sample_masks(side: usize, keep_prob: f64, low_res: usize, count: usize, seed: u64) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let set = core_sample_masks(side, keep_prob, low_res, count, seed).map_err(py_err)?;
    Ok(set.masks.iter().map(rows).collect())
}

/// Randomized-mask saliency; `scorer(mask)` returns a confidence in [0, 1]
/// for the input occluded by `mask`.
#[pyfunction]
fn rise_saliency(
    scorer: &Bound<'_, PyAny>,
    side: usize,
    keep_prob: f64,
    low_res: usize,
    count: usize,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let set = core_sample_masks(side, keep_prob, low_res, count, seed).map_err(py_err)?;
    let mut failure = None;
    let result = rise_saliency_with(&set, |_, m| {
        match scorer.call1((rows(m),)).and_then(|r| r.extract::<f64>()) {
            Ok(v) => Ok(v),
            Err(e) => {
                failure = Some(e);
                Err(GmaError::Numeric("scorer raised".into()))
            }
        }
    });
    match (result, failure) {
        (_, Some(e)) => Err(e),
        (Ok(s), None) => Ok(rows(&s.values)),
        (Err(e), None) => Err(py_err(e)),
    }
}

/// Spearman correlation, p-value and EMD between two grids.
#[pyfunction]
fn compare_maps<'py>(py: Python<'py>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::compare_maps(&grid(a)?, &grid(b)?).map_err(py_err)?)
}

/// R@k, MRR, mean rank and NDCG over rounds of candidate scores.
#[pyfunction]
#[pyo3(signature = (scores, gt_indices, relevance=None))]
fn retrieval_metrics<'py>(
    py: Python<'py>,
    scores: Vec<Vec<f64>>,
    gt_indices: Vec<usize>,
    relevance: Option<Vec<Vec<f64>>>,
) -> PyResult<Bound<'py, PyAny>> {
    if scores.len() != gt_indices.len() || relevance.as_ref().is_some_and(|r| r.len() != scores.len()) {
        return Err(PyValueError::new_err("scores, gt_indices and relevance must have one entry per round"));
    }
    let rounds = scores
        .into_iter()
        .zip(gt_indices)
        .enumerate()
        .map(|(i, (s, gt))| {
            let rel = match &relevance {
                Some(r) => r[i].clone(),
                None => (0..s.len()).map(|j| f64::from(u8::from(j == gt))).collect(),
            };
            RankedRound::new(s, gt, rel).map_err(py_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &metrics::retrieval_metrics(&rounds).map_err(py_err)?)
}

/// Nemenyi critical difference; `scores[model][dataset]`, higher is better.
#[pyfunction]
#[pyo3(signature = (scores, alpha=0.05))]
fn nemenyi_cd<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    let ranks = metrics::ranks_from_scores(&scores).map_err(py_err)?;
    to_py(py, &metrics::nemenyi_cd(&ranks, alpha).map_err(py_err)?)
}

#[pymodule]
fn gma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunConfig>()?;
    m.add_class::<Experiment>()?;
    m.add_class::<TrainedModel>()?;
    m.add_class::<SketchSpec>()?;
    m.add_function(wrap_pyfunction!(mcb_pool, m)?)?;
    m.add_function(wrap_pyfunction!(circular_convolve, m)?)?;
    m.add_function(wrap_pyfunction!(select_granules, m)?)?;
    m.add_function(wrap_pyfunction!(sample_masks, m)?)?;
    m.add_function(wrap_pyfunction!(rise_saliency, m)?)?;
    m.add_function(wrap_pyfunction!(compare_maps, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(nemenyi_cd, m)?)?;
    Ok(())
}
