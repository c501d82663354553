//! Python bindings: datasets, models, training, evaluation, Sinkhorn and the
//! gradient-check suite. Configs cross the boundary as JSON strings; results
//! come back as plain Python objects.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;

use cir_core::checkpoint::Checkpoint;
use cir_core::config::{check_compatible, TrainConfig};
use cir_core::dataset::{Dataset as CoreDataset, Split};
use cir_core::eval::{self, Metrics};
use cir_core::gradcheck::{run_suite, SuiteModule};
use cir_core::losses::{self, SinkhornConfig};
use cir_core::model::Model as CoreModel;
use cir_core::synthetic::{generate_synthetic, SyntheticSpec};
use cir_core::train::{mine_training_split, train as run_training, TrainOptions};
use cir_core::Tensor;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| serde_json::from_str(s).map_err(err))
}

fn split(name: &str) -> PyResult<Split> {
    name.parse().map_err(err)
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("recall_at_k", m.recall_at_k.clone())?;
    d.set_item("loss_curve", m.loss_curve.clone())?;
    Ok(d)
}

#[pyclass(module = "cir", frozen)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic dataset from a JSON spec (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (spec=None))]
    fn generate(spec: Option<&str>) -> PyResult<Self> {
        let spec: SyntheticSpec = parse(spec)?;
        Ok(Self { inner: generate_synthetic(spec).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.images.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    /// `(shape, flat row-major pixels)` of one image.
    fn image(&self, id: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.images.get(id).ok_or_else(|| err(format!("no image {id}")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn gallery(&self, split_name: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.gallery(split(split_name)?).map_err(err)?.to_vec())
    }

    fn queries<'py>(&self, py: Python<'py>, split_name: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let s = split(split_name)?;
        self.inner
            .split_queries(s)
            .map(|q| {
                let d = PyDict::new(py);
                d.set_item("query_id", q.query_id)?;
                d.set_item("reference_id", q.reference_id)?;
                d.set_item("target_id", q.target_id)?;
                d.set_item("text", &q.text)?;
                Ok(d)
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.queries.len()
    }
}

#[pyclass(module = "cir", frozen)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Freshly initialized model sized for `dataset`.
    #[new]
    #[pyo3(signature = (dataset, config=None, seed=0))]
    fn new(dataset: &Dataset, config: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut cfg: TrainConfig = parse(config)?;
        cfg.bind_dataset(&dataset.inner).map_err(err)?;
        Ok(Self { inner: CoreModel::new(cfg.model, seed).map_err(err)? })
    }

    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(Self { inner: ck.model().map_err(err)? })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Unit-norm composed embedding of (reference image, modification text).
    fn query_embedding(&self, dataset: &Dataset, reference_id: usize, text: &str) -> PyResult<Vec<f64>> {
        let d = &dataset.inner;
        check_compatible(&self.inner.config, d).map_err(err)?;
        let grids = d.patch_grids().map_err(err)?;
        let grid = grids.get(reference_id).ok_or_else(|| err(format!("no image {reference_id}")))?;
        let tokens = d.vocab.encode(text).map_err(err)?;
        Ok(self.inner.query_embedding(grid, &tokens).map_err(err)?.data().to_vec())
    }

    fn target_embedding(&self, dataset: &Dataset, image_id: usize) -> PyResult<Vec<f64>> {
        let d = &dataset.inner;
        check_compatible(&self.inner.config, d).map_err(err)?;
        let grids = d.patch_grids().map_err(err)?;
        let grid = grids.get(image_id).ok_or_else(|| err(format!("no image {image_id}")))?;
        Ok(self.inner.target_embedding(grid).map_err(err)?.data().to_vec())
    }

    /// Gallery image ids of `split`, best match first.
    #[pyo3(signature = (dataset, reference_id, text, split_name="test"))]
    fn retrieve(&self, dataset: &Dataset, reference_id: usize, text: &str, split_name: &str) -> PyResult<Vec<usize>> {
        let d = &dataset.inner;
        check_compatible(&self.inner.config, d).map_err(err)?;
        let grids = d.patch_grids().map_err(err)?;
        let gallery: Vec<_> = d
            .gallery(split(split_name)?)
            .map_err(err)?
            .iter()
            .map(|&i| (i, grids[i].clone()))
            .collect();
        let grid = grids.get(reference_id).ok_or_else(|| err(format!("no image {reference_id}")))?;
        let tokens = d.vocab.encode(text).map_err(err)?;
        eval::retrieve(&self.inner, grid, &tokens, &gallery).map_err(err)
    }

    #[pyo3(signature = (dataset, split_name="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, split_name: &str) -> PyResult<Bound<'py, PyDict>> {
        let s = split(split_name)?;
        let m = py.detach(|| eval::evaluate(&self.inner, &dataset.inner, s)).map_err(err)?;
        metrics_dict(py, &m)
    }
}

/// Mines counterfactuals for the training split with a freshly initialized
/// text encoder; one dict per query.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn mine<'py>(py: Python<'py>, dataset: &Dataset, config: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg: TrainConfig = parse(config)?;
    cfg.bind_dataset(&dataset.inner).map_err(err)?;
    let model = CoreModel::new(cfg.model.clone(), cfg.seed).map_err(err)?;
    let sets = py.detach(|| mine_training_split(&model, &dataset.inner, &cfg)).map_err(err)?;
    sets.iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("query_id", s.query_id)?;
            d.set_item("ics_text_ids", s.ics_text_ids.clone())?;
            d.set_item("tcs_image_ids", s.tcs_image_ids.clone())?;
            d.set_item("pcs_texts", s.pcs_texts.clone())?;
            Ok(d)
        })
        .collect()
}

/// Trains from scratch. Counterfactuals for the full objective are mined
/// inline. Returns `(model, metrics)`.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, max_steps=None, out_dir=None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config: Option<&str>,
    max_steps: Option<usize>,
    out_dir: Option<PathBuf>,
) -> PyResult<(Model, Bound<'py, PyDict>)> {
    let mut cfg: TrainConfig = parse(config)?;
    cfg.mine_inline = true;
    let outcome = py
        .detach(|| {
            if let Some(dir) = &out_dir {
                std::fs::create_dir_all(dir)?;
            }
            run_training(
                cfg,
                &dataset.inner,
                TrainOptions {
                    out_dir: out_dir.as_deref(),
                    max_steps,
                    ..Default::default()
                },
            )
        })
        .map_err(err)?;
    let metrics = metrics_dict(py, &outcome.metrics)?;
    Ok((Model { inner: outcome.model }, metrics))
}

/// Entropic transport plan between `mu` and `nu` (uniform when omitted).
#[pyfunction]
#[pyo3(signature = (cost, mu=None, nu=None, epsilon=0.05, max_iters=500, tol=1e-6))]
fn sinkhorn<'py>(
    py: Python<'py>,
    cost: Vec<Vec<f64>>,
    mu: Option<Vec<f64>>,
    nu: Option<Vec<f64>>,
    epsilon: f64,
    max_iters: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let c = Tensor::from_rows(&cost).map_err(err)?;
    let (n, k) = (c.rows(), c.cols());
    let mu = mu.unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let nu = nu.unwrap_or_else(|| vec![1.0 / k as f64; k]);
    let plan = losses::sinkhorn(&c, &mu, &nu, &SinkhornConfig { epsilon, max_iters, tol }).map_err(err)?;
    let gamma: Vec<Vec<f64>> = (0..n).map(|i| plan.gamma.row(i).to_vec()).collect();
    let d = PyDict::new(py);
    d.set_item("gamma", gamma)?;
    d.set_item("distance", plan.distance)?;
    d.set_item("iterations", plan.iterations)?;
    d.set_item("marginal_error", plan.marginal_error)?;
    d.set_item("converged", plan.converged)?;
    Ok(d)
}

#[pyfunction]
fn recall_at_k(rankings: Vec<Vec<usize>>, truths: Vec<usize>, k: usize) -> PyResult<f64> {
    eval::recall_at_k(&rankings, &truths, k).map_err(err)
}

/// Runs the gradient-check suite; one dict per check.
#[pyfunction]
#[pyo3(signature = (module=None))]
fn grad_check<'py>(py: Python<'py>, module: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let module: Option<SuiteModule> = module.map(str::parse).transpose().map_err(err)?;
    let rows = py.detach(|| run_suite(module)).map_err(err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("module", r.module.to_string())?;
            d.set_item("name", &r.name)?;
            d.set_item("max_error", r.max_error)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("envelope", r.envelope)?;
            d.set_item("passed", r.passed())?;
            Ok(d)
        })
        .collect()
}

/// Default configs as JSON, keyed by kind (`train`, `synthetic`).
#[pyfunction]
fn default_configs() -> PyResult<BTreeMap<&'static str, String>> {
    let mut m = BTreeMap::new();
    m.insert("train", serde_json::to_string_pretty(&TrainConfig::default()).map_err(err)?);
    m.insert("synthetic", serde_json::to_string_pretty(&SyntheticSpec::default()).map_err(err)?);
    Ok(m)
}

#[pymodule]
pub fn cir(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(mine, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(default_configs, m)?)?;
    Ok(())
}
