//! Python bindings: graphs, ensembles, unlearning and certificates.

use std::path::PathBuf;

use callosum::bench::{merge_toml, run_experiment, ExperimentConfig};
use callosum::stgraph::{generate_synthetic, ingest_csv, DeletionRequest, STGraph};
use callosum::unlearn::{
    apply_unlearn, build_ensemble, certify, execute_unlearn, locate, PipelineConfig, TrainedEnsemble,
    UnlearnCertificate,
};
use callosum::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A spatio-temporal graph: fixed topology plus a feature series per node.
#[pyclass(name = "Graph", module = "callosum_py", frozen)]
struct PyGraph {
    inner: STGraph,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    #[pyo3(signature = (nodes=40, timesteps=2000, seed=7, diffusion=0.3))]
    fn synthetic(nodes: usize, timesteps: usize, seed: u64, diffusion: f64) -> PyResult<Self> {
        Ok(PyGraph { inner: generate_synthetic(nodes, timesteps, seed, diffusion).map_err(to_py)?.graph })
    }

    #[staticmethod]
    #[pyo3(signature = (features, edges, undirected=false))]
    fn from_csv(features: PathBuf, edges: PathBuf, undirected: bool) -> PyResult<Self> {
        Ok(PyGraph { inner: ingest_csv(&features, &edges, undirected).map_err(to_py)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyGraph { inner: serde_json::from_str(text).map_err(json_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.timesteps()
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().to_vec()
    }

    #[getter]
    fn edges(&self) -> Vec<(String, String)> {
        self.inner.edges().iter().map(|&(u, v)| (self.inner.node_id(u).into(), self.inner.node_id(v).into())).collect()
    }

    /// Feature series of one node, flattened time-major.
    fn series(&self, node_id: &str) -> PyResult<Vec<f64>> {
        let v = self.inner.index_of(node_id).ok_or_else(|| PyValueError::new_err(format!("unknown node {node_id:?}")))?;
        Ok(self.inner.node_series(v))
    }

    /// Copy with the listed nodes' features multiplied by `factor`.
    fn scaled(&self, node_ids: Vec<String>, factor: f64) -> PyResult<Self> {
        let set = node_ids.into_iter().collect();
        let inner = self.inner.with_node_features(&set, |_, _, x| x * factor).map_err(to_py)?;
        Ok(PyGraph { inner })
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={}, timesteps={})",
            self.inner.node_count(),
            self.inner.edges().len(),
            self.inner.timesteps()
        )
    }
}

fn request(nodes: Vec<String>, edges: Vec<(String, String)>) -> DeletionRequest {
    let mut r = DeletionRequest::from_nodes(nodes);
    r.edges.extend(edges);
    r
}

fn pipeline_config(config: Option<&str>) -> PyResult<PipelineConfig> {
    match config {
        Some(text) => merge_toml(&PipelineConfig::default(), text, &[]).map_err(to_py),
        None => Ok(PipelineConfig::default()),
    }
}

/// Metrics as a dict with keys `mae`, `mse`, `rmse`, `r2` and `trend_f1`.
fn metrics_dict<'py>(py: Python<'py>, m: &callosum::stgraph::MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("mse", m.mse)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("r2", m.r2)?;
    d.set_item("trend_f1", m.trend_f1)?;
    Ok(d)
}

/// A trained ensemble: partition, frozen sub-models, meta-graph and global
/// layer, plus the history of applied deletion requests.
#[pyclass(name = "Ensemble", module = "callosum_py", frozen)]
struct PyEnsemble {
    inner: TrainedEnsemble,
}

#[pymethods]
impl PyEnsemble {
    /// Trains on `graph`. `config` is pipeline TOML; omitted keys keep
    /// their defaults.
    #[staticmethod]
    #[pyo3(signature = (graph, config=None))]
    fn build(py: Python<'_>, graph: &PyGraph, config: Option<&str>) -> PyResult<Self> {
        let cfg = pipeline_config(config)?;
        let inner = py.detach(|| build_ensemble(&graph.inner, &cfg)).map_err(to_py)?;
        Ok(PyEnsemble { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEnsemble { inner: TrainedEnsemble::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.partition.m
    }

    #[getter]
    fn delta_cut(&self) -> f64 {
        self.inner.partition.delta_cut
    }

    /// Node ids of each subgraph, keyed by subgraph id.
    #[getter]
    fn subgraphs(&self) -> Vec<(u64, Vec<String>)> {
        let topo = &self.inner.topology;
        self.inner
            .partition
            .subgraphs
            .iter()
            .map(|s| (s.id, s.nodes.iter().map(|&v| topo.node_id(v).to_string()).collect()))
            .collect()
    }

    #[getter]
    fn live_node_ids(&self) -> Vec<String> {
        self.inner.live_node_ids()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// Digest of each sub-model, keyed by subgraph id.
    fn sub_model_digests(&self) -> Vec<(u64, String)> {
        self.inner.digests().sub_models
    }

    /// Subgraph positions a request would touch.
    #[pyo3(signature = (nodes, edges=Vec::new()))]
    fn locate(&self, nodes: Vec<String>, edges: Vec<(String, String)>) -> PyResult<Vec<usize>> {
        let r = request(nodes, edges);
        Ok(locate(&r, &self.inner.topology, &self.inner.partition).map_err(to_py)?.into_iter().collect())
    }

    /// Test-split metrics over the live nodes.
    fn test_metrics<'py>(&self, py: Python<'py>, graph: &PyGraph) -> PyResult<Bound<'py, PyDict>> {
        let mut ens = self.inner.clone();
        let m = py.detach(|| ens.test_forecast(&graph.inner)?.metrics()).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    /// Test-split predictions, one row per window and `node × horizon`
    /// columns, plus the node order.
    fn test_predictions(&self, py: Python<'_>, graph: &PyGraph) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let mut ens = self.inner.clone();
        let f = py.detach(|| ens.test_forecast(&graph.inner)).map_err(to_py)?;
        let rows = f.predictions.data.chunks(f.predictions.cols.max(1)).map(<[f64]>::to_vec).collect();
        Ok((f.node_ids, rows))
    }

    /// Deletes nodes and edges and certifies the result.
    #[pyo3(signature = (graph, nodes, edges=Vec::new()))]
    fn unlearn(
        &self,
        py: Python<'_>,
        graph: &PyGraph,
        nodes: Vec<String>,
        edges: Vec<(String, String)>,
    ) -> PyResult<(PyEnsemble, PyCertificate)> {
        let r = request(nodes, edges);
        let (post, cert) = py.detach(|| execute_unlearn(&self.inner, &graph.inner, &r)).map_err(to_py)?;
        Ok((PyEnsemble { inner: post }, PyCertificate { inner: cert }))
    }

    /// Deletes without certifying.
    #[pyo3(signature = (graph, nodes, edges=Vec::new()))]
    fn apply_unlearn(&self, py: Python<'_>, graph: &PyGraph, nodes: Vec<String>, edges: Vec<(String, String)>) -> PyResult<PyEnsemble> {
        let r = request(nodes, edges);
        let post = py.detach(|| apply_unlearn(&self.inner, &graph.inner, &r)).map_err(to_py)?;
        Ok(PyEnsemble { inner: post })
    }

    /// Certifies the most recent request; `pre` enables the influence probe.
    #[pyo3(signature = (graph, nodes, edges=Vec::new(), pre=None))]
    fn certify(
        &self,
        py: Python<'_>,
        graph: &PyGraph,
        nodes: Vec<String>,
        edges: Vec<(String, String)>,
        pre: Option<&PyEnsemble>,
    ) -> PyResult<PyCertificate> {
        let r = request(nodes, edges);
        let cert = py.detach(|| certify(pre.map(|p| &p.inner), &self.inner, &r, &graph.inner)).map_err(to_py)?;
        Ok(PyCertificate { inner: cert })
    }

    fn __repr__(&self) -> String {
        format!("Ensemble(m={}, requests={}, digest={})", self.inner.partition.m, self.inner.history.len(), &self.inner.digest()[..12])
    }
}

/// Outcome of the exact-unlearning checks for one request.
#[pyclass(name = "Certificate", module = "callosum_py", frozen)]
struct PyCertificate {
    inner: UnlearnCertificate,
}

#[pymethods]
impl PyCertificate {
    #[getter]
    fn valid(&self) -> bool {
        self.inner.valid
    }

    #[getter]
    fn equivalence(&self) -> bool {
        self.inner.equivalence
    }

    #[getter]
    fn ledger_clean(&self) -> bool {
        self.inner.ledger_clean
    }

    #[getter]
    fn influence_probe(&self) -> Option<bool> {
        self.inner.influence_probe
    }

    #[getter]
    fn failed_checks(&self) -> Vec<String> {
        self.inner.failed_checks.clone()
    }

    #[getter]
    fn affected_subgraphs(&self) -> Vec<u64> {
        self.inner.affected_subgraphs.clone()
    }

    #[getter]
    fn retrained_subgraphs(&self) -> Vec<u64> {
        self.inner.retrained_subgraphs.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!("Certificate(valid={}, failed_checks={:?})", self.inner.valid, self.inner.failed_checks)
    }
}

/// Runs an experiment from its TOML config and returns the results bundle
/// as JSON. Relative CSV paths resolve against `base_dir`.
#[pyfunction]
#[pyo3(signature = (config, base_dir=None))]
fn run_bench(py: Python<'_>, config: &str, base_dir: Option<PathBuf>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config).map_err(to_py)?;
    let bundle = py
        .detach(|| {
            let g = cfg.dataset.load(base_dir.as_deref())?;
            run_experiment(&cfg, &g)
        })
        .map_err(to_py)?
        .bundle;
    serde_json::to_string_pretty(&bundle).map_err(json_err)
}

#[pymodule]
fn callosum_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_class::<PyCertificate>()?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
