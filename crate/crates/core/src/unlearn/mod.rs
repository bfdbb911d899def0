//! Ensemble construction, request routing, selective retraining and the
//! exact-unlearning certificate.

mod certify;
mod engine;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::digest::{derive_seed, json_digest, GLOBAL_LAYER_ID};
use crate::error::{invalid, Error, Result};
use crate::esc::{correlation_map, extract_backbone, segment, select_m, CorrelationMap, Endpoint, Partition, Subgraph};
use crate::ggb::{build_meta_graph, key_node_sets, MetaGraph};
use crate::neural::{
    train_global, train_submodel, DataReader, GlobalConfig, GlobalLayer, GlobalSample, Ledger, MetaLayout, Split,
    SubModel, SubModelSpec, TrainConfig,
};
use crate::stgraph::{compute_metrics, DeletionRequest, ForecastTask, MetricsReport, STGraph, Topology};
use crate::tensor::Mat;

pub use certify::{certify, reference_run, Toolchain, UnlearnCertificate};
pub use engine::{apply_unlearn, execute_unlearn, locate, merge_small, purge_and_rebuild};

/// Request tag used when deriving the seeds of the initial build.
pub const BUILD_TAG: &str = "build";

/// Global-layer epochs beyond which training departs from the 1–3 epoch
/// schedule of the unlearning algorithm.
pub const GLOBAL_EPOCH_CAP: usize = 3;

/// Every knob of the pipeline. Defaults give the desk-scale benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub task: ForecastTask,
    /// Number of subgraphs; 0 selects it by minimising `Δ_cut + γ·ln m`.
    pub m: usize,
    pub gamma: f64,
    pub k_ring: usize,
    pub budget_c: f64,
    /// Ganglion count; 0 means one per subgraph.
    pub ganglions: usize,
    pub damping: f64,
    pub pagerank_tol: f64,
    /// Correlation window; `None` uses `min(256, ⌊(T_train−1)/2⌋)`.
    pub corr_window: Option<usize>,
    /// `width` is the base hidden width, scaled per subgraph by its share.
    pub sub_model: SubModelSpec,
    pub sub_train: TrainConfig,
    pub global: GlobalConfig,
    pub global_train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            task: ForecastTask::default(),
            m: 4,
            gamma: 0.1,
            k_ring: 2,
            budget_c: 8.0,
            ganglions: 0,
            damping: 0.85,
            pagerank_tol: 1e-10,
            corr_window: None,
            sub_model: SubModelSpec::default(),
            sub_train: TrainConfig::default(),
            global: GlobalConfig::default(),
            global_train: TrainConfig {
                learning_rate: 0.01,
                epochs: 3,
                batch: 32,
                grad_clip: 5.0,
                stop_loss: 0.01,
                lambda_reg: 0.0,
            },
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.budget_c > 0.0) {
            return bad(format!("budget_c must be positive, got {}", self.budget_c));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) || !(self.pagerank_tol > 0.0) {
            return bad("damping must lie in (0,1) and pagerank_tol be positive".into());
        }
        if self.sub_model.width < 1 || self.sub_model.channels < 1 || self.sub_model.kernel < 1 {
            return bad(format!("bad sub-model spec {:?}", self.sub_model));
        }
        for (name, r) in [
            ("sub_train", self.sub_train.validate()),
            ("global_train", self.global_train.validate()),
            ("global", self.global.validate()),
        ] {
            if let Err(e) = r {
                return bad(format!("{name}: {e}"));
            }
        }
        if self.global_train.epochs > GLOBAL_EPOCH_CAP {
            log::warn!(
                "global_train.epochs = {} exceeds the {GLOBAL_EPOCH_CAP}-epoch retraining schedule",
                self.global_train.epochs
            );
        }
        Ok(())
    }

    fn correlation_window(&self, train_end: usize) -> usize {
        self.corr_window.unwrap_or_else(|| 256.min(train_end.saturating_sub(1) / 2).max(1))
    }

    fn ganglion_count(&self, m: usize) -> usize {
        if self.ganglions == 0 {
            m
        } else {
            self.ganglions
        }
    }
}

/// A merge performed by [`merge_small`]. `into` is `None` when an emptied
/// subgraph was simply dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub absorbed: u64,
    pub into: Option<u64>,
}

/// Structural trace of one applied request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnEvent {
    pub request: DeletionRequest,
    pub request_digest: String,
    pub affected: Vec<u64>,
    pub merges: Vec<MergeRecord>,
    pub retrained: Vec<u64>,
}

/// Frozen sub-models, meta-graph and global layer over one partition.
///
/// `origin_*` hold the structure at build time and `history` every request
/// applied since, which is all a reference run needs besides purged data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedEnsemble {
    pub config: PipelineConfig,
    pub split: Split,
    pub topology: Topology,
    pub correlation: CorrelationMap,
    pub partition: Partition,
    pub sub_models: Vec<SubModel>,
    pub meta: MetaGraph,
    pub global_layer: GlobalLayer,
    pub ledger: Ledger,
    pub origin_partition: Partition,
    pub origin_topology: Topology,
    pub history: Vec<UnlearnEvent>,
    /// Wall clock per stage of the last build or unlearn, in seconds.
    #[serde(skip)]
    pub timings: BTreeMap<String, f64>,
}

/// Parameter fingerprints compared by the equivalence check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleDigests {
    pub partition: String,
    pub sub_models: Vec<(u64, String)>,
    pub meta: String,
    pub global_layer: String,
}

impl TrainedEnsemble {
    pub fn pipeline_seed(&self) -> u64 {
        self.config.seed
    }

    pub fn digests(&self) -> EnsembleDigests {
        EnsembleDigests {
            partition: self.partition.digest(),
            sub_models: self.sub_models.iter().map(|m| (m.subgraph_id(), m.digest())).collect(),
            meta: self.meta.digest(),
            global_layer: self.global_layer.digest(),
        }
    }

    pub fn digest(&self) -> String {
        json_digest("ensemble-parameters", &self.digests())
    }

    pub fn layout(&self) -> Result<MetaLayout> {
        let widths: Vec<usize> = self.sub_models.iter().map(|m| m.arch().width).collect();
        MetaLayout::new(&self.meta, &self.partition, &widths, self.outputs())
    }

    fn outputs(&self) -> usize {
        self.sub_models[0].arch().outputs()
    }

    /// Live node ids in ascending index order.
    pub fn live_node_ids(&self) -> Vec<String> {
        self.topology.alive_nodes().map(|v| self.topology.node_id(v).to_string()).collect()
    }

    /// Raw-scale forecasts for every live node at each window start.
    pub fn forecast(&mut self, graph: &STGraph, starts: &[usize]) -> Result<Forecast> {
        check_graph(self, graph)?;
        let layout = self.layout()?;
        let index: Vec<usize> = (0..graph.node_count()).collect();
        let mut reader = DataReader::new(graph, &mut self.ledger, "eval");
        let samples = window_features(
            &mut reader,
            &self.partition,
            &self.sub_models,
            &index,
            graph.timesteps(),
            starts,
            &self.config.task,
        )?;
        let outputs = self.outputs();
        let mut rows_p = Vec::with_capacity(starts.len());
        let mut rows_t = Vec::with_capacity(starts.len());
        let scalers = node_scalers(&self.partition, &self.sub_models, &layout.nodes);
        for s in &samples {
            let yhat = self.global_layer.forward(&layout, &s.inputs)?;
            let mut p = Vec::with_capacity(layout.nodes.len() * outputs);
            let mut t = Vec::with_capacity(layout.nodes.len() * outputs);
            for (k, sc) in scalers.iter().enumerate() {
                p.extend(sc.inverse(&yhat[k]));
                t.extend(sc.inverse(&s.targets[k]));
            }
            rows_p.push(p);
            rows_t.push(t);
        }
        Forecast::new(self.live_node_ids(), starts.to_vec(), outputs, rows_p, rows_t)
    }

    /// Forecasts over the test split.
    pub fn test_forecast(&mut self, graph: &STGraph) -> Result<Forecast> {
        let starts = self.split.test_starts(&self.config.task);
        self.forecast(graph, &starts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Predictions and targets in raw units: one row per window start, columns
/// node-major (`node × P·F`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub node_ids: Vec<String>,
    pub starts: Vec<usize>,
    pub outputs: usize,
    pub predictions: Mat,
    pub targets: Mat,
}

impl Forecast {
    pub fn new(
        node_ids: Vec<String>,
        starts: Vec<usize>,
        outputs: usize,
        predictions: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let cols = node_ids.len() * outputs;
        let rows = starts.len();
        if predictions.len() != rows || targets.len() != rows || predictions.iter().chain(&targets).any(|r| r.len() != cols)
        {
            return Err(Error::ShapeMismatch("forecast rows do not match nodes and outputs".into()));
        }
        Ok(Forecast {
            node_ids,
            starts,
            outputs,
            predictions: Mat::from_vec(rows, cols, predictions.concat()),
            targets: Mat::from_vec(rows, cols, targets.concat()),
        })
    }

    /// Columns of the listed nodes only, in this forecast's order.
    pub fn restrict(&self, keep: &BTreeSet<String>) -> Forecast {
        let cols: Vec<usize> = self
            .node_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| keep.contains(*id))
            .flat_map(|(k, _)| k * self.outputs..(k + 1) * self.outputs)
            .collect();
        let pick = |m: &Mat| {
            let mut data = Vec::with_capacity(m.rows * cols.len());
            for r in 0..m.rows {
                data.extend(cols.iter().map(|&c| m.get(r, c)));
            }
            Mat::from_vec(m.rows, cols.len(), data)
        };
        Forecast {
            node_ids: self.node_ids.iter().filter(|id| keep.contains(*id)).cloned().collect(),
            starts: self.starts.clone(),
            outputs: self.outputs,
            predictions: pick(&self.predictions),
            targets: pick(&self.targets),
        }
    }

    pub fn metrics(&self) -> Result<MetricsReport> {
        compute_metrics(&self.predictions, &self.targets)
    }
}

fn check_graph(ens: &TrainedEnsemble, graph: &STGraph) -> Result<()> {
    if graph.node_ids() != ens.origin_topology.node_ids() || graph.timesteps() != ens.split.total {
        return invalid("graph does not match the one the ensemble was built from");
    }
    Ok(())
}

/// `base·⌈|V_i|·M/N⌉` with the build-time `N` and `M`.
fn width_for(base: usize, origin: &Partition, len: usize) -> usize {
    let n = origin.node_count().max(1);
    base * (len * origin.m).div_ceil(n).max(1)
}

/// Rewrites node indices through `index`; used to train on a purged copy of
/// the data, whose indices are a monotone relabelling of the original ones.
fn remap_subgraph(sub: &Subgraph, index: &[usize]) -> Subgraph {
    let mut out = sub.clone();
    out.nodes.iter_mut().for_each(|v| *v = index[*v]);
    out.edges.iter_mut().for_each(|(u, v)| {
        *u = index[*u];
        *v = index[*v];
    });
    for e in &mut out.virtual_edges {
        e.a = index[e.a];
        if let Endpoint::Node(b) = &mut e.b {
            *b = index[*b];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    graph: &STGraph,
    ledger: &mut Ledger,
    stage: &str,
    sub: &Subgraph,
    index: &[usize],
    cfg: &PipelineConfig,
    split: &Split,
    width: usize,
    seed: u64,
) -> Result<SubModel> {
    let local = remap_subgraph(sub, index);
    let mut reader = DataReader::new(graph, ledger, stage);
    let spec = SubModelSpec { width, ..cfg.sub_model };
    train_submodel(&local, &mut reader, &cfg.task, split, &spec, &cfg.sub_train, seed, &BTreeSet::new())
}

/// Scalers of each live node in layout order.
fn node_scalers<'a>(
    partition: &Partition,
    models: &'a [SubModel],
    nodes: &[usize],
) -> Vec<&'a crate::neural::NodeScaler> {
    nodes
        .iter()
        .map(|&v| {
            let i = partition.subgraph_of(v).expect("live node without subgraph");
            let li = partition.subgraphs[i].local_index(v).unwrap();
            &models[i].scalers()[li]
        })
        .collect()
}

/// `[h_v; ŷ_v]` and normalised targets for every live node at each start.
fn window_features(
    reader: &mut DataReader,
    partition: &Partition,
    models: &[SubModel],
    index: &[usize],
    end: usize,
    starts: &[usize],
    task: &ForecastTask,
) -> Result<Vec<GlobalSample>> {
    let mut nodes: Vec<usize> = partition.subgraphs.iter().flat_map(|s| s.nodes.iter().copied()).collect();
    nodes.sort_unstable();
    let n = nodes.len();
    let mut samples: Vec<GlobalSample> =
        starts.iter().map(|_| GlobalSample { inputs: vec![Vec::new(); n], targets: vec![Vec::new(); n] }).collect();
    for (sub, model) in partition.subgraphs.iter().zip(models) {
        let arch = model.arch();
        let raw: Vec<Vec<f64>> = sub.nodes.iter().map(|&v| reader.series(index[v], 0, end)).collect();
        let data = model.normalize(&raw);
        let outs = model.infer(&data, starts)?;
        let (d, o, f) = (arch.width, arch.outputs(), arch.features);
        for (si, ((h, y), &s)) in outs.into_iter().zip(starts).enumerate() {
            for (li, &v) in sub.nodes.iter().enumerate() {
                let k = nodes.binary_search(&v).unwrap();
                let mut input = h[li * d..(li + 1) * d].to_vec();
                input.extend_from_slice(&y[li * o..(li + 1) * o]);
                samples[si].inputs[k] = input;
                let t0 = (s + task.window) * f;
                samples[si].targets[k] = data.series[li][t0..t0 + o].to_vec();
            }
        }
    }
    Ok(samples)
}

/// Meta-graph plus a freshly seeded and trained global layer.
#[allow(clippy::too_many_arguments)]
fn build_global(
    graph: &STGraph,
    ledger: &mut Ledger,
    stage: &str,
    partition: &Partition,
    corr: &CorrelationMap,
    models: &[SubModel],
    index: &[usize],
    cfg: &PipelineConfig,
    split: &Split,
    seed: u64,
) -> Result<(MetaGraph, GlobalLayer)> {
    let keys = key_node_sets(partition, cfg.damping, cfg.pagerank_tol)?;
    let meta = build_meta_graph(partition, &keys, corr, cfg.ganglion_count(partition.m), cfg.budget_c)?;
    let widths: Vec<usize> = models.iter().map(|m| m.arch().width).collect();
    let layout = MetaLayout::new(&meta, partition, &widths, models[0].arch().outputs())?;
    let mut reader = DataReader::new(graph, ledger, stage);
    let starts = split.train_starts(&cfg.task);
    let samples = window_features(&mut reader, partition, models, index, split.train_end, &starts, &cfg.task)?;
    let mut layer = GlobalLayer::new(&meta, &layout, &cfg.global, seed)?;
    train_global(&mut layer, &layout, models, &samples, &cfg.global_train)?;
    Ok((meta, layer))
}

/// Trains every sub-model of `partition` and the global layer.
///
/// `seeds` gives the seed of each subgraph id; `index` maps node indices of
/// the partition to indices of `graph`.
#[allow(clippy::too_many_arguments)]
fn train_all(
    graph: &STGraph,
    ledger: &mut Ledger,
    partition: &Partition,
    origin: &Partition,
    corr: &CorrelationMap,
    index: &[usize],
    cfg: &PipelineConfig,
    split: &Split,
    seeds: &BTreeMap<u64, u64>,
    global_seed: u64,
    timings: &mut BTreeMap<String, f64>,
) -> Result<(Vec<SubModel>, MetaGraph, GlobalLayer)> {
    let clock = Instant::now();
    let mut models = Vec::with_capacity(partition.subgraphs.len());
    let mut slowest: f64 = 0.0;
    for sub in &partition.subgraphs {
        let t = Instant::now();
        let width = width_for(cfg.sub_model.width, origin, sub.len());
        models.push(train_one(graph, ledger, "stage1", sub, index, cfg, split, width, seeds[&sub.id])?);
        slowest = slowest.max(t.elapsed().as_secs_f64());
    }
    timings.insert("stage1".into(), clock.elapsed().as_secs_f64());
    timings.insert("stage1_max".into(), slowest);
    let clock = Instant::now();
    let (meta, layer) = build_global(graph, ledger, "stage2", partition, corr, &models, index, cfg, split, global_seed)?;
    timings.insert("stage2".into(), clock.elapsed().as_secs_f64());
    Ok((models, meta, layer))
}

/// Builds the partition, trains and freezes every sub-model, then builds and
/// trains the global layer.
pub fn build_ensemble(graph: &STGraph, cfg: &PipelineConfig) -> Result<TrainedEnsemble> {
    cfg.validate()?;
    let total = graph.timesteps();
    cfg.task.validate(total).map_err(|e| Error::Config(e.to_string()))?;
    let split = Split::temporal(total);
    split.validate(&cfg.task).map_err(|e| Error::Config(e.to_string()))?;
    let n = graph.node_count();
    if cfg.m > n {
        return Err(Error::Config(format!("m = {} exceeds the {n} nodes", cfg.m)));
    }
    let mut ledger = Ledger::new();
    let mut timings = BTreeMap::new();
    let clock = Instant::now();
    let w = cfg.correlation_window(split.train_end);
    let corr = {
        let mut reader = DataReader::new(graph, &mut ledger, "correlation");
        correlation_map(&reader.prefix_graph(split.train_end)?, w)?
    };
    let topology = graph.topology();
    let m = if cfg.m == 0 {
        let candidates: Vec<usize> = (1..=16.min((n / 3).max(1))).collect();
        select_m(&topology, &corr, cfg.gamma, &candidates)?
    } else {
        cfg.m
    };
    let backbone = extract_backbone(&topology, &corr)?;
    let mut partition = segment(&backbone, m, &topology, &corr)?;
    partition.gamma = cfg.gamma;
    partition.repair(cfg.k_ring);
    timings.insert("partition".into(), clock.elapsed().as_secs_f64());

    let seeds: BTreeMap<u64, u64> =
        partition.subgraphs.iter().map(|s| (s.id, derive_seed(cfg.seed, s.id, BUILD_TAG))).collect();
    let index: Vec<usize> = (0..n).collect();
    let global_seed = derive_seed(cfg.seed, GLOBAL_LAYER_ID, BUILD_TAG);
    let (sub_models, meta, global_layer) = train_all(
        graph, &mut ledger, &partition, &partition, &corr, &index, cfg, &split, &seeds, global_seed, &mut timings,
    )?;
    Ok(TrainedEnsemble {
        config: cfg.clone(),
        split,
        origin_topology: topology.clone(),
        topology,
        correlation: corr,
        origin_partition: partition.clone(),
        partition,
        sub_models,
        meta,
        global_layer,
        ledger,
        history: Vec::new(),
        timings,
    })
}
