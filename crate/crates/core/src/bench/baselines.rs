//! Comparison models: one unpartitioned forecaster retrained from zero on
//! every deletion, and SISA-style random node shards.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::error::{invalid, Error, Result};
use crate::esc::Subgraph;
use crate::neural::{train_submodel, DataReader, Ledger, Split, SubModel};
use crate::stgraph::{DeletionRequest, STGraph, Topology};
use crate::unlearn::{Forecast, PipelineConfig};

const SCRATCH_TAG: &str = "scratch";
const SISA_TAG: &str = "sisa";
/// Id under which the SISA shard assignment draws its permutation.
const SHARD_PERMUTATION_ID: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Scratch,
    Sisa,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Shard {
    /// Members with the graph edges among them; no repair.
    pub subgraph: Subgraph,
    pub model: SubModel,
}

/// A set of independently trained shards. Each live node is forecast by
/// the shard that owns it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShardedModel {
    pub kind: BaselineKind,
    pub config: PipelineConfig,
    pub split: Split,
    pub topology: Topology,
    pub shards: Vec<Shard>,
    pub ledger: Ledger,
    pub history: Vec<DeletionRequest>,
    #[serde(skip)]
    pub timings: BTreeMap<String, f64>,
}

fn induced(id: u64, nodes: Vec<usize>, topo: &Topology) -> Subgraph {
    let set: BTreeSet<usize> = nodes.iter().copied().collect();
    let edges = topo.edges().iter().copied().filter(|(u, v)| set.contains(u) && set.contains(v)).collect();
    Subgraph::new(id, nodes, edges)
}

fn prepare(graph: &STGraph, cfg: &PipelineConfig) -> Result<Split> {
    cfg.validate()?;
    cfg.task.validate(graph.timesteps()).map_err(|e| Error::Config(e.to_string()))?;
    let split = Split::temporal(graph.timesteps());
    split.validate(&cfg.task).map_err(|e| Error::Config(e.to_string()))?;
    Ok(split)
}

fn train_shard(
    graph: &STGraph,
    ledger: &mut Ledger,
    stage: &str,
    sub: &Subgraph,
    cfg: &PipelineConfig,
    split: &Split,
    seed: u64,
) -> Result<SubModel> {
    let mut reader = DataReader::new(graph, ledger, stage);
    train_submodel(sub, &mut reader, &cfg.task, split, &cfg.sub_model, &cfg.sub_train, seed, &BTreeSet::new())
}

fn record_stage1(timings: &mut BTreeMap<String, f64>, key: &str, per_shard: &[f64]) {
    timings.insert(key.into(), per_shard.iter().sum());
    timings.insert(format!("{key}_max"), per_shard.iter().copied().fold(0.0, f64::max));
}

/// One forecaster over every node with the plain graph adjacency.
pub fn train_scratch(graph: &STGraph, cfg: &PipelineConfig) -> Result<ShardedModel> {
    let split = prepare(graph, cfg)?;
    let topology = graph.topology();
    let mut ledger = Ledger::new();
    let sub = induced(0, topology.alive_nodes().collect(), &topology);
    let clock = Instant::now();
    let model = train_shard(graph, &mut ledger, "stage1", &sub, cfg, &split, derive_seed(cfg.seed, 0, SCRATCH_TAG))?;
    let mut timings = BTreeMap::new();
    record_stage1(&mut timings, "stage1", &[clock.elapsed().as_secs_f64()]);
    Ok(ShardedModel {
        kind: BaselineKind::Scratch,
        config: cfg.clone(),
        split,
        topology,
        shards: vec![Shard { subgraph: sub, model }],
        ledger,
        history: Vec::new(),
        timings,
    })
}

/// `shards` disjoint random node sets of near-equal size, each trained in
/// isolation on its induced edges.
pub fn train_sisa(graph: &STGraph, cfg: &PipelineConfig, shards: usize) -> Result<ShardedModel> {
    let split = prepare(graph, cfg)?;
    let n = graph.node_count();
    if shards == 0 || shards > n {
        return Err(Error::Config(format!("sisa needs 1..={n} shards, got {shards}")));
    }
    let topology = graph.topology();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHARD_PERMUTATION_ID, SISA_TAG)));
    let mut ledger = Ledger::new();
    let mut out = Vec::with_capacity(shards);
    let mut times = Vec::with_capacity(shards);
    for i in 0..shards {
        let mut nodes = perm[i * n / shards..(i + 1) * n / shards].to_vec();
        nodes.sort_unstable();
        let sub = induced(i as u64, nodes, &topology);
        let clock = Instant::now();
        let seed = derive_seed(cfg.seed, i as u64, SISA_TAG);
        let model = train_shard(graph, &mut ledger, "stage1", &sub, cfg, &split, seed)?;
        times.push(clock.elapsed().as_secs_f64());
        out.push(Shard { subgraph: sub, model });
    }
    let mut timings = BTreeMap::new();
    record_stage1(&mut timings, "stage1", &times);
    Ok(ShardedModel {
        kind: BaselineKind::Sisa,
        config: cfg.clone(),
        split,
        topology,
        shards: out,
        ledger,
        history: Vec::new(),
        timings,
    })
}

impl ShardedModel {
    /// Purges the request, then retrains: the whole model from zero for
    /// scratch, only the shards holding deleted data for SISA.
    pub fn unlearn(&self, graph: &STGraph, request: &DeletionRequest) -> Result<ShardedModel> {
        if graph.node_ids() != self.topology.node_ids() || graph.timesteps() != self.split.total {
            return invalid("graph does not match the one the baseline was trained on");
        }
        let mut post = self.clone();
        post.timings.clear();
        if request.is_empty() {
            return Ok(post);
        }
        let r = request.resolve(&self.topology)?;
        if self.topology.alive_count() - r.nodes.len() == 0 {
            return invalid("deletion request removes every live node");
        }
        let clock = Instant::now();
        post.ledger.record_purge(&request.nodes);
        post.topology.remove(&r.nodes, &r.edges);
        let digest = request.digest();
        let cfg = &self.config;
        let mut times = Vec::new();
        let mut shards = Vec::with_capacity(self.shards.len());
        for shard in &self.shards {
            let touched = shard.subgraph.nodes.iter().any(|v| r.nodes.contains(v))
                || r.edges.iter().any(|&(u, v)| shard.subgraph.contains(u) && shard.subgraph.contains(v));
            let retrain = touched || self.kind == BaselineKind::Scratch;
            if !retrain {
                shards.push(shard.clone());
                continue;
            }
            let nodes: Vec<usize> = shard.subgraph.nodes.iter().copied().filter(|v| !r.nodes.contains(v)).collect();
            if nodes.is_empty() {
                continue;
            }
            let id = shard.subgraph.id;
            let sub = induced(id, nodes, &post.topology);
            let seed = match self.kind {
                BaselineKind::Scratch => derive_seed(cfg.seed, id, SCRATCH_TAG),
                BaselineKind::Sisa => derive_seed(cfg.seed, id, &digest),
            };
            let t = Instant::now();
            let model = train_shard(graph, &mut post.ledger, "unlearn/stage1", &sub, cfg, &self.split, seed)?;
            times.push(t.elapsed().as_secs_f64());
            shards.push(Shard { subgraph: sub, model });
        }
        post.shards = shards;
        post.history.push(request.clone());
        record_stage1(&mut post.timings, "unlearn_stage1", &times);
        post.timings.insert("unlearn".into(), clock.elapsed().as_secs_f64());
        Ok(post)
    }

    /// Ids of shards whose parameters differ from `other`'s.
    pub fn changed_shards(&self, other: &ShardedModel) -> Vec<u64> {
        let before: BTreeMap<u64, String> = other.shards.iter().map(|s| (s.subgraph.id, s.model.digest())).collect();
        self.shards
            .iter()
            .filter(|s| before.get(&s.subgraph.id) != Some(&s.model.digest()))
            .map(|s| s.subgraph.id)
            .collect()
    }

    pub fn live_node_ids(&self) -> Vec<String> {
        self.topology.alive_nodes().map(|v| self.topology.node_id(v).to_string()).collect()
    }

    /// Raw-scale forecasts for every live node at each window start.
    pub fn forecast(&mut self, graph: &STGraph, starts: &[usize]) -> Result<Forecast> {
        let live: Vec<usize> = self.topology.alive_nodes().collect();
        let pos: BTreeMap<usize, usize> = live.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let f = graph.feature_dim();
        let outputs = self.config.task.horizon * f;
        let cols = live.len() * outputs;
        let mut pred = vec![vec![0.0; cols]; starts.len()];
        let mut targ = vec![vec![0.0; cols]; starts.len()];
        let mut reader = DataReader::new(graph, &mut self.ledger, "eval");
        for shard in &self.shards {
            let raw: Vec<Vec<f64>> = shard.subgraph.nodes.iter().map(|&v| reader.series(v, 0, graph.timesteps())).collect();
            let data = shard.model.normalize(&raw);
            let outs = shard.model.infer(&data, starts)?;
            let scalers = shard.model.scalers();
            for (si, ((_, y), &s)) in outs.iter().zip(starts).enumerate() {
                for (li, &v) in shard.subgraph.nodes.iter().enumerate() {
                    let c = pos[&v] * outputs;
                    let t0 = (s + self.config.task.window) * f;
                    pred[si][c..c + outputs].copy_from_slice(&scalers[li].inverse(&y[li * outputs..(li + 1) * outputs]));
                    let norm = &data.series[li][t0..t0 + outputs];
                    targ[si][c..c + outputs].copy_from_slice(&scalers[li].inverse(norm));
                }
            }
        }
        Forecast::new(self.live_node_ids(), starts.to_vec(), outputs, pred, targ)
    }

    pub fn test_forecast(&mut self, graph: &STGraph) -> Result<Forecast> {
        let starts = self.split.test_starts(&self.config.task);
        self.forecast(graph, &starts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{SubModelSpec, TrainConfig};
    use crate::stgraph::{generate_synthetic, ForecastTask};

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            seed: 5,
            task: ForecastTask::new(2, 6),
            sub_model: SubModelSpec { channels: 3, kernel: 2, width: 4 },
            sub_train: TrainConfig { epochs: 2, batch: 16, ..TrainConfig::default() },
            ..PipelineConfig::default()
        }
    }

    fn graph() -> STGraph {
        generate_synthetic(20, 160, 9, 0.3).unwrap().graph
    }

    #[test]
    fn sisa_shards_cover_nodes_once() {
        let g = graph();
        let m = train_sisa(&g, &cfg(), 4).unwrap();
        let mut all: Vec<usize> = m.shards.iter().flat_map(|s| s.subgraph.nodes.clone()).collect();
        assert!(m.shards.iter().all(|s| s.subgraph.len() == 5));
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        for s in &m.shards {
            assert!(s.subgraph.edges.iter().all(|&(u, v)| s.subgraph.contains(u) && s.subgraph.contains(v)));
            assert!(s.subgraph.virtual_edges.is_empty());
        }
    }

    #[test]
    fn sisa_retrains_only_the_owning_shard() {
        let g = graph();
        let pre = train_sisa(&g, &cfg(), 4).unwrap();
        let victim = pre.shards[2].subgraph.nodes[1];
        let req = DeletionRequest::from_nodes([g.node_id(victim)]);
        let post = pre.unlearn(&g, &req).unwrap();
        assert_eq!(post.changed_shards(&pre), vec![2]);
        assert!(post.ledger.clean());
        assert!(!post.live_node_ids().contains(&g.node_id(victim).to_string()));
        let mut post = post;
        let fc = post.test_forecast(&g).unwrap();
        assert_eq!(fc.node_ids.len(), 19);
        assert!(post.ledger.clean());
    }

    #[test]
    fn scratch_retrains_everything_from_the_build_seed() {
        let g = graph();
        let pre = train_scratch(&g, &cfg()).unwrap();
        assert_eq!(pre.shards.len(), 1);
        let req = DeletionRequest::from_nodes([g.node_id(3), g.node_id(11)]);
        let post = pre.unlearn(&g, &req).unwrap();
        assert_eq!(post.changed_shards(&pre), vec![0]);
        assert!(post.ledger.clean());

        // Training directly on the purged graph gives the same parameters.
        let direct = train_scratch(&g.purged(&req).unwrap(), &cfg()).unwrap();
        assert_eq!(direct.shards[0].model.params(), post.shards[0].model.params());
    }

    #[test]
    fn forecasts_are_deterministic_and_finite() {
        let g = graph();
        let mut a = train_sisa(&g, &cfg(), 3).unwrap();
        let mut b = train_sisa(&g, &cfg(), 3).unwrap();
        let fa = a.test_forecast(&g).unwrap();
        let fb = b.test_forecast(&g).unwrap();
        assert_eq!(fa, fb);
        assert!(fa.predictions.data.iter().all(|x| x.is_finite()));
        let mae = fa.metrics().unwrap().mae;
        assert!(mae > 0.0 && mae < 5.0, "{mae}");
    }

    #[test]
    fn rejects_bad_shard_counts_and_total_deletion() {
        let g = graph();
        assert!(train_sisa(&g, &cfg(), 0).is_err());
        assert!(train_sisa(&g, &cfg(), 21).is_err());
        let pre = train_scratch(&g, &cfg()).unwrap();
        assert!(pre.unlearn(&g, &DeletionRequest::from_nodes(g.node_ids().iter().cloned())).is_err());
    }
}
