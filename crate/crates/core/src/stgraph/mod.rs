//! Spatio-temporal graph data model, deletion requests and forecast tasks.

mod io;
mod metrics;
mod synth;

pub use io::{export_csv, ingest_csv, ingest_readers, parse_request, read_request_file, write_request_file};
pub use metrics::{compute_metrics, MetricsReport};
pub use synth::{generate_synthetic, SyntheticData, HELD_OUT_STEPS};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::digest::Hasher;
use crate::error::{invalid, Error, Result};

/// A graph with fixed directed topology and a `T × N × F` feature tensor.
///
/// Features are stored timestep-major: entry `(t, v, f)` lives at
/// `(t * N + v) * F + f`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct STGraph {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    timesteps: usize,
    features: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<bool>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    node_ids: Vec<String>,
    timesteps: usize,
    features: usize,
    edges: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl TryFrom<GraphRecord> for STGraph {
    type Error = Error;
    fn try_from(r: GraphRecord) -> Result<Self> {
        STGraph::new(r.node_ids, r.timesteps, r.features, r.edges, r.values)
    }
}

impl From<STGraph> for GraphRecord {
    fn from(g: STGraph) -> Self {
        GraphRecord {
            node_ids: g.node_ids,
            timesteps: g.timesteps,
            features: g.features,
            edges: g.edges,
            values: g.values,
        }
    }
}

impl PartialEq for STGraph {
    fn eq(&self, other: &Self) -> bool {
        self.node_ids == other.node_ids
            && self.timesteps == other.timesteps
            && self.features == other.features
            && self.edges == other.edges
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl STGraph {
    pub fn new(
        node_ids: Vec<String>,
        timesteps: usize,
        features: usize,
        mut edges: Vec<(usize, usize)>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph has no nodes".into()));
        }
        if timesteps < 2 {
            return Err(Error::InvalidGraph(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if features == 0 {
            return Err(Error::InvalidGraph("feature dimension must be at least 1".into()));
        }
        if values.len() != timesteps * n * features {
            return Err(Error::InvalidGraph(format!(
                "feature tensor has {} entries, expected {timesteps}x{n}x{features}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGraph(format!("non-finite feature at flat index {pos}")));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, id) in node_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{id}`")));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut adjacency = vec![false; n * n];
        for &(u, v) in &edges {
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!("edge ({u},{v}) out of range")));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop on `{}`", node_ids[u])));
            }
            adjacency[u * n + v] = true;
        }
        Ok(STGraph { node_ids, index, timesteps, features, edges, adjacency, values })
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_id(&self, v: usize) -> &str {
        &self.node_ids[v]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Sorted, de-duplicated directed edge list.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u * self.node_count() + v]
    }

    #[inline]
    pub fn value(&self, t: usize, v: usize, f: usize) -> f64 {
        self.values[(t * self.node_count() + v) * self.features + f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Node `v`'s full history, `T × F`, timestep-major.
    pub fn node_series(&self, v: usize) -> Vec<f64> {
        let f = self.features;
        let mut out = Vec::with_capacity(self.timesteps * f);
        for t in 0..self.timesteps {
            let base = (t * self.node_count() + v) * f;
            out.extend_from_slice(&self.values[base..base + f]);
        }
        out
    }

    pub fn topology(&self) -> Topology {
        Topology {
            node_ids: self.node_ids.clone(),
            edges: self.edges.clone(),
            alive: vec![true; self.node_count()],
        }
    }

    /// The first `len` timesteps.
    pub fn time_prefix(&self, len: usize) -> Result<STGraph> {
        if len < 2 || len > self.timesteps {
            return invalid(format!("prefix length {len} outside 2..={}", self.timesteps));
        }
        let keep = len * self.node_count() * self.features;
        STGraph::new(
            self.node_ids.clone(),
            len,
            self.features,
            self.edges.clone(),
            self.values[..keep].to_vec(),
        )
    }

    /// Removes the requested nodes (with all incident edges) and edges.
    pub fn purged(&self, request: &DeletionRequest) -> Result<STGraph> {
        let resolved = request.resolve(&self.topology())?;
        let keep: Vec<usize> = (0..self.node_count()).filter(|v| !resolved.nodes.contains(v)).collect();
        if keep.is_empty() {
            return invalid("deletion request removes every node");
        }
        let mut remap = vec![usize::MAX; self.node_count()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| remap[u] != usize::MAX && remap[v] != usize::MAX)
            .filter(|e| !resolved.edges.contains(e))
            .map(|&(u, v)| (remap[u], remap[v]))
            .collect();
        let n = self.node_count();
        let f = self.features;
        let mut values = Vec::with_capacity(self.timesteps * keep.len() * f);
        for t in 0..self.timesteps {
            for &v in &keep {
                let base = (t * n + v) * f;
                values.extend_from_slice(&self.values[base..base + f]);
            }
        }
        STGraph::new(
            keep.iter().map(|&v| self.node_ids[v].clone()).collect(),
            self.timesteps,
            f,
            edges,
            values,
        )
    }

    /// Returns a copy with the features of `nodes` rewritten by `map(t, f, old)`.
    pub fn with_node_features<F>(&self, nodes: &BTreeSet<String>, map: F) -> Result<STGraph>
    where
        F: Fn(usize, usize, f64) -> f64,
    {
        let mut out = self.clone();
        let n = self.node_count();
        for id in nodes {
            let v = self.index_of(id).ok_or_else(|| Error::UnknownNode(id.clone()))?;
            for t in 0..self.timesteps {
                for f in 0..self.features {
                    let i = (t * n + v) * self.features + f;
                    out.values[i] = map(t, f, self.values[i]);
                }
            }
        }
        if out.values.iter().any(|v| !v.is_finite()) {
            return invalid("feature rewrite produced non-finite values");
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new("callosum/stgraph");
        h.u64(self.node_count() as u64).u64(self.timesteps as u64).u64(self.features as u64);
        for id in &self.node_ids {
            h.str(id);
        }
        for &(u, v) in &self.edges {
            h.u64(u as u64).u64(v as u64);
        }
        h.f64s(&self.values);
        h.finish()
    }
}

/// Graph structure without any feature data.
///
/// Structural operations (partitioning, repair, meta-graph assembly) work on a
/// `Topology` so they cannot touch node data by construction. Node indices are
/// stable for the lifetime of an ensemble; deleted nodes are marked dead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    node_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
    alive: Vec<bool>,
}

impl Topology {
    pub fn from_edges(node_ids: Vec<String>, mut edges: Vec<(usize, usize)>) -> Self {
        edges.sort_unstable();
        edges.dedup();
        let alive = vec![true; node_ids.len()];
        Topology { node_ids, edges, alive }
    }

    /// Number of node slots, including deleted ones.
    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn is_alive(&self, v: usize) -> bool {
        self.alive[v]
    }

    pub fn alive_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.node_count()).filter(|&v| self.alive[v])
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_id(&self, v: usize) -> &str {
        &self.node_ids[v]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    /// Live directed edges, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u, v)).is_ok()
    }

    pub fn out_neighbors(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        let lo = self.edges.partition_point(|&e| e < (u, 0));
        let hi = self.edges.partition_point(|&e| e < (u + 1, 0));
        self.edges[lo..hi].iter().map(|&(_, v)| v)
    }

    pub fn remove(&mut self, nodes: &BTreeSet<usize>, edges: &BTreeSet<(usize, usize)>) {
        for &v in nodes {
            self.alive[v] = false;
        }
        self.edges.retain(|e| !nodes.contains(&e.0) && !nodes.contains(&e.1) && !edges.contains(e));
    }
}

/// Nodes and edges whose influence must be removed, by external id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

/// A request resolved against a topology's index space.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ResolvedRequest {
    pub nodes: BTreeSet<usize>,
    pub edges: BTreeSet<(usize, usize)>,
}

impl DeletionRequest {
    pub fn from_nodes<I, S>(nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        DeletionRequest { nodes: nodes.into_iter().map(Into::into).collect(), edges: BTreeSet::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    /// Maps ids to indices, rejecting unknown or already-deleted nodes and
    /// edges that do not exist.
    pub fn resolve(&self, topo: &Topology) -> Result<ResolvedRequest> {
        let lookup: HashMap<&str, usize> =
            topo.node_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let find = |id: &String| -> Result<usize> {
            match lookup.get(id.as_str()) {
                Some(&v) if topo.is_alive(v) => Ok(v),
                _ => Err(Error::UnknownNode(id.clone())),
            }
        };
        let mut out = ResolvedRequest::default();
        for id in &self.nodes {
            out.nodes.insert(find(id)?);
        }
        for (a, b) in &self.edges {
            let (u, v) = (find(a)?, find(b)?);
            if !topo.has_edge(u, v) {
                return Err(Error::UnknownEdge(a.clone(), b.clone()));
            }
            out.edges.insert((u, v));
        }
        Ok(out)
    }

    pub fn digest(&self) -> String {
        let mut h = Hasher::new("callosum/request");
        h.u64(self.nodes.len() as u64);
        for n in &self.nodes {
            h.str(n);
        }
        h.u64(self.edges.len() as u64);
        for (a, b) in &self.edges {
            h.str(a).str(b);
        }
        h.finish()
    }
}

/// Forecast horizon `P` and model history window `W`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastTask {
    pub horizon: usize,
    pub window: usize,
}

impl ForecastTask {
    pub fn new(horizon: usize, window: usize) -> Self {
        ForecastTask { horizon, window }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.horizon < 1 {
            return invalid("forecast horizon must be at least 1");
        }
        if self.window < 1 || self.window > timesteps.saturating_sub(1) {
            return invalid(format!("window {} outside 1..={}", self.window, timesteps.saturating_sub(1)));
        }
        Ok(())
    }
}

impl Default for ForecastTask {
    fn default() -> Self {
        ForecastTask { horizon: 3, window: 12 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> STGraph {
        let ids = (0..n).map(|i| format!("n{i}")).collect();
        let edges = (0..n - 1).map(|i| (i, i + 1)).collect();
        let values = (0..3 * n).map(|i| i as f64).collect();
        STGraph::new(ids, 3, 1, edges, values).unwrap()
    }

    #[test]
    fn rejects_bad_graphs() {
        let ids = vec!["a".to_string(), "a".to_string()];
        assert!(STGraph::new(ids, 2, 1, vec![], vec![0.0; 4]).is_err());
        let ids = vec!["a".to_string(), "b".to_string()];
        assert!(STGraph::new(ids.clone(), 2, 1, vec![(0, 0)], vec![0.0; 4]).is_err());
        assert!(STGraph::new(ids.clone(), 1, 1, vec![], vec![0.0; 2]).is_err());
        assert!(STGraph::new(ids.clone(), 2, 1, vec![], vec![0.0; 3]).is_err());
        assert!(STGraph::new(ids, 2, 1, vec![], vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn purge_drops_node_rows_and_edges() {
        let g = line(4);
        let p = g.purged(&DeletionRequest::from_nodes(["n1"])).unwrap();
        assert_eq!(p.node_ids(), &["n0", "n2", "n3"]);
        assert_eq!(p.edges(), &[(1, 2)]);
        assert_eq!(p.value(1, 1, 0), g.value(1, 2, 0));
    }

    #[test]
    fn resolve_rejects_unknowns() {
        let topo = line(3).topology();
        assert!(matches!(
            DeletionRequest::from_nodes(["zz"]).resolve(&topo),
            Err(Error::UnknownNode(id)) if id == "zz"
        ));
        let mut req = DeletionRequest::default();
        req.edges.insert(("n1".into(), "n0".into()));
        assert!(matches!(req.resolve(&topo), Err(Error::UnknownEdge(..))));
    }

    #[test]
    fn topology_neighbors_and_removal() {
        let mut topo = Topology::from_edges(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (0, 2), (1, 2), (2, 0)],
        );
        assert_eq!(topo.out_neighbors(0).collect::<Vec<_>>(), vec![1, 2]);
        topo.remove(&BTreeSet::from([1]), &BTreeSet::from([(2, 0)]));
        assert_eq!(topo.edges(), &[(0, 2)]);
        assert_eq!(topo.alive_nodes().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn forecast_task_bounds() {
        assert!(ForecastTask::new(1, 1).validate(2).is_ok());
        assert!(ForecastTask::new(0, 1).validate(10).is_err());
        assert!(ForecastTask::new(1, 10).validate(10).is_err());
    }
}
