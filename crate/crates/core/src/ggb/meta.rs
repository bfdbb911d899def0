use std::collections::{BTreeMap, BTreeSet};

use petgraph::algo::matching::maximum_matching;
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{invalid, Error, Result};
use crate::esc::{CorrelationMap, Partition};

use super::{pagerank, select_key_nodes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum MetaVertex {
    /// A key or boundary node of the data graph.
    Real(usize),
    /// Summary slot of a subgraph.
    Slot(usize),
    Ganglion(usize),
}

/// Undirected weighted meta-edge between vertex positions `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaGraph {
    /// Key nodes per subgraph, highest score first.
    pub key_nodes: Vec<Vec<usize>>,
    pub boundary_nodes: Vec<usize>,
    /// Real vertices (ascending node index), then slots, then ganglions.
    pub vertices: Vec<MetaVertex>,
    pub edges: Vec<MetaEdge>,
    pub budget: usize,
    pub ganglion_count: usize,
    /// Edge count before sparsification.
    pub initial_edge_count: usize,
    pub partition_digest: String,
}

impl MetaGraph {
    pub fn real_count(&self) -> usize {
        self.vertices.iter().filter(|v| matches!(v, MetaVertex::Real(_))).count()
    }

    pub fn slot_count(&self) -> usize {
        self.vertices.iter().filter(|v| matches!(v, MetaVertex::Slot(_))).count()
    }

    pub fn position(&self, vertex: MetaVertex) -> Option<usize> {
        self.vertices.binary_search(&vertex).ok()
    }

    /// Owning subgraph of every non-ganglion vertex.
    pub fn vertex_subgraphs(&self, partition: &Partition) -> Vec<Option<usize>> {
        self.vertices
            .iter()
            .map(|v| match *v {
                MetaVertex::Real(n) => partition.subgraph_of(n),
                MetaVertex::Slot(s) => Some(s),
                MetaVertex::Ganglion(_) => None,
            })
            .collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertices.len()];
        for e in &self.edges {
            deg[e.a] += 1;
            deg[e.b] += 1;
        }
        deg
    }

    pub fn digest(&self) -> String {
        json_digest("meta-graph", self)
    }
}

/// `⌈c·M·log2 M⌉`, with `log2 M` floored at 1 so a single subgraph still has
/// room for its aggregation and ganglion edges.
pub fn meta_budget(c: f64, m: usize) -> usize {
    (c * m as f64 * (m as f64).log2().max(1.0)).ceil() as usize
}

/// PageRank key nodes of every (repaired) subgraph.
pub fn key_node_sets(partition: &Partition, damping: f64, tol: f64) -> Result<Vec<Vec<usize>>> {
    partition
        .subgraphs
        .iter()
        .map(|s| Ok(select_key_nodes(s, &pagerank(&s.local_adjacency(), damping, tol)?)))
        .collect()
}

/// Assembles the meta-graph and sparsifies it to the edge budget.
///
/// Edges: each real vertex to its subgraph slot; every ganglion to every real
/// vertex; key nodes of subgraphs joined by a cut edge to each other; and the
/// endpoints of every cut edge, weighted by the mean `|ρ|` of the cut edges
/// between them. Other weights are 1. Over budget, the lightest edges are
/// dropped, except for an edge cover that keeps every vertex attached.
pub fn build_meta_graph(
    partition: &Partition,
    key_sets: &[Vec<usize>],
    corr: &CorrelationMap,
    ganglion_count: usize,
    budget_c: f64,
) -> Result<MetaGraph> {
    let m = partition.subgraphs.len();
    if key_sets.len() != m {
        return invalid(format!("{} key sets for {m} subgraphs", key_sets.len()));
    }
    if ganglion_count == 0 {
        return invalid("at least one ganglion is required");
    }
    if !(budget_c > 0.0) {
        return invalid(format!("budget factor must be positive, got {budget_c}"));
    }
    let boundary: BTreeSet<usize> = partition.cut_edges.iter().flat_map(|&(u, v)| [u, v]).collect();
    let mut real: BTreeSet<usize> = boundary.clone();
    for keys in key_sets {
        real.extend(keys.iter().copied());
    }
    let mut vertices: Vec<MetaVertex> = real.iter().map(|&v| MetaVertex::Real(v)).collect();
    vertices.extend((0..m).map(MetaVertex::Slot));
    vertices.extend((0..ganglion_count).map(MetaVertex::Ganglion));
    let pos = |v: MetaVertex| vertices.binary_search(&v).expect("vertex registered");

    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut put = |a: usize, b: usize, w: f64| {
        weights.insert((a.min(b), a.max(b)), w);
    };
    for &v in &real {
        let s = partition.subgraph_of(v).ok_or_else(|| Error::InvalidArgument(format!("node {v} is not assigned")))?;
        put(pos(MetaVertex::Real(v)), pos(MetaVertex::Slot(s)), 1.0);
        for g in 0..ganglion_count {
            put(pos(MetaVertex::Real(v)), pos(MetaVertex::Ganglion(g)), 1.0);
        }
    }
    let mut adjacent: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut cut_rho: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for &(u, v) in &partition.cut_edges {
        let (su, sv) = (partition.subgraph_of(u).unwrap(), partition.subgraph_of(v).unwrap());
        adjacent.insert((su.min(sv), su.max(sv)));
        let key = (pos(MetaVertex::Real(u)).min(pos(MetaVertex::Real(v))), pos(MetaVertex::Real(u)).max(pos(MetaVertex::Real(v))));
        let entry = cut_rho.entry(key).or_insert((0.0, 0));
        entry.0 += corr.get(u, v).abs();
        entry.1 += 1;
    }
    for &(si, sj) in &adjacent {
        for &ku in &key_sets[si] {
            for &kv in &key_sets[sj] {
                put(pos(MetaVertex::Real(ku)), pos(MetaVertex::Real(kv)), 1.0);
            }
        }
    }
    for (&(a, b), &(sum, count)) in &cut_rho {
        put(a, b, sum / count as f64);
    }

    let budget = meta_budget(budget_c, m);
    let mut edges: Vec<MetaEdge> = weights.into_iter().map(|((a, b), weight)| MetaEdge { a, b, weight }).collect();
    let initial_edge_count = edges.len();
    if edges.len() > budget {
        let cover = edge_cover(vertices.len(), &edges);
        if cover.len() > budget {
            return Err(Error::BudgetTooSmall { budget, deficit: cover.len() - budget });
        }
        let mut keep = vec![false; edges.len()];
        for &i in &cover {
            keep[i] = true;
        }
        let mut rest: Vec<usize> = (0..edges.len()).filter(|&i| !keep[i]).collect();
        rest.sort_by(|&i, &j| heavier_first(&edges[i], &edges[j]));
        for &i in rest.iter().take(budget - cover.len()) {
            keep[i] = true;
        }
        let mut i = 0;
        edges.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    Ok(MetaGraph {
        key_nodes: key_sets.to_vec(),
        boundary_nodes: boundary.into_iter().collect(),
        vertices,
        edges,
        budget,
        ganglion_count,
        initial_edge_count,
        partition_digest: partition.digest(),
    })
}

fn heavier_first(x: &MetaEdge, y: &MetaEdge) -> std::cmp::Ordering {
    y.weight.total_cmp(&x.weight).then((x.a, x.b).cmp(&(y.a, y.b)))
}

/// Minimum-cardinality edge set touching every vertex: a maximum matching
/// plus the heaviest edge of each vertex it leaves unmatched.
fn edge_cover(vertex_count: usize, edges: &[MetaEdge]) -> Vec<usize> {
    let mut graph = UnGraph::<(), usize>::with_capacity(vertex_count, edges.len());
    for _ in 0..vertex_count {
        graph.add_node(());
    }
    for (i, e) in edges.iter().enumerate() {
        graph.add_edge(NodeIndex::new(e.a), NodeIndex::new(e.b), i);
    }
    let matching = maximum_matching(&graph);
    let mut covered = vec![false; vertex_count];
    let mut chosen = Vec::new();
    for (x, y) in matching.edges() {
        let i = *graph.edges_connecting(x, y).next().expect("matched pair is an edge").weight();
        covered[x.index()] = true;
        covered[y.index()] = true;
        chosen.push(i);
    }
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&i, &j| heavier_first(&edges[i], &edges[j]));
    for &i in &order {
        let e = edges[i];
        if !covered[e.a] || !covered[e.b] {
            covered[e.a] = true;
            covered[e.b] = true;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    chosen
}
