use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Node(usize),
    Stub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VirtualKind {
    Reconnection,
    GanglionStub,
    KRing,
}

/// Undirected edge added by repair. `a` is always a member node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualEdge {
    pub a: usize,
    pub b: Endpoint,
    pub kind: VirtualKind,
}

/// One contiguous backbone segment.
///
/// `nodes` are global node indices in backbone order. `edges` are the real
/// directed edges with both endpoints inside the segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    pub id: u64,
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
    pub virtual_edges: Vec<VirtualEdge>,
    pub has_stub: bool,
}

impl Subgraph {
    pub fn new(id: u64, nodes: Vec<usize>, edges: Vec<(usize, usize)>) -> Self {
        Subgraph { id, nodes, edges, virtual_edges: Vec::new(), has_stub: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, v: usize) -> bool {
        self.nodes.contains(&v)
    }

    /// Position of `v` within `nodes`.
    pub fn local_index(&self, v: usize) -> Option<usize> {
        self.nodes.iter().position(|&x| x == v)
    }

    /// Local adjacency over members followed by the stub (if any).
    ///
    /// Real edges keep their direction; virtual edges are set both ways.
    pub fn local_adjacency(&self) -> Mat {
        let n = self.nodes.len();
        let size = n + usize::from(self.has_stub);
        let mut a = Mat::zeros(size, size);
        let idx = |v: usize| self.local_index(v).expect("edge endpoint outside subgraph");
        for &(u, v) in &self.edges {
            a.set(idx(u), idx(v), 1.0);
        }
        for e in &self.virtual_edges {
            let i = idx(e.a);
            let j = match e.b {
                Endpoint::Node(b) => idx(b),
                Endpoint::Stub => n,
            };
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// Undirected degree of every member, counting real and virtual edges.
    pub fn degrees(&self) -> Vec<usize> {
        let a = self.local_adjacency();
        (0..self.nodes.len())
            .map(|i| (0..a.cols).filter(|&j| j != i && (a.get(i, j) != 0.0 || a.get(j, i) != 0.0)).count())
            .collect()
    }

    pub fn min_degree(&self) -> usize {
        self.degrees().into_iter().min().unwrap_or(0)
    }

    /// Members incident to a cut edge.
    pub fn boundary_nodes(&self, cut_edges: &[(usize, usize)]) -> Vec<usize> {
        self.nodes
            .iter()
            .copied()
            .filter(|&v| cut_edges.iter().any(|&(a, b)| a == v || b == v))
            .collect()
    }
}

/// Re-derives all virtual edges of `sub` from its real edges.
///
/// 1. Each member with no real intra edge is linked to its two nearest
///    members in backbone order.
/// 2. Each member incident to a cut edge is linked to the subgraph's single
///    zero-feature stub.
/// 3. Each such boundary member is linked to every member within `k`
///    positions of it in backbone order.
///
/// Only member nodes and the stub are ever referenced, so no foreign data can
/// reach the subgraph.
pub fn repair_subgraph(sub: &Subgraph, cut_edges: &[(usize, usize)], k: usize) -> Subgraph {
    let n = sub.nodes.len();
    let mut out = Subgraph::new(sub.id, sub.nodes.clone(), sub.edges.clone());
    let mut seen: BTreeSet<(usize, Endpoint)> = BTreeSet::new();
    let mut add = |out: &mut Subgraph, i: usize, j: Endpoint, kind: VirtualKind| {
        let key = match j {
            Endpoint::Node(j) => (i.min(j), Endpoint::Node(i.max(j))),
            Endpoint::Stub => (i, Endpoint::Stub),
        };
        if seen.insert(key) {
            let b = match j {
                Endpoint::Node(j) => Endpoint::Node(out.nodes[j]),
                Endpoint::Stub => Endpoint::Stub,
            };
            out.virtual_edges.push(VirtualEdge { a: out.nodes[i], b, kind });
        }
    };

    let mut connected = vec![false; n];
    for &(u, v) in &sub.edges {
        if let (Some(i), Some(j)) = (sub.local_index(u), sub.local_index(v)) {
            connected[i] = true;
            connected[j] = true;
        }
    }
    for i in 0..n {
        if connected[i] {
            continue;
        }
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by_key(|&j| (j.abs_diff(i), j));
        for &j in others.iter().take(2) {
            add(&mut out, i, Endpoint::Node(j), VirtualKind::Reconnection);
        }
    }

    let boundary: Vec<usize> = (0..n)
        .filter(|&i| cut_edges.iter().any(|&(a, b)| a == sub.nodes[i] || b == sub.nodes[i]))
        .collect();
    for &i in &boundary {
        out.has_stub = true;
        add(&mut out, i, Endpoint::Stub, VirtualKind::GanglionStub);
    }
    for &i in &boundary {
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(n.saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                add(&mut out, i, Endpoint::Node(j), VirtualKind::KRing);
            }
        }
    }
    out
}
