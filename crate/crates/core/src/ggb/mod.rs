//! Global bridging graph: per-subgraph key nodes, boundary nodes and ganglion
//! vertices joined by a sparse weighted meta-adjacency.

mod meta;
mod pagerank;

pub use meta::{build_meta_graph, key_node_sets, meta_budget, MetaEdge, MetaGraph, MetaVertex};
pub use pagerank::{key_count, pagerank, select_key_nodes, PageRankScores};
