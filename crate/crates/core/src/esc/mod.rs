//! Enhanced subgraph construction.
//!
//! Lagged edge correlations drive a greedy backbone ordering of all nodes;
//! contiguous backbone segments become subgraphs, and each subgraph is then
//! repaired with virtual edges that never leave its own node set.

mod backbone;
mod correlation;
mod partition;
mod repair;

pub use backbone::{backbone_score, extract_backbone};
pub use correlation::{correlation_map, pearson, CorrelationMap, EdgeRho};
pub use partition::{info_retention, m_objective, segment, select_m, Partition};
pub use repair::{repair_subgraph, Endpoint, Subgraph, VirtualEdge, VirtualKind};

/// Backbone position of every node slot; `usize::MAX` for nodes not on it.
pub fn backbone_positions(backbone: &[usize], node_count: usize) -> Vec<usize> {
    let mut pos = vec![usize::MAX; node_count];
    for (i, &v) in backbone.iter().enumerate() {
        pos[v] = i;
    }
    pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgraph::generate_synthetic;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_partition(seed: u64) -> (crate::stgraph::Topology, CorrelationMap, Partition) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(4..40);
        let g = generate_synthetic(n, 64, seed, rng.random_range(0.0..0.9)).unwrap().graph;
        let topo = g.topology();
        let corr = correlation_map(&g, 16).unwrap();
        let d = extract_backbone(&topo, &corr).unwrap();
        let m = rng.random_range(1..=n.min(8));
        let mut p = segment(&d, m, &topo, &corr).unwrap();
        p.repair(rng.random_range(0..3));
        (topo, corr, p)
    }

    #[test]
    fn repaired_members_always_have_an_edge() {
        for seed in 0..50 {
            let (_, _, p) = random_partition(seed);
            for s in &p.subgraphs {
                assert!(s.min_degree() >= 1, "seed {seed} subgraph {} degrees {:?}", s.id, s.degrees());
            }
        }
    }

    #[test]
    fn retention_identity_on_random_partitions() {
        for seed in 100..150 {
            let (topo, corr, p) = random_partition(seed);
            let (intra, total) = info_retention(&p, &corr);
            // Independent recount from the raw topology.
            let mut cut = 0.0;
            let mut all = 0.0;
            for &(u, v) in topo.edges() {
                all += corr.get(u, v);
                if p.subgraph_of(u) != p.subgraph_of(v) {
                    cut += corr.get(u, v);
                }
            }
            assert!((all - total).abs() < 1e-12);
            assert!((cut - p.delta_cut).abs() < 1e-12);
            assert!((intra + p.delta_cut - total).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn all_edges_cut_star() {
        let edges: Vec<_> = (1..6).flat_map(|v| [(0, v), (v, 0)]).collect();
        let topo = crate::stgraph::Topology::from_edges((0..6).map(|i| i.to_string()).collect(), edges.clone());
        let corr = CorrelationMap::from_entries(
            1,
            edges.iter().enumerate().map(|(i, &(src, dst))| EdgeRho { src, dst, rho: 0.1 * i as f64 - 0.3 }).collect(),
        );
        // Hub alone, leaves paired: every edge crosses a boundary.
        let p = segment(&[0, 1, 2, 3, 4, 5], 3, &topo, &corr).unwrap();
        let p = Partition {
            subgraphs: vec![
                Subgraph::new(0, vec![0], vec![]),
                Subgraph::new(1, vec![1, 2], vec![]),
                Subgraph::new(2, vec![3, 4, 5], vec![]),
            ],
            ..p
        };
        let mut p = p;
        p.refresh(&topo, &corr);
        assert_eq!(p.cut_edges.len(), edges.len());
        let (intra, total) = info_retention(&p, &corr);
        let cut_sum: f64 = edges.iter().map(|&(u, v)| corr.get(u, v)).sum();
        assert_eq!(intra, 0.0);
        assert!((total - cut_sum - intra).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn repair_stays_inside_subgraph(seed in 0u64..10_000) {
            let (_, _, p) = random_partition(seed);
            for s in &p.subgraphs {
                for e in &s.virtual_edges {
                    prop_assert!(s.contains(e.a));
                    if let Endpoint::Node(b) = e.b {
                        prop_assert!(s.contains(b));
                    }
                }
            }
        }

        #[test]
        fn segment_sizes_differ_by_at_most_one(seed in 0u64..10_000) {
            let (_, _, p) = random_partition(seed);
            let n = p.node_count();
            for s in &p.subgraphs {
                prop_assert!(s.len() == n / p.m || s.len() == n.div_ceil(p.m));
            }
        }
    }
}
