use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{invalid, Result};
use crate::stgraph::Topology;

use super::{extract_backbone, repair_subgraph, CorrelationMap, Subgraph};

/// Backbone segmentation of the live graph.
///
/// `assignment[v]` is the index into `subgraphs` of node `v`, or `None` for a
/// deleted node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub backbone: Vec<usize>,
    pub assignment: Vec<Option<usize>>,
    pub subgraphs: Vec<Subgraph>,
    pub cut_edges: Vec<(usize, usize)>,
    pub delta_cut: f64,
    pub m: usize,
    pub gamma: f64,
}

impl Partition {
    pub fn subgraph_of(&self, v: usize) -> Option<usize> {
        self.assignment.get(v).copied().flatten()
    }

    pub fn node_count(&self) -> usize {
        self.subgraphs.iter().map(Subgraph::len).sum()
    }

    /// Recomputes assignment, intra edges, cut edges and `Δ_cut` from the
    /// current node sets and the live topology. Virtual edges are cleared.
    pub fn refresh(&mut self, topo: &Topology, corr: &CorrelationMap) {
        let mut assignment = vec![None; topo.node_count()];
        for (i, sub) in self.subgraphs.iter().enumerate() {
            for &v in &sub.nodes {
                assignment[v] = Some(i);
            }
        }
        for sub in &mut self.subgraphs {
            sub.edges.clear();
            sub.virtual_edges.clear();
            sub.has_stub = false;
        }
        let mut cut = Vec::new();
        for &(u, v) in topo.edges() {
            match (assignment[u], assignment[v]) {
                (Some(a), Some(b)) if a == b => self.subgraphs[a].edges.push((u, v)),
                (Some(_), Some(_)) => cut.push((u, v)),
                _ => {}
            }
        }
        self.delta_cut = cut.iter().map(|&(u, v)| corr.get(u, v)).sum();
        self.cut_edges = cut;
        self.assignment = assignment;
        self.m = self.subgraphs.len();
    }

    /// Applies [`repair_subgraph`] to every subgraph.
    pub fn repair(&mut self, k: usize) {
        for sub in &mut self.subgraphs {
            *sub = repair_subgraph(sub, &self.cut_edges, k);
        }
    }

    pub fn digest(&self) -> String {
        json_digest("partition", self)
    }
}

/// Splits backbone `d` into `m` contiguous segments.
///
/// Segment `i` (0-based) takes positions `⌊i·N'/m⌋ .. ⌊(i+1)·N'/m⌋`. Returned
/// subgraphs are unrepaired and carry ids `0..m`.
pub fn segment(d: &[usize], m: usize, topo: &Topology, corr: &CorrelationMap) -> Result<Partition> {
    let n = d.len();
    if m < 1 || m > n {
        return invalid(format!("segment count {m} outside 1..={n}"));
    }
    let subgraphs = (0..m)
        .map(|i| Subgraph::new(i as u64, d[i * n / m..(i + 1) * n / m].to_vec(), Vec::new()))
        .collect();
    let mut p = Partition {
        backbone: d.to_vec(),
        assignment: Vec::new(),
        subgraphs,
        cut_edges: Vec::new(),
        delta_cut: 0.0,
        m,
        gamma: 0.0,
    };
    p.refresh(topo, corr);
    Ok(p)
}

/// `Δ_cut(m) + γ·ln m` for the segmentation of `d` into `m` parts.
pub fn m_objective(d: &[usize], m: usize, gamma: f64, topo: &Topology, corr: &CorrelationMap) -> Result<f64> {
    Ok(segment(d, m, topo, corr)?.delta_cut + gamma * (m as f64).ln())
}

/// Candidate with the smallest objective; ties go to the smaller `m`.
pub fn select_m(topo: &Topology, corr: &CorrelationMap, gamma: f64, candidates: &[usize]) -> Result<usize> {
    if candidates.is_empty() {
        return invalid("no candidate segment counts");
    }
    if !(gamma >= 0.0) {
        return invalid(format!("gamma must be non-negative, got {gamma}"));
    }
    let d = extract_backbone(topo, corr)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = (f64::INFINITY, 0);
    for m in sorted {
        let obj = m_objective(&d, m, gamma, topo, corr)?;
        if obj < best.0 {
            best = (obj, m);
        }
    }
    Ok(best.1)
}

/// `(Info_intra, TotalCorr)`: `ρ` summed over intra edges and over all edges.
pub fn info_retention(partition: &Partition, corr: &CorrelationMap) -> (f64, f64) {
    let intra = partition
        .subgraphs
        .iter()
        .flat_map(|s| s.edges.iter())
        .map(|&(u, v)| corr.get(u, v))
        .sum();
    let total = corr.entries().iter().map(|e| e.rho).sum();
    (intra, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esc::{correlation_map, EdgeRho};
    use crate::stgraph::generate_synthetic;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize) -> (Topology, CorrelationMap) {
        let edges: Vec<_> = (0..n - 1).flat_map(|i| [(i, i + 1), (i + 1, i)]).collect();
        let entries = edges.iter().map(|&(src, dst)| EdgeRho { src, dst, rho: 0.5 }).collect();
        (Topology::from_edges((0..n).map(|i| i.to_string()).collect(), edges), CorrelationMap::from_entries(1, entries))
    }

    fn sizes(p: &Partition) -> Vec<usize> {
        p.subgraphs.iter().map(Subgraph::len).collect()
    }

    #[test]
    fn even_split() {
        let (t, c) = line(8);
        let d: Vec<usize> = (0..8).collect();
        assert_eq!(sizes(&segment(&d, 4, &t, &c).unwrap()), vec![2, 2, 2, 2]);
    }

    #[test]
    fn single_segment_has_no_cut() {
        let (t, c) = line(6);
        let p = segment(&(0..6).collect::<Vec<_>>(), 1, &t, &c).unwrap();
        assert!(p.cut_edges.is_empty());
        assert_eq!(p.delta_cut, 0.0);
        let (intra, total) = info_retention(&p, &c);
        assert_eq!(intra, total);
    }

    #[test]
    fn uneven_split_follows_floor_bounds() {
        let (t, c) = line(10);
        let d: Vec<usize> = (0..10).collect();
        let p = segment(&d, 4, &t, &c).unwrap();
        // Bounds 0, 10/4, 20/4, 30/4, 40/4 evaluated directly.
        let bounds: Vec<usize> = (0..=4).map(|i| (i as f64 * 10.0 / 4.0).floor() as usize).collect();
        let expect: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(expect, vec![2, 3, 2, 3]);
        assert_eq!(sizes(&p), expect);
    }

    #[test]
    fn segment_rejects_bad_m() {
        let (t, c) = line(4);
        let d: Vec<usize> = (0..4).collect();
        assert!(segment(&d, 0, &t, &c).is_err());
        assert!(segment(&d, 5, &t, &c).is_err());
    }

    #[test]
    fn disconnected_halves_prefer_two() {
        let mut edges = Vec::new();
        for half in [0, 4] {
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        edges.push((half + i, half + j));
                    }
                }
            }
        }
        let entries = edges.iter().map(|&(src, dst)| EdgeRho { src, dst, rho: 0.8 }).collect();
        let t = Topology::from_edges((0..8).map(|i| i.to_string()).collect(), edges);
        let c = CorrelationMap::from_entries(1, entries);
        let d = extract_backbone(&t, &c).unwrap();
        assert_eq!(segment(&d, 2, &t, &c).unwrap().delta_cut, 0.0);
        assert!(m_objective(&d, 4, 1.0, &t, &c).unwrap() >= 2f64.ln());
        assert_eq!(select_m(&t, &c, 1.0, &[2, 4]).unwrap(), 2);
        assert!(select_m(&t, &c, 1.0, &[]).is_err());
    }

    #[test]
    fn select_m_matches_sweep() {
        let g = generate_synthetic(12, 64, 3, 0.4).unwrap().graph;
        let t = g.topology();
        let c = correlation_map(&g, 20).unwrap();
        let d = extract_backbone(&t, &c).unwrap();
        for gamma in [0.0, 0.5, 2.0, 10.0] {
            // Independent sweep: recompute cut sums directly from segment bounds.
            let mut best = (f64::INFINITY, 0);
            for m in [2usize, 3, 4, 6] {
                let mut part = vec![0; 12];
                for (pos, &v) in d.iter().enumerate() {
                    part[v] = (0..m).find(|&i| i * 12 / m <= pos && pos < (i + 1) * 12 / m).unwrap();
                }
                let cut: f64 = t.edges().iter().filter(|&&(u, v)| part[u] != part[v]).map(|&(u, v)| c.get(u, v)).sum();
                let obj = cut + gamma * (m as f64).ln();
                if obj < best.0 {
                    best = (obj, m);
                }
            }
            assert_eq!(select_m(&t, &c, gamma, &[6, 4, 3, 2]).unwrap(), best.1, "gamma {gamma}");
        }
    }

    #[test]
    fn partition_covers_every_node_and_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = rng.random_range(4..30);
            let g = generate_synthetic(n, 64, rng.random(), 0.3).unwrap().graph;
            let t = g.topology();
            let c = correlation_map(&g, 10).unwrap();
            let d = extract_backbone(&t, &c).unwrap();
            let m = rng.random_range(1..=n.min(6));
            let p = segment(&d, m, &t, &c).unwrap();
            let mut seen = vec![0; n];
            for s in &p.subgraphs {
                for &v in &s.nodes {
                    seen[v] += 1;
                }
            }
            assert!(seen.iter().all(|&k| k == 1));
            let mut edges: Vec<_> = p.subgraphs.iter().flat_map(|s| s.edges.clone()).chain(p.cut_edges.clone()).collect();
            edges.sort_unstable();
            assert_eq!(edges, t.edges());
        }
    }

    #[test]
    fn serialization_is_stable() {
        let g = generate_synthetic(10, 64, 1, 0.3).unwrap().graph;
        let t = g.topology();
        let c = correlation_map(&g, 10).unwrap();
        let d = extract_backbone(&t, &c).unwrap();
        let mut p = segment(&d, 3, &t, &c).unwrap();
        p.repair(2);
        let a = serde_json::to_string(&p).unwrap();
        let back: Partition = serde_json::from_str(&a).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), a);
        assert_eq!(back.digest(), p.digest());
    }
}
