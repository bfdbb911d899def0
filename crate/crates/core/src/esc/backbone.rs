use crate::error::{invalid, Result};
use crate::stgraph::Topology;

use super::CorrelationMap;

/// Greedy ordering of every live node.
///
/// Starts at the node with the largest outgoing `ρ` total, repeatedly follows
/// the unvisited out-neighbour with the largest `ρ`, and jumps to the
/// unvisited node with the largest total when stuck. Ties go to the smaller
/// node index.
pub fn extract_backbone(topo: &Topology, corr: &CorrelationMap) -> Result<Vec<usize>> {
    let alive: Vec<usize> = topo.alive_nodes().collect();
    if alive.is_empty() {
        return invalid("cannot extract a backbone from an empty graph");
    }
    let totals = corr.out_totals(topo.node_count());
    let mut visited = vec![false; topo.node_count()];
    for v in 0..topo.node_count() {
        if !topo.is_alive(v) {
            visited[v] = true;
        }
    }
    let pick_jump = |visited: &[bool]| -> usize {
        let mut best = usize::MAX;
        for &v in &alive {
            if visited[v] {
                continue;
            }
            if best == usize::MAX || totals[v] > totals[best] {
                best = v;
            }
        }
        best
    };

    let mut order = Vec::with_capacity(alive.len());
    let mut current = pick_jump(&visited);
    loop {
        visited[current] = true;
        order.push(current);
        if order.len() == alive.len() {
            break;
        }
        let mut next = usize::MAX;
        let mut best_rho = f64::NEG_INFINITY;
        for v in topo.out_neighbors(current) {
            if visited[v] {
                continue;
            }
            let r = corr.get(current, v);
            if r > best_rho {
                best_rho = r;
                next = v;
            }
        }
        current = if next == usize::MAX { pick_jump(&visited) } else { next };
    }
    Ok(order)
}

/// Summed `ρ` over consecutive backbone pairs; non-edges contribute 0.
pub fn backbone_score(d: &[usize], corr: &CorrelationMap) -> f64 {
    d.windows(2).map(|w| corr.get(w[0], w[1])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esc::EdgeRho;

    fn topo(n: usize, edges: &[(usize, usize)]) -> Topology {
        Topology::from_edges((0..n).map(|i| format!("v{i}")).collect(), edges.to_vec())
    }

    fn corr(entries: &[(usize, usize, f64)]) -> CorrelationMap {
        CorrelationMap::from_entries(1, entries.iter().map(|&(src, dst, rho)| EdgeRho { src, dst, rho }).collect())
    }

    #[test]
    fn follows_unique_chain() {
        let t = topo(3, &[(0, 1), (1, 2)]);
        let c = corr(&[(0, 1, 1.0), (1, 2, 1.0)]);
        assert_eq!(extract_backbone(&t, &c).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn equal_rho_sorts_ascending() {
        let n = 5;
        let mut edges = Vec::new();
        let mut entries = Vec::new();
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    edges.push((u, v));
                    entries.push((u, v, 0.5));
                }
            }
        }
        assert_eq!(extract_backbone(&topo(n, &edges), &corr(&entries)).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn jumps_when_stuck() {
        // 2 -> 3 is a dead end; the jump goes to the best remaining total.
        let t = topo(4, &[(2, 3), (0, 1)]);
        let c = corr(&[(2, 3, 0.9), (0, 1, 0.2)]);
        assert_eq!(extract_backbone(&t, &c).unwrap(), vec![2, 3, 0, 1]);
    }

    #[test]
    fn skips_dead_nodes() {
        let mut t = topo(3, &[(0, 1), (1, 2)]);
        t.remove(&[1].into(), &Default::default());
        let order = extract_backbone(&t, &corr(&[])).unwrap();
        assert_eq!(order, vec![0, 2]);
    }
}
