//! Seeded synthetic benchmark graphs whose temporal correlation follows edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::STGraph;
use crate::error::{invalid, Result};
use crate::tensor::Mat;

/// Timesteps simulated past the end of the returned graph.
pub const HELD_OUT_STEPS: usize = 16;

/// Persistence of each node's own state; keeps the process stationary.
const PERSISTENCE: f64 = 0.9;
const NOISE_STD: f64 = 0.5;
const BURN_IN: usize = 100;

pub struct SyntheticData {
    pub graph: STGraph,
    /// `HELD_OUT_STEPS × n` continuation of the simulated process.
    pub held_out: Mat,
}

/// Builds a connected random geometric graph on `n` nodes and simulates
/// `x[t+1,v] = φ·((1-r)·x[t,v] + r·mean(x[t,u] : u→v)) + noise` for `t` steps.
///
/// Undirected proximity edges are stored in both directions.
pub fn generate_synthetic(n: usize, t: usize, seed: u64, diffusion_rate: f64) -> Result<SyntheticData> {
    if n < 4 {
        return invalid(format!("synthetic graphs need n >= 4, got {n}"));
    }
    if t < 64 {
        return invalid(format!("synthetic graphs need t >= 64, got {t}"));
    }
    if !(0.0..1.0).contains(&diffusion_rate) {
        return invalid(format!("diffusion rate {diffusion_rate} outside [0,1)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    let dist2 = |a: usize, b: usize| {
        let dx = pos[a].0 - pos[b].0;
        let dy = pos[a].1 - pos[b].1;
        dx * dx + dy * dy
    };
    let radius2 = 4.0 / (std::f64::consts::PI * n as f64);

    let mut undirected: Vec<(usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if dist2(a, b) < radius2 {
                undirected.push((a, b));
            }
        }
    }
    // Join components by their closest cross pair until connected.
    loop {
        let comp = components(n, &undirected);
        if comp.iter().all(|&c| c == comp[0]) {
            break;
        }
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..n {
            if comp[a] != comp[0] {
                continue;
            }
            for b in 0..n {
                if comp[b] != comp[0] {
                    let d = dist2(a, b);
                    if d < best.0 {
                        best = (d, a, b);
                    }
                }
            }
        }
        undirected.push((best.1.min(best.2), best.1.max(best.2)));
    }

    let mut neighbors = vec![Vec::new(); n];
    let mut edges = Vec::with_capacity(undirected.len() * 2);
    for &(a, b) in &undirected {
        neighbors[a].push(b);
        neighbors[b].push(a);
        edges.push((a, b));
        edges.push((b, a));
    }
    for nb in &mut neighbors {
        nb.sort_unstable();
    }

    let total = BURN_IN + t + HELD_OUT_STEPS;
    let mut state: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut values = Vec::with_capacity(t * n);
    let mut held = Vec::with_capacity(HELD_OUT_STEPS * n);
    let mut next = vec![0.0; n];
    for step in 0..total {
        if step >= BURN_IN + t {
            held.extend_from_slice(&state);
        } else if step >= BURN_IN {
            values.extend_from_slice(&state);
        }
        for v in 0..n {
            let mean = neighbors[v].iter().map(|&u| state[u]).sum::<f64>() / neighbors[v].len() as f64;
            let drift = (1.0 - diffusion_rate) * state[v] + diffusion_rate * mean;
            next[v] = PERSISTENCE * drift + NOISE_STD * rng.sample::<f64, _>(StandardNormal);
        }
        std::mem::swap(&mut state, &mut next);
    }

    let ids = (0..n).map(|i| format!("n{i}")).collect();
    let graph = STGraph::new(ids, t, 1, edges, values)?;
    Ok(SyntheticData { graph, held_out: Mat::from_vec(HELD_OUT_STEPS, n, held) })
}

fn components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for i in 0..a.len() {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma).powi(2);
            sbb += (b[i] - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    fn lag1(g: &STGraph, u: usize, v: usize) -> f64 {
        let a = g.node_series(u);
        let b = g.node_series(v);
        pearson(&a[..a.len() - 1], &b[1..])
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(40, 2000, 7, 0.3).unwrap();
        let b = generate_synthetic(40, 2000, 7, 0.3).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(serde_json::to_vec(&a.graph).unwrap(), serde_json::to_vec(&b.graph).unwrap());
        assert_eq!(a.held_out, b.held_out);
        let c = generate_synthetic(40, 2000, 8, 0.3).unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn connected_and_symmetric() {
        let d = generate_synthetic(30, 64, 3, 0.3).unwrap();
        let g = &d.graph;
        let und: Vec<_> = g.edges().iter().filter(|e| e.0 < e.1).copied().collect();
        assert!(components(30, &und).iter().all(|&c| c == 0));
        for &(u, v) in g.edges() {
            assert!(g.has_edge(v, u));
        }
    }

    #[test]
    fn edges_carry_more_lagged_correlation_than_non_edges() {
        let d = generate_synthetic(40, 2000, 7, 0.3).unwrap();
        let g = &d.graph;
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for u in 0..40 {
            for v in 0..40 {
                if u == v {
                    continue;
                }
                let c = lag1(g, u, v);
                if g.has_edge(u, v) { on.push(c) } else { off.push(c) }
            }
        }
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean(&on) > mean(&off) + 0.05, "edges {} vs non-edges {}", mean(&on), mean(&off));
    }

    #[test]
    fn zero_rate_decouples_nodes() {
        let d = generate_synthetic(40, 2000, 7, 0.0).unwrap();
        let g = &d.graph;
        let cs: Vec<f64> = g.edges().iter().map(|&(u, v)| lag1(g, u, v)).collect();
        let mean = cs.iter().sum::<f64>() / cs.len() as f64;
        assert!(mean.abs() < 0.05, "mean edge correlation {mean}");
    }

    #[test]
    fn rejects_small_inputs() {
        assert!(generate_synthetic(3, 100, 0, 0.3).is_err());
        assert!(generate_synthetic(10, 63, 0, 0.3).is_err());
        assert!(generate_synthetic(10, 100, 0, 1.0).is_err());
    }
}
