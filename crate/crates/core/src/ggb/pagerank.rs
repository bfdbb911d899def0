use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::esc::Subgraph;
use crate::tensor::Mat;

const MAX_ITERATIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageRankScores {
    pub scores: Vec<f64>,
    pub damping: f64,
    pub iterations: usize,
}

/// Power iteration with uniform teleport. `adjacency[(i, j)] != 0` means an
/// edge `i -> j`; nodes without out-edges spread their mass uniformly.
pub fn pagerank(adjacency: &Mat, damping: f64, tol: f64) -> Result<PageRankScores> {
    let n = adjacency.rows;
    if n == 0 || adjacency.cols != n {
        return invalid(format!("pagerank needs a non-empty square matrix, got {}x{}", adjacency.rows, adjacency.cols));
    }
    if !(damping > 0.0 && damping < 1.0) {
        return invalid(format!("damping must lie in (0,1), got {damping}"));
    }
    if !(tol > 0.0) {
        return invalid(format!("tolerance must be positive, got {tol}"));
    }
    let out: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
    let uniform = 1.0 / n as f64;
    let mut scores = vec![uniform; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let dangling: f64 = (0..n).filter(|&i| out[i] == 0.0).map(|i| scores[i]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        next.iter_mut().for_each(|x| *x = base);
        for i in 0..n {
            if out[i] == 0.0 {
                continue;
            }
            let share = damping * scores[i] / out[i];
            for (j, &a) in adjacency.row(i).iter().enumerate() {
                if a != 0.0 {
                    next[j] += share * a;
                }
            }
        }
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= total);
        let change: f64 = scores.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut scores, &mut next);
        if change < tol {
            break;
        }
    }
    Ok(PageRankScores { scores, damping, iterations })
}

/// `⌈log2 n⌉`, at least 1 and at most `n`.
pub fn key_count(n: usize) -> usize {
    if n <= 1 {
        return n;
    }
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

/// Top-`⌈log2 |V_i|⌉` members by score, ties to the smaller node index.
///
/// `scores` is indexed like [`Subgraph::local_adjacency`]; a trailing stub
/// score is ignored.
pub fn select_key_nodes(sub: &Subgraph, scores: &PageRankScores) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = sub.nodes.iter().enumerate().map(|(i, &v)| (scores.scores[i], v)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().take(key_count(sub.len()).max(1)).map(|(_, v)| v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn digraph(n: usize, edges: &[(usize, usize)]) -> Mat {
        let mut a = Mat::zeros(n, n);
        for &(u, v) in edges {
            a.set(u, v, 1.0);
        }
        a
    }

    /// Stationary vector of the Google matrix via a dense linear solve of
    /// `(I - d·Pᵀ) x = (1-d)/n · 1` with dangling rows made uniform.
    fn dense_oracle(a: &Mat, d: f64) -> Vec<f64> {
        let n = a.rows;
        let mut p = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let out: f64 = a.row(i).iter().sum();
            for j in 0..n {
                p[(i, j)] = if out == 0.0 { 1.0 / n as f64 } else { a.get(i, j) / out };
            }
        }
        let lhs = DMatrix::<f64>::identity(n, n) - p.transpose() * d;
        let rhs = nalgebra::DVector::<f64>::from_element(n, (1.0 - d) / n as f64);
        let x = lhs.lu().solve(&rhs).unwrap();
        let s = x.sum();
        x.iter().map(|v| v / s).collect()
    }

    #[test]
    fn cycle_is_uniform() {
        let s = pagerank(&digraph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]), 0.85, 1e-12).unwrap();
        assert!(s.scores.iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn single_node() {
        let s = pagerank(&Mat::zeros(1, 1), 0.85, 1e-12).unwrap();
        assert_eq!(s.scores, vec![1.0]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let a = Mat::zeros(2, 2);
        assert!(pagerank(&a, 0.85, 0.0).is_err());
        assert!(pagerank(&a, 1.0, 1e-9).is_err());
        assert!(pagerank(&Mat::zeros(0, 0), 0.85, 1e-9).is_err());
    }

    #[test]
    fn five_node_digraph_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut edges = Vec::new();
        for u in 0..5 {
            for v in 0..5 {
                if u != v && rng.random::<f64>() < 0.4 {
                    edges.push((u, v));
                }
            }
        }
        let a = digraph(5, &edges);
        let s = pagerank(&a, 0.85, 1e-13).unwrap();
        let o = dense_oracle(&a, 0.85);
        for (x, y) in s.scores.iter().zip(&o) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!((s.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn key_counts() {
        assert_eq!(key_count(8), 3);
        assert_eq!(key_count(1), 1);
        assert_eq!(key_count(20), 5);
        assert_eq!(key_count(9), 4);
        assert_eq!(key_count(2), 1);
    }

    #[test]
    fn selection_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes: Vec<usize> = (100..120).collect();
        let sub = Subgraph::new(0, nodes.clone(), vec![]);
        let scores: Vec<f64> = (0..20).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let picked = select_key_nodes(&sub, &PageRankScores { scores: scores.clone(), damping: 0.85, iterations: 1 });
        assert_eq!(picked.len(), 5);
        let mut oracle: Vec<usize> = (0..20).collect();
        oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(picked, oracle[..5].iter().map(|&i| nodes[i]).collect::<Vec<_>>());
    }

    #[test]
    fn selection_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores: Vec<f64> = (0..9).map(|_| rng.random()).collect();
        let sub = Subgraph::new(0, (0..9).collect(), vec![]);
        let base = select_key_nodes(&sub, &PageRankScores { scores: scores.clone(), damping: 0.85, iterations: 1 });
        // Relabel node i as perm[i] and reorder members accordingly.
        let perm = [4usize, 7, 1, 0, 8, 2, 6, 3, 5];
        let relabeled = Subgraph::new(0, (0..9).map(|i| perm[i]).collect(), vec![]);
        let got = select_key_nodes(&relabeled, &PageRankScores { scores, damping: 0.85, iterations: 1 });
        assert_eq!(got, base.iter().map(|&i| perm[i]).collect::<Vec<_>>());
    }
}
