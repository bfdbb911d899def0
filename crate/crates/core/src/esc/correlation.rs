use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::stgraph::STGraph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRho {
    pub src: usize,
    pub dst: usize,
    pub rho: f64,
}

/// Windowed lag-1 correlation `ρ(u,v)` for every directed edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub window: usize,
    entries: Vec<EdgeRho>,
}

impl CorrelationMap {
    pub fn from_entries(window: usize, mut entries: Vec<EdgeRho>) -> Self {
        entries.sort_by_key(|e| (e.src, e.dst));
        CorrelationMap { window, entries }
    }

    /// `ρ(u,v)`, or 0 when `(u,v)` is not an edge.
    pub fn get(&self, u: usize, v: usize) -> f64 {
        match self.entries.binary_search_by_key(&(u, v), |e| (e.src, e.dst)) {
            Ok(i) => self.entries[i].rho,
            Err(_) => 0.0,
        }
    }

    pub fn entries(&self) -> &[EdgeRho] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sum of outgoing `ρ` per node.
    pub fn out_totals(&self, node_count: usize) -> Vec<f64> {
        let mut totals = vec![0.0; node_count];
        for e in &self.entries {
            totals[e.src] += e.rho;
        }
        totals
    }

    /// Drops every entry for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(usize, usize) -> bool) {
        self.entries.retain(|e| keep(e.src, e.dst));
    }
}

/// Pearson correlation; 0 when either operand has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 || a.iter().all(|&x| x == a[0]) || b.iter().all(|&x| x == b[0]) {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let da = a[i] - ma;
        let db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Computes `ρ(u,v) = mean_t corr(X[t,u], X[t+1,v])` over every edge.
///
/// With `F ≥ 2` the operands are the feature vectors at `t` and `t+1` for
/// `t < w`. With `F = 1` they are length-`w` windows starting at `t` and `t+1`;
/// the number of window starts is `min(w, T - w)` so both windows fit.
pub fn correlation_map(graph: &STGraph, w: usize) -> Result<CorrelationMap> {
    let t_len = graph.timesteps();
    if w < 1 || w > t_len - 1 {
        return invalid(format!("correlation window {w} outside 1..={}", t_len - 1));
    }
    let f = graph.feature_dim();
    let series: Vec<Vec<f64>> = (0..graph.node_count()).map(|v| graph.node_series(v)).collect();
    let mut entries = Vec::with_capacity(graph.edges().len());
    for &(u, v) in graph.edges() {
        let (xu, xv) = (&series[u], &series[v]);
        let rho = if f == 1 {
            let starts = w.min(t_len - w);
            let mut acc = 0.0;
            for t in 0..starts {
                acc += pearson(&xu[t..t + w], &xv[t + 1..t + 1 + w]);
            }
            acc / starts as f64
        } else {
            let mut acc = 0.0;
            for t in 0..w {
                acc += pearson(&xu[t * f..(t + 1) * f], &xv[(t + 1) * f..(t + 2) * f]);
            }
            acc / w as f64
        };
        entries.push(EdgeRho { src: u, dst: v, rho });
    }
    Ok(CorrelationMap::from_entries(w, entries))
}
