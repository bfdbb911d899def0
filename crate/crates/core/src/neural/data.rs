use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::digest::Hasher;
use crate::error::{invalid, Result};
use crate::stgraph::{ForecastTask, STGraph};

/// Temporal 70/15/15 split boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
    pub total: usize,
}

impl Split {
    pub fn temporal(total: usize) -> Self {
        Split { train_end: total * 70 / 100, val_end: total * 85 / 100, total }
    }

    /// Window starts whose input and target both lie in `0..train_end`.
    pub fn train_starts(&self, task: &ForecastTask) -> Vec<usize> {
        let span = task.window + task.horizon;
        if self.train_end < span {
            return Vec::new();
        }
        (0..=self.train_end - span).collect()
    }

    /// Window starts whose targets begin inside the test segment.
    pub fn test_starts(&self, task: &ForecastTask) -> Vec<usize> {
        let first = self.val_end.max(task.window);
        if self.total < first + task.horizon {
            return Vec::new();
        }
        (first..=self.total - task.horizon).map(|t0| t0 - task.window).collect()
    }

    pub fn validate(&self, task: &ForecastTask) -> Result<()> {
        if self.train_starts(task).is_empty() || self.test_starts(task).is_empty() {
            return invalid(format!(
                "{} timesteps are too few for window {} and horizon {}",
                self.total, task.window, task.horizon
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEntry {
    Read { seq: u64, stage: String, node_id: String, start: usize, end: usize, digest: String },
    Purge { seq: u64, node_ids: Vec<String> },
}

/// Append-only record of every node slice read.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record_purge(&mut self, node_ids: &BTreeSet<String>) -> u64 {
        let seq = self.entries.len() as u64;
        self.entries.push(LedgerEntry::Purge { seq, node_ids: node_ids.iter().cloned().collect() });
        seq
    }

    fn record_read(&mut self, stage: &str, node_id: &str, start: usize, end: usize, digest: String) {
        let seq = self.entries.len() as u64;
        self.entries.push(LedgerEntry::Read { seq, stage: stage.to_string(), node_id: node_id.to_string(), start, end, digest });
    }

    /// True when no read after any purge touches a node purged by it.
    pub fn clean(&self) -> bool {
        let mut purged: BTreeSet<&str> = BTreeSet::new();
        for e in &self.entries {
            match e {
                LedgerEntry::Purge { node_ids, .. } => purged.extend(node_ids.iter().map(String::as_str)),
                LedgerEntry::Read { node_id, .. } => {
                    if purged.contains(node_id.as_str()) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Ids read by `stage` (all stages when `None`).
    pub fn nodes_read(&self, stage: Option<&str>) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LedgerEntry::Read { stage: s, node_id, .. } if stage.is_none_or(|st| st == s) => Some(node_id.clone()),
                _ => None,
            })
            .collect()
    }
}

/// The only path from graph features to training code. Every slice handed
/// out is logged with its content hash.
pub struct DataReader<'a> {
    graph: &'a STGraph,
    ledger: &'a mut Ledger,
    stage: String,
}

impl<'a> DataReader<'a> {
    pub fn new(graph: &'a STGraph, ledger: &'a mut Ledger, stage: impl Into<String>) -> Self {
        DataReader { graph, ledger, stage: stage.into() }
    }

    pub fn graph_shape(&self) -> (usize, usize) {
        (self.graph.timesteps(), self.graph.feature_dim())
    }

    pub fn set_stage(&mut self, stage: impl Into<String>) {
        self.stage = stage.into();
    }

    /// Features of node `v` over `start..end`, timestep-major.
    pub fn series(&mut self, v: usize, start: usize, end: usize) -> Vec<f64> {
        let f = self.graph.feature_dim();
        let mut out = Vec::with_capacity((end - start) * f);
        for t in start..end {
            for k in 0..f {
                out.push(self.graph.value(t, v, k));
            }
        }
        let id = self.graph.node_id(v);
        let mut h = Hasher::new("slice");
        h.str(id).u64(start as u64).u64(end as u64).f64s(&out);
        let digest = h.finish();
        self.ledger.record_read(&self.stage, id, start, end, digest);
        out
    }

    /// The first `len` timesteps of every node, each read logged.
    pub fn prefix_graph(&mut self, len: usize) -> Result<STGraph> {
        for v in 0..self.graph.node_count() {
            self.series(v, 0, len);
        }
        self.graph.time_prefix(len)
    }

    pub fn node_id(&self, v: usize) -> &str {
        self.graph.node_id(v)
    }

    /// Index of an external id in the underlying graph.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.graph.index_of(id)
    }
}

/// Per-node, per-feature z-score fitted on training data only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NodeScaler {
    /// Fits on a timestep-major series with `f` features; zero spread maps to 1.
    pub fn fit(series: &[f64], f: usize) -> Self {
        let t = series.len() / f;
        let mut mean = vec![0.0; f];
        for row in series.chunks(f) {
            for k in 0..f {
                mean[k] += row[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; f];
        for row in series.chunks(f) {
            for k in 0..f {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / t as f64).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        NodeScaler { mean, std }
    }

    pub fn transform(&self, series: &[f64]) -> Vec<f64> {
        let f = self.mean.len();
        series.iter().enumerate().map(|(i, &x)| (x - self.mean[i % f]) / self.std[i % f]).collect()
    }

    pub fn inverse(&self, series: &[f64]) -> Vec<f64> {
        let f = self.mean.len();
        series.iter().enumerate().map(|(i, &x)| x * self.std[i % f] + self.mean[i % f]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_boundaries() {
        let s = Split::temporal(2000);
        assert_eq!((s.train_end, s.val_end), (1400, 1700));
        let task = ForecastTask::new(3, 12);
        let train = s.train_starts(&task);
        assert_eq!(train.first(), Some(&0));
        assert_eq!(*train.last().unwrap() + 15, 1400);
        let test = s.test_starts(&task);
        assert_eq!(test[0] + 12, 1700);
        assert_eq!(*test.last().unwrap() + 15, 2000);
        assert!(Split::temporal(10).validate(&task).is_err());
    }

    #[test]
    fn scaler_round_trip() {
        let series = vec![1.0, 10.0, 3.0, 10.0, 5.0, 10.0];
        let s = NodeScaler::fit(&series, 2);
        assert_eq!(s.mean, vec![3.0, 10.0]);
        assert_eq!(s.std[1], 1.0);
        let z = s.transform(&series);
        assert!((z[0] + z[4]).abs() < 1e-15);
        let back = s.inverse(&z);
        for (a, b) in back.iter().zip(&series) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ledger_tracks_reads_after_purge() {
        let g = STGraph::new(vec!["a".into(), "b".into()], 3, 1, vec![(0, 1)], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut ledger = Ledger::new();
        {
            let mut r = DataReader::new(&g, &mut ledger, "train");
            assert_eq!(r.series(1, 0, 3), vec![2.0, 4.0, 6.0]);
        }
        ledger.record_purge(&["b".to_string()].into());
        assert!(ledger.clean());
        DataReader::new(&g, &mut ledger, "retrain").series(0, 0, 2);
        assert!(ledger.clean());
        DataReader::new(&g, &mut ledger, "retrain").series(1, 0, 2);
        assert!(!ledger.clean());
        assert_eq!(ledger.nodes_read(Some("train")), ["b".to_string()].into());
    }
}
