use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::esc::info_retention;
use crate::stgraph::STGraph;
use crate::unlearn::TrainedEnsemble;

/// The constant in front of the partition-error bound is left undefined;
/// reports use this value and say so.
pub const EPSILON: f64 = 1.0;
const EPSILON_NOTE: &str = "epsilon undefined in the bound; taken as 1";
/// Regime the partition-error bound is stated for.
const REGIME_MAX_M: usize = 16;
const REGIME_MAX_NODES: usize = 10_000;

/// Partition-error and unlearning-stability bounds next to their measured
/// counterparts. Comparisons are reported, never asserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub m: usize,
    pub nodes: usize,
    pub deleted: usize,
    pub delta_cut: f64,
    pub heads: usize,
    pub layers: usize,
    pub dim: usize,
    pub epsilon: f64,
    pub epsilon_note: String,
    pub in_regime: bool,
    /// `ε·Δ_cut·√M / (H·L·D_g)`.
    pub gap_bound: f64,
    /// RMS difference between the unpartitioned reference and the
    /// ensemble over the test split.
    pub gap_empirical: f64,
    pub gap_holds: bool,
    /// `Δ_cut·|U| / ((|V′|−|U|)·H·L·D_g)`.
    pub shift_bound: f64,
    /// Mean squared forecast shift across the unlearn step on retained nodes
    /// whose own sub-model was not retrained.
    pub shift_empirical: f64,
    pub shift_holds: bool,
    /// Same shift over every retained node, retrained or not.
    pub shift_all_retained: f64,
    pub info_intra: f64,
    pub total_corr: f64,
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Builds the report for `pre` against an unpartitioned `reference` built
/// with the same settings; `post` is `pre` after one more request.
pub fn bound_report(
    pre: &TrainedEnsemble,
    reference: Option<&TrainedEnsemble>,
    post: Option<&TrainedEnsemble>,
    graph: &STGraph,
) -> Result<BoundReport> {
    let Some(reference) = reference else {
        return invalid("the bound report needs a full-graph reference model");
    };
    if reference.partition.m != 1 || reference.split != pre.split || reference.config.task != pre.config.task {
        return invalid("reference must be an unpartitioned model on the same split and task");
    }
    let g = &pre.config.global;
    let m = pre.partition.m;
    let nodes = pre.topology.alive_count();
    let delta_cut = pre.partition.delta_cut;
    let hld = (g.heads * g.layers * g.dim) as f64;

    let ours = pre.clone().test_forecast(graph)?;
    let full = reference.clone().test_forecast(graph)?;
    if ours.node_ids != full.node_ids {
        return invalid("reference and ensemble forecast different nodes");
    }
    let gap_bound = EPSILON * delta_cut * (m as f64).sqrt() / hld;
    let gap_empirical = rms(&full.predictions.data, &ours.predictions.data);

    let (deleted, shift_empirical, shift_all_retained) = match post {
        None => (0, 0.0, 0.0),
        Some(post) => {
            let Some(event) = post.history.last() else {
                return invalid("post-unlearn model has no request in its history");
            };
            if post.history.len() != pre.history.len() + 1 {
                return invalid("post must be exactly one request after pre");
            }
            let after = post.clone().test_forecast(graph)?;
            let retained: BTreeSet<String> = after.node_ids.iter().cloned().collect();
            let before = ours.restrict(&retained);
            let retrained: BTreeSet<u64> = event.retrained.iter().copied().collect();
            let untouched: BTreeSet<String> = post
                .partition
                .subgraphs
                .iter()
                .filter(|s| !retrained.contains(&s.id))
                .flat_map(|s| s.nodes.iter().map(|&v| post.topology.node_id(v).to_string()))
                .collect();
            let mse = |a: &[f64], b: &[f64]| rms(a, b).powi(2);
            let local_a = before.restrict(&untouched);
            let local_b = after.restrict(&untouched);
            (
                event.request.nodes.len(),
                mse(&local_a.predictions.data, &local_b.predictions.data),
                mse(&before.predictions.data, &after.predictions.data),
            )
        }
    };
    let shift_bound = if deleted == 0 { 0.0 } else { delta_cut * deleted as f64 / ((nodes - deleted) as f64 * hld) };
    let (info_intra, total_corr) = info_retention(&pre.partition, &pre.correlation);
    Ok(BoundReport {
        m,
        nodes,
        deleted,
        delta_cut,
        heads: g.heads,
        layers: g.layers,
        dim: g.dim,
        epsilon: EPSILON,
        epsilon_note: EPSILON_NOTE.into(),
        in_regime: m <= REGIME_MAX_M && nodes <= REGIME_MAX_NODES,
        gap_bound,
        gap_empirical,
        gap_holds: gap_empirical <= gap_bound,
        shift_bound,
        shift_empirical,
        shift_holds: shift_empirical <= shift_bound,
        shift_all_retained,
        info_intra,
        total_corr,
    })
}
