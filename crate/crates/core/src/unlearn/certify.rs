use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::digest::{derive_seed, GLOBAL_LAYER_ID};
use crate::error::{invalid, Result};
use crate::esc::{correlation_map, CorrelationMap, EdgeRho};
use crate::neural::{DataReader, Ledger, LedgerEntry};
use crate::stgraph::{DeletionRequest, STGraph};

use super::engine::structural_step;
use super::{apply_unlearn, check_graph, train_all, TrainedEnsemble, BUILD_TAG};

/// Build environment recorded in every certificate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toolchain {
    pub crate_version: String,
    pub rustc: String,
    pub target_os: String,
    pub target_arch: String,
}

impl Toolchain {
    pub fn current() -> Self {
        Toolchain {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            rustc: env!("CALLOSUM_RUSTC_VERSION").to_string(),
            target_os: std::env::consts::OS.to_string(),
            target_arch: std::env::consts::ARCH.to_string(),
        }
    }
}

/// Evidence that a request's influence was removed exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnCertificate {
    pub request: DeletionRequest,
    pub request_digest: String,
    pub affected_subgraphs: Vec<u64>,
    pub retrained_subgraphs: Vec<u64>,
    /// Every parameter block equals a from-scratch run on purged data.
    pub equivalence: bool,
    /// No read of a deleted node after its purge.
    pub ledger_clean: bool,
    /// Rerunning the unlearn step with the deleted nodes' data replaced gave
    /// identical parameters and predictions; `None` when not run.
    pub influence_probe: Option<bool>,
    pub valid: bool,
    pub failed_checks: Vec<String>,
    pub post_digest: String,
    pub reference_digest: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings: BTreeMap<String, f64>,
    pub toolchain: Toolchain,
}

impl UnlearnCertificate {
    /// Copy without wall-clock data, for reproducible bundles.
    pub fn without_timings(&self) -> Self {
        UnlearnCertificate { timings: BTreeMap::new(), ..self.clone() }
    }
}

/// Retrains everything from scratch on `graph` purged of every request in
/// `post.history`, replaying only the recorded structure (build-time
/// partition and merge decisions). Seeds are re-derived independently.
pub fn reference_run(post: &TrainedEnsemble, graph: &STGraph) -> Result<TrainedEnsemble> {
    check_graph(post, graph)?;
    let cfg = &post.config;
    let mut all = DeletionRequest::default();
    for ev in &post.history {
        all.nodes.extend(ev.request.nodes.iter().cloned());
        all.edges.extend(ev.request.edges.iter().cloned());
    }
    let purged = graph.purged(&all)?;
    let lookup: HashMap<&str, usize> = purged.node_ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let index: Vec<usize> =
        graph.node_ids().iter().map(|id| lookup.get(id.as_str()).copied().unwrap_or(usize::MAX)).collect();
    let back: Vec<usize> = (0..index.len()).filter(|&v| index[v] != usize::MAX).collect();

    let mut ledger = Ledger::new();
    let mut timings = BTreeMap::new();
    let purged_corr = {
        let mut reader = DataReader::new(&purged, &mut ledger, "correlation");
        correlation_map(&reader.prefix_graph(post.split.train_end)?, post.correlation.window)?
    };
    let entries = purged_corr
        .entries()
        .iter()
        .map(|e| EdgeRho { src: back[e.src], dst: back[e.dst], rho: e.rho })
        .collect();
    let mut corr = CorrelationMap::from_entries(purged_corr.window, entries);

    let mut topo = post.origin_topology.clone();
    let mut partition = post.origin_partition.clone();
    let mut seeds: BTreeMap<u64, u64> =
        partition.subgraphs.iter().map(|s| (s.id, derive_seed(cfg.seed, s.id, BUILD_TAG))).collect();
    let mut global_tag = BUILD_TAG.to_string();
    for ev in &post.history {
        let digest = ev.request.digest();
        let r = ev.request.resolve(&topo)?;
        let step = structural_step(&partition, &mut topo, &mut corr, &r, cfg.k_ring, Some(&ev.merges))?;
        for id in &step.retrained {
            seeds.insert(*id, derive_seed(cfg.seed, *id, &digest));
        }
        partition = step.partition;
        global_tag = digest;
    }
    let global_seed = derive_seed(cfg.seed, GLOBAL_LAYER_ID, &global_tag);
    let (sub_models, meta, global_layer) = train_all(
        &purged,
        &mut ledger,
        &partition,
        &post.origin_partition,
        &corr,
        &index,
        cfg,
        &post.split,
        &seeds,
        global_seed,
        &mut timings,
    )?;
    Ok(TrainedEnsemble {
        config: cfg.clone(),
        split: post.split,
        topology: topo,
        correlation: corr,
        partition,
        sub_models,
        meta,
        global_layer,
        ledger,
        origin_partition: post.origin_partition.clone(),
        origin_topology: post.origin_topology.clone(),
        history: post.history.clone(),
        timings,
    })
}

/// Checks `post` (the result of applying `request` last) for exact
/// unlearning: parameter equivalence with [`reference_run`], a clean ledger,
/// and, when `pre` is given, an influence probe that reruns the unlearn step
/// with the deleted nodes' features replaced by unrelated values.
pub fn certify(
    pre: Option<&TrainedEnsemble>,
    post: &TrainedEnsemble,
    request: &DeletionRequest,
    graph: &STGraph,
) -> Result<UnlearnCertificate> {
    let mut timings = BTreeMap::new();
    let post_digest = post.digest();
    if request.is_empty() {
        let ledger_clean = post.ledger.clean();
        let mut failed = Vec::new();
        if !ledger_clean {
            failed.push("ledger".to_string());
        }
        return Ok(UnlearnCertificate {
            request: request.clone(),
            request_digest: request.digest(),
            affected_subgraphs: Vec::new(),
            retrained_subgraphs: Vec::new(),
            equivalence: true,
            ledger_clean,
            influence_probe: None,
            valid: ledger_clean,
            failed_checks: failed,
            reference_digest: post_digest.clone(),
            post_digest,
            timings,
            toolchain: Toolchain::current(),
        });
    }
    let Some(event) = post.history.last().filter(|e| e.request == *request) else {
        return invalid("request is not the last one applied to this ensemble");
    };

    let purged_ids: BTreeSet<&String> = request.nodes.iter().collect();
    let purge_logged = post.ledger.entries().iter().any(|e| match e {
        LedgerEntry::Purge { node_ids, .. } => node_ids.iter().collect::<BTreeSet<_>>() == purged_ids,
        _ => false,
    });
    let ledger_clean = post.ledger.clean() && purge_logged;

    let clock = Instant::now();
    let reference = reference_run(post, graph)?;
    let reference_digest = reference.digest();
    let equivalence = reference.digests() == post.digests();
    timings.insert("certify_reference".into(), clock.elapsed().as_secs_f64());

    let influence_probe = match pre {
        Some(pre) if !request.nodes.is_empty() => {
            let clock = Instant::now();
            let perturbed =
                graph.with_node_features(&request.nodes, |t, f, x| 1e6 * ((t as f64) * 0.7 + f as f64 + x).sin())?;
            let probe = apply_unlearn(pre, &perturbed, request)?;
            let same_params = probe.digests() == post.digests();
            let a = post.clone().test_forecast(graph)?;
            let b = probe.clone().test_forecast(graph)?;
            timings.insert("certify_probe".into(), clock.elapsed().as_secs_f64());
            Some(same_params && bitwise_equal(&a.predictions.data, &b.predictions.data))
        }
        _ => None,
    };

    let mut failed = Vec::new();
    if !equivalence {
        failed.push("equivalence".to_string());
    }
    if !ledger_clean {
        failed.push("ledger".to_string());
    }
    if influence_probe == Some(false) {
        failed.push("influence_probe".to_string());
    }
    Ok(UnlearnCertificate {
        request: request.clone(),
        request_digest: event.request_digest.clone(),
        affected_subgraphs: event.affected.clone(),
        retrained_subgraphs: event.retrained.clone(),
        equivalence,
        ledger_clean,
        influence_probe,
        valid: failed.is_empty(),
        failed_checks: failed,
        post_digest,
        reference_digest,
        timings,
        toolchain: Toolchain::current(),
    })
}

pub(crate) fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
