use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use crate::digest::{derive_seed, GLOBAL_LAYER_ID};
use crate::error::{invalid, Result};
use crate::esc::{repair_subgraph, CorrelationMap, Partition, Subgraph};
use crate::stgraph::{DeletionRequest, ResolvedRequest, STGraph, Topology};

use super::{
    build_global, certify, check_graph, train_one, width_for, MergeRecord, TrainedEnsemble, UnlearnCertificate,
    UnlearnEvent,
};

/// Indices of the subgraphs touched by `request`: those holding a deleted
/// node or an endpoint of a deleted edge, plus both sides of every cut edge
/// incident to a deleted node.
pub fn locate(request: &DeletionRequest, topo: &Topology, partition: &Partition) -> Result<BTreeSet<usize>> {
    let r = request.resolve(topo)?;
    Ok(locate_resolved(&r, partition))
}

pub(crate) fn locate_resolved(r: &ResolvedRequest, partition: &Partition) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let nodes = r.nodes.iter().copied().chain(r.edges.iter().flat_map(|&(u, v)| [u, v]));
    out.extend(nodes.filter_map(|v| partition.subgraph_of(v)));
    for &(u, v) in &partition.cut_edges {
        if r.nodes.contains(&u) || r.nodes.contains(&v) {
            out.extend([u, v].into_iter().filter_map(|x| partition.subgraph_of(x)));
        }
    }
    out
}

/// Removes deleted nodes and edges from one subgraph and repairs it against
/// the post-deletion cut set.
pub fn purge_and_rebuild(sub: &Subgraph, request: &ResolvedRequest, cut_edges: &[(usize, usize)], k: usize) -> Subgraph {
    if request.nodes.is_empty() && request.edges.is_empty() {
        return sub.clone();
    }
    let gone = |v: &usize| request.nodes.contains(v);
    let nodes = sub.nodes.iter().copied().filter(|v| !gone(v)).collect();
    let edges = sub
        .edges
        .iter()
        .copied()
        .filter(|e| !gone(&e.0) && !gone(&e.1) && !request.edges.contains(e))
        .collect();
    repair_subgraph(&Subgraph::new(sub.id, nodes, edges), cut_edges, k)
}

/// Folds every subgraph with fewer than 3 nodes into a backbone neighbour.
///
/// The target is the adjacent subgraph sharing the largest summed cut `ρ`,
/// ties going to the smaller index. Emptied subgraphs are dropped. The
/// result is refreshed and repaired. Fails when fewer than 3 nodes remain.
pub fn merge_small(
    partition: &Partition,
    topo: &Topology,
    corr: &CorrelationMap,
    k: usize,
) -> Result<(Partition, Vec<MergeRecord>)> {
    let mut p = partition.clone();
    let mut merges = Vec::new();
    while let Some(i) = p.subgraphs.iter().position(|s| s.len() < 3) {
        if p.subgraphs[i].is_empty() {
            merges.push(MergeRecord { absorbed: p.subgraphs[i].id, into: None });
            p.subgraphs.remove(i);
            p.refresh(topo, corr);
            continue;
        }
        if p.subgraphs.len() == 1 {
            return invalid(format!("only {} nodes remain; at least 3 are needed", p.subgraphs[0].len()));
        }
        let shared = |j: usize| -> f64 {
            p.cut_edges
                .iter()
                .filter(|&&(u, v)| {
                    let (a, b) = (p.subgraph_of(u), p.subgraph_of(v));
                    (a == Some(i) && b == Some(j)) || (a == Some(j) && b == Some(i))
                })
                .map(|&(u, v)| corr.get(u, v))
                .sum()
        };
        let mut best: Option<(usize, f64)> = None;
        for j in [i.checked_sub(1), Some(i + 1).filter(|&j| j < p.subgraphs.len())].into_iter().flatten() {
            let s = shared(j);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (j, _) = best.unwrap();
        merges.push(MergeRecord { absorbed: p.subgraphs[i].id, into: Some(p.subgraphs[j].id) });
        merge_into(&mut p, i, j, topo, corr);
    }
    p.repair(k);
    Ok((p, merges))
}

/// Moves the members of subgraph `i` into `j`, keeping backbone order.
fn merge_into(p: &mut Partition, i: usize, j: usize, topo: &Topology, corr: &CorrelationMap) {
    let small = p.subgraphs[i].nodes.clone();
    let target = &mut p.subgraphs[j].nodes;
    if j < i {
        target.extend(small);
    } else {
        let tail = std::mem::replace(target, small);
        target.extend(tail);
    }
    p.subgraphs.remove(i);
    p.refresh(topo, corr);
}

fn replay_merges(
    partition: &Partition,
    topo: &Topology,
    corr: &CorrelationMap,
    merges: &[MergeRecord],
    k: usize,
) -> Result<Partition> {
    let mut p = partition.clone();
    let pos = |p: &Partition, id: u64| p.subgraphs.iter().position(|s| s.id == id);
    for m in merges {
        let Some(i) = pos(&p, m.absorbed) else {
            return invalid(format!("recorded merge of unknown subgraph {}", m.absorbed));
        };
        match m.into {
            None => {
                p.subgraphs.remove(i);
                p.refresh(topo, corr);
            }
            Some(into) => {
                let Some(j) = pos(&p, into) else {
                    return invalid(format!("recorded merge into unknown subgraph {into}"));
                };
                merge_into(&mut p, i, j, topo, corr);
            }
        }
    }
    p.repair(k);
    Ok(p)
}

pub(crate) struct StepOutcome {
    pub partition: Partition,
    pub affected: BTreeSet<u64>,
    pub merges: Vec<MergeRecord>,
    pub retrained: BTreeSet<u64>,
}

/// The data-free part of an unlearning step: purge, refresh, merge, repair.
///
/// With `recorded` merges the merge decisions are replayed instead of made.
/// Retrained subgraphs are the affected ones, merge targets, and any whose
/// structure changed.
pub(crate) fn structural_step(
    partition: &Partition,
    topo: &mut Topology,
    corr: &mut CorrelationMap,
    r: &ResolvedRequest,
    k: usize,
    recorded: Option<&[MergeRecord]>,
) -> Result<StepOutcome> {
    let affected: BTreeSet<u64> = locate_resolved(r, partition).into_iter().map(|i| partition.subgraphs[i].id).collect();
    topo.remove(&r.nodes, &r.edges);
    corr.retain(|u, v| topo.has_edge(u, v));
    let mut p = partition.clone();
    for s in &mut p.subgraphs {
        s.nodes.retain(|v| !r.nodes.contains(v));
    }
    p.refresh(topo, corr);
    let (p, merges) = match recorded {
        None => merge_small(&p, topo, corr, k)?,
        Some(m) => (replay_merges(&p, topo, corr, m, k)?, m.to_vec()),
    };
    let before: BTreeMap<u64, &Subgraph> = partition.subgraphs.iter().map(|s| (s.id, s)).collect();
    let mut retrained: BTreeSet<u64> = affected.clone();
    retrained.extend(merges.iter().filter_map(|m| m.into));
    for s in &p.subgraphs {
        if before.get(&s.id).is_none_or(|old| *old != s) {
            retrained.insert(s.id);
        }
    }
    let present: BTreeSet<u64> = p.subgraphs.iter().map(|s| s.id).collect();
    retrained.retain(|id| present.contains(id));
    Ok(StepOutcome { partition: p, affected, merges, retrained })
}

/// Applies a deletion request: purge and repair, merge degenerate
/// subgraphs, retrain the touched sub-models from derived seeds, then rebuild
/// the meta-graph and retrain a freshly seeded global layer.
///
/// Sub-models of untouched subgraphs are carried over unchanged. An empty
/// request returns the ensemble as is.
pub fn apply_unlearn(pre: &TrainedEnsemble, graph: &STGraph, request: &DeletionRequest) -> Result<TrainedEnsemble> {
    check_graph(pre, graph)?;
    let mut post = pre.clone();
    post.timings.clear();
    if request.is_empty() {
        return Ok(post);
    }
    let r = request.resolve(&pre.topology)?;
    let remaining = pre.topology.alive_count() - r.nodes.len();
    if remaining == 0 {
        return invalid("deletion request removes every live node");
    }
    if remaining < 3 {
        return invalid(format!("only {remaining} nodes would remain; at least 3 are needed"));
    }
    let cfg = &pre.config;
    let digest = request.digest();
    let clock = Instant::now();
    post.ledger.record_purge(&request.nodes);
    let step = structural_step(&pre.partition, &mut post.topology, &mut post.correlation, &r, cfg.k_ring, None)?;
    let identity: Vec<usize> = (0..graph.node_count()).collect();

    let stage1 = Instant::now();
    let mut models = Vec::with_capacity(step.partition.subgraphs.len());
    for sub in &step.partition.subgraphs {
        if step.retrained.contains(&sub.id) {
            let width = width_for(cfg.sub_model.width, &pre.origin_partition, sub.len());
            let seed = derive_seed(cfg.seed, sub.id, &digest);
            models.push(train_one(graph, &mut post.ledger, "unlearn/stage1", sub, &identity, cfg, &pre.split, width, seed)?);
        } else {
            let kept = pre.sub_models.iter().find(|m| m.subgraph_id() == sub.id);
            match kept {
                Some(m) => models.push(m.clone()),
                None => return invalid(format!("no sub-model for untouched subgraph {}", sub.id)),
            }
        }
    }
    post.timings.insert("unlearn_stage1".into(), stage1.elapsed().as_secs_f64());

    let stage2 = Instant::now();
    let (meta, layer) = build_global(
        graph,
        &mut post.ledger,
        "unlearn/stage2",
        &step.partition,
        &post.correlation,
        &models,
        &identity,
        cfg,
        &pre.split,
        derive_seed(cfg.seed, GLOBAL_LAYER_ID, &digest),
    )?;
    post.timings.insert("unlearn_stage2".into(), stage2.elapsed().as_secs_f64());
    post.timings.insert("unlearn".into(), clock.elapsed().as_secs_f64());

    post.history.push(UnlearnEvent {
        request: request.clone(),
        request_digest: digest,
        affected: step.affected.into_iter().collect(),
        merges: step.merges,
        retrained: step.retrained.into_iter().collect(),
    });
    post.partition = step.partition;
    post.sub_models = models;
    post.meta = meta;
    post.global_layer = layer;
    Ok(post)
}

/// [`apply_unlearn`] followed by [`certify`] against the pre-unlearn ensemble.
pub fn execute_unlearn(
    pre: &TrainedEnsemble,
    graph: &STGraph,
    request: &DeletionRequest,
) -> Result<(TrainedEnsemble, UnlearnCertificate)> {
    let post = apply_unlearn(pre, graph, request)?;
    let mut cert = certify(Some(pre), &post, request, graph)?;
    cert.timings.extend(post.timings.iter().map(|(k, v)| (k.clone(), *v)));
    Ok((post, cert))
}
