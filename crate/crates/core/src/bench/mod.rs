//! Experiment harness: seeded runs of callosum and its baselines, bound and
//! timing reports, and result tables.

mod baselines;
mod bounds;
mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::error::{invalid, Result};
use crate::stgraph::{DeletionRequest, MetricsReport, STGraph};
use crate::unlearn::{build_ensemble, execute_unlearn, Toolchain, UnlearnCertificate};

pub use baselines::{train_scratch, train_sisa, BaselineKind, Shard, ShardedModel};
pub use bounds::{bound_report, BoundReport, EPSILON};
pub use config::{merge_toml, DatasetSpec, ExperimentConfig, Method};
pub use report::{
    accuracy_table, bound_table, metrics_csv, render_report, summary_table, timing_table, write_outputs, Table,
};

/// Id under which each seed's deletion request is drawn.
const REQUEST_ID: u64 = u64::MAX - 2;

/// Draws `count` distinct nodes uniformly, reproducibly from `seed`.
pub fn sample_request(graph: &STGraph, count: usize, seed: u64) -> DeletionRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, REQUEST_ID, "unlearn-request"));
    DeletionRequest::from_nodes(graph.node_ids().choose_multiple(&mut rng, count).cloned())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Trained on all data.
    Full,
    /// After the seed's deletion request.
    Unlearned,
}

/// Test-split metrics of one method in one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: Method,
    pub full: MetricsReport,
    pub unlearned: Option<MetricsReport>,
    /// Sub-models or shards retrained by the deletion.
    pub retrained: Vec<u64>,
    pub ledger_clean: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub request: DeletionRequest,
    /// Scratch on all data, scored on the retained nodes only.
    pub gold: Option<MetricsReport>,
    pub runs: Vec<MethodRun>,
    pub bound: Option<BoundReport>,
    /// Without wall-clock fields, so bundles are reproducible.
    pub certificate: Option<UnlearnCertificate>,
}

impl SeedResult {
    pub fn run(&self, method: Method) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.method == method)
    }
}

/// Mean and standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub phase: Phase,
    pub seeds: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    /// `mae_mean` relative to the gold column, when there is one.
    pub mae_vs_gold: Option<f64>,
}

/// Everything a run produces except wall clock.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub config: ExperimentConfig,
    pub dataset_digest: String,
    pub nodes: usize,
    pub timesteps: usize,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<SummaryRow>,
    /// Seeds on which callosum's post-unlearn MAE is at most SISA's.
    pub callosum_beats_sisa: Option<usize>,
    pub toolchain: Toolchain,
}

/// Wall clock of one method on one seed, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub seed: u64,
    pub method: Option<Method>,
    pub stage1: f64,
    pub stage1_max: f64,
    pub stage2: f64,
    pub build: f64,
    /// The deletion path: selective retrain, full retrain or shard retrain.
    pub unlearn: Option<f64>,
    pub certify: Option<f64>,
}

pub struct Experiment {
    pub bundle: ResultsBundle,
    pub timings: Vec<TimingRecord>,
}

fn timing_from(seed: u64, method: Method, build: &BTreeMap<String, f64>, total: f64) -> TimingRecord {
    let get = |k: &str| build.get(k).copied().unwrap_or(0.0);
    TimingRecord {
        seed,
        method: Some(method),
        stage1: get("stage1"),
        stage1_max: get("stage1_max"),
        stage2: get("stage2"),
        build: total,
        unlearn: None,
        certify: None,
    }
}

fn run_seed(cfg: &ExperimentConfig, graph: &STGraph, seed: u64) -> Result<(SeedResult, Vec<TimingRecord>)> {
    let pcfg = crate::unlearn::PipelineConfig { seed, ..cfg.pipeline.clone() };
    let unlearning = cfg.unlearn_rate > 0.0;
    let request = if unlearning {
        sample_request(graph, cfg.deletion_count(graph.node_count()), seed)
    } else {
        DeletionRequest::default()
    };
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    let mut certificate = None;
    let mut bound = None;
    let mut gold = None;
    let mut callosum_m = None;
    let mut retained: Option<BTreeSet<String>> = None;

    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    for &method in &methods {
        log::info!("seed {seed}: {}", method.name());
        let run = match method {
            Method::Callosum => {
                let clock = Instant::now();
                let mut pre = build_ensemble(graph, &pcfg)?;
                let mut t = timing_from(seed, method, &pre.timings, clock.elapsed().as_secs_f64());
                callosum_m = Some(pre.partition.m);
                let full = pre.test_forecast(graph)?.metrics()?;
                let (post, unlearned, retrained, clean) = if unlearning {
                    let (mut post, cert) = execute_unlearn(&pre, graph, &request)?;
                    t.unlearn = post.timings.get("unlearn").copied();
                    t.certify = Some(cert.timings.iter().filter(|(k, _)| k.starts_with("certify")).map(|(_, v)| v).sum());
                    let fc = post.test_forecast(graph)?;
                    retained = Some(fc.node_ids.iter().cloned().collect());
                    let clean = cert.ledger_clean;
                    let retrained = cert.retrained_subgraphs.clone();
                    certificate = Some(cert.without_timings());
                    (Some(post), Some(fc.metrics()?), retrained, clean)
                } else {
                    (None, None, Vec::new(), pre.ledger.clean())
                };
                if cfg.bound_report {
                    let reference = if pre.partition.m == 1 {
                        pre.clone()
                    } else {
                        build_ensemble(graph, &crate::unlearn::PipelineConfig { m: 1, ..pcfg.clone() })?
                    };
                    bound = Some(bound_report(&pre, Some(&reference), post.as_ref(), graph)?);
                }
                timings.push(t);
                MethodRun { method, full, unlearned, retrained, ledger_clean: clean }
            }
            Method::Scratch | Method::Sisa => {
                let clock = Instant::now();
                let mut pre = match method {
                    Method::Scratch => train_scratch(graph, &pcfg)?,
                    _ => {
                        let shards = if pcfg.m > 0 { pcfg.m } else { callosum_m.expect("validated") };
                        train_sisa(graph, &pcfg, shards)?
                    }
                };
                let mut t = timing_from(seed, method, &pre.timings, clock.elapsed().as_secs_f64());
                let fc = pre.test_forecast(graph)?;
                let full = fc.metrics()?;
                let (unlearned, retrained, clean) = if unlearning {
                    let mut post = pre.unlearn(graph, &request)?;
                    t.unlearn = post.timings.get("unlearn").copied();
                    let after = post.test_forecast(graph)?;
                    let keep: BTreeSet<String> = after.node_ids.iter().cloned().collect();
                    if method == Method::Scratch {
                        gold = Some(fc.restrict(&keep).metrics()?);
                    }
                    (Some(after.metrics()?), post.changed_shards(&pre), post.ledger.clean())
                } else {
                    (None, Vec::new(), pre.ledger.clean())
                };
                timings.push(t);
                MethodRun { method, full, unlearned, retrained, ledger_clean: clean }
            }
        };
        runs.push(run);
    }
    if unlearning && gold.is_none() {
        // The gold column is reported even when scratch is not a compared method.
        let mut scratch = train_scratch(graph, &pcfg)?;
        let keep = match retained {
            Some(k) => k,
            None => {
                let gone = &request.nodes;
                graph.node_ids().iter().filter(|id| !gone.contains(*id)).cloned().collect()
            }
        };
        gold = Some(scratch.test_forecast(graph)?.restrict(&keep).metrics()?);
    }
    Ok((SeedResult { seed, request, gold, runs, bound, certificate }, timings))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn summarize(seeds: &[SeedResult], methods: &[Method]) -> Vec<SummaryRow> {
    let gold: Vec<&MetricsReport> = seeds.iter().filter_map(|s| s.gold.as_ref()).collect();
    let gold_mae = (!gold.is_empty()).then(|| mean_std(&gold.iter().map(|m| m.mae).collect::<Vec<_>>()).0);
    let row = |name: &str, phase: Phase, ms: &[&MetricsReport], vs_gold: bool| {
        let (mae_mean, mae_std) = mean_std(&ms.iter().map(|m| m.mae).collect::<Vec<_>>());
        let (rmse_mean, rmse_std) = mean_std(&ms.iter().map(|m| m.rmse).collect::<Vec<_>>());
        SummaryRow {
            method: name.to_string(),
            phase,
            seeds: ms.len(),
            mae_mean,
            mae_std,
            rmse_mean,
            rmse_std,
            mae_vs_gold: if vs_gold { gold_mae.map(|g| mae_mean / g) } else { None },
        }
    };
    let mut out = Vec::new();
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    for m in methods {
        let runs: Vec<&MethodRun> = seeds.iter().filter_map(|s| s.run(m)).collect();
        let full: Vec<&MetricsReport> = runs.iter().map(|r| &r.full).collect();
        out.push(row(m.name(), Phase::Full, &full, false));
        let after: Vec<&MetricsReport> = runs.iter().filter_map(|r| r.unlearned.as_ref()).collect();
        if !after.is_empty() {
            out.push(row(m.name(), Phase::Unlearned, &after, true));
        }
    }
    if !gold.is_empty() {
        out.push(row("gold", Phase::Full, &gold, true));
    }
    out
}

/// Runs every configured method on every seed.
///
/// Seeds run one after another so per-stage wall clock is not skewed by
/// contention; results do not depend on the order.
pub fn run_experiment(cfg: &ExperimentConfig, graph: &STGraph) -> Result<Experiment> {
    cfg.validate(graph.node_count())?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut timings = Vec::new();
    for &seed in &cfg.seeds {
        let (r, t) = run_seed(cfg, graph, seed)?;
        seeds.push(r);
        timings.extend(t);
    }
    let beats = (cfg.unlearn_rate > 0.0 && cfg.methods.contains(&Method::Callosum) && cfg.methods.contains(&Method::Sisa))
        .then(|| {
            seeds
                .iter()
                .filter(|s| {
                    let mae = |m| s.run(m).and_then(|r| r.unlearned.as_ref()).map(|x| x.mae);
                    matches!((mae(Method::Callosum), mae(Method::Sisa)), (Some(c), Some(s)) if c <= s)
                })
                .count()
        });
    let bundle = ResultsBundle {
        config: cfg.clone(),
        dataset_digest: graph.digest(),
        nodes: graph.node_count(),
        timesteps: graph.timesteps(),
        summary: summarize(&seeds, &cfg.methods),
        seeds,
        callosum_beats_sisa: beats,
        toolchain: Toolchain::current(),
    };
    Ok(Experiment { bundle, timings })
}

/// Mean per-stage wall clock of one method and its deletion cost relative
/// to retraining scratch from zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub seeds: usize,
    pub stage1: f64,
    pub stage1_max: f64,
    pub stage2: f64,
    pub build: f64,
    pub unlearn: f64,
    pub ratio_vs_scratch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn row(&self, method: Method) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Averages timings over seeds. Needs scratch and at least one deletion.
pub fn timing_report(records: &[TimingRecord]) -> Result<TimingReport> {
    let of = |m: Method| records.iter().filter(move |r| r.method == Some(m));
    let scratch: Vec<f64> = of(Method::Scratch).filter_map(|r| r.unlearn).collect();
    if scratch.is_empty() {
        return invalid("timing report needs scratch runs with a deletion phase");
    }
    let scratch_mean = scratch.iter().sum::<f64>() / scratch.len() as f64;
    let mut rows = Vec::new();
    for m in [Method::Callosum, Method::Scratch, Method::Sisa] {
        let rs: Vec<&TimingRecord> = of(m).collect();
        if rs.is_empty() {
            continue;
        }
        let unl: Vec<f64> = rs.iter().filter_map(|r| r.unlearn).collect();
        if unl.len() != rs.len() {
            return invalid(format!("{} runs lack a deletion phase", m.name()));
        }
        let mean = |f: &dyn Fn(&TimingRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
        let unlearn = unl.iter().sum::<f64>() / unl.len() as f64;
        rows.push(TimingRow {
            method: m,
            seeds: rs.len(),
            stage1: mean(&|r| r.stage1),
            stage1_max: mean(&|r| r.stage1_max),
            stage2: mean(&|r| r.stage2),
            build: mean(&|r| r.build),
            unlearn,
            ratio_vs_scratch: if m == Method::Scratch { 1.0 } else { unlearn / scratch_mean },
        });
    }
    Ok(TimingReport { rows })
}

#[cfg(test)]
mod tests;
