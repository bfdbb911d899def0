use super::*;
use crate::error::Error;
use crate::neural::{SubModelSpec, TrainConfig};
use crate::stgraph::ForecastTask;
use crate::unlearn::PipelineConfig;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic { nodes: 16, timesteps: 160, seed: 3, diffusion: 0.3 },
        unlearn_rate: 0.125,
        seeds: vec![0, 1],
        pipeline: PipelineConfig {
            m: 2,
            task: ForecastTask::new(2, 6),
            sub_model: SubModelSpec { channels: 3, kernel: 2, width: 4 },
            sub_train: TrainConfig { epochs: 1, batch: 16, ..TrainConfig::default() },
            global_train: TrainConfig { epochs: 1, batch: 16, ..PipelineConfig::default().global_train },
            ..PipelineConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn requests_are_seeded_and_uniform_without_replacement() {
    let g = tiny().dataset.load(None).unwrap();
    let a = sample_request(&g, 4, 9);
    assert_eq!(a, sample_request(&g, 4, 9));
    assert_eq!(a.nodes.len(), 4);
    assert_ne!(a, sample_request(&g, 4, 10));
    let mut hits = vec![0usize; 16];
    for s in 0..800 {
        for id in sample_request(&g, 2, s).nodes {
            hits[g.index_of(&id).unwrap()] += 1;
        }
    }
    // 100 expected per node; 6 standard deviations is about 58.
    assert!(hits.iter().all(|&h| (42..=158).contains(&h)), "{hits:?}");
}

#[test]
fn experiment_is_reproducible_and_complete() {
    let cfg = tiny();
    let g = cfg.dataset.load(None).unwrap();
    let a = run_experiment(&cfg, &g).unwrap();
    let b = run_experiment(&cfg, &g).unwrap();
    let ja = serde_json::to_vec_pretty(&a.bundle).unwrap();
    assert_eq!(ja, serde_json::to_vec_pretty(&b.bundle).unwrap());

    for s in &a.bundle.seeds {
        assert_eq!(s.request.nodes.len(), 2);
        assert!(s.gold.is_some());
        assert_eq!(s.runs.len(), 3);
        assert!(s.runs.iter().all(|r| r.unlearned.is_some() && r.ledger_clean));
        let cert = s.certificate.as_ref().unwrap();
        assert!(cert.valid, "{:?}", cert.failed_checks);
        assert!(cert.timings.is_empty());
        assert!(s.bound.is_some());
        assert_eq!(s.run(Method::Scratch).unwrap().retrained, vec![0]);
    }
    assert!(a.bundle.callosum_beats_sisa.is_some());
    let names: Vec<(&str, &Phase)> = a.bundle.summary.iter().map(|r| (r.method.as_str(), &r.phase)).collect();
    assert!(names.contains(&("gold", &Phase::Full)));
    assert!(names.contains(&("callosum", &Phase::Unlearned)));

    let t = timing_report(&a.timings).unwrap();
    assert_eq!(t.row(Method::Scratch).unwrap().ratio_vs_scratch, 1.0);
    assert!(t.rows.iter().all(|r| r.seeds == 2 && r.unlearn > 0.0));

    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &a).unwrap();
    for f in ["bundle.json", "metrics.csv", "report.txt", "timings.json", "timings.txt", "seed-0/result.json", "seed-1/certificate.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(dir.path().join("bundle.json")).unwrap()[..ja.len()], ja[..]);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // header + 2 seeds × (3 methods × 2 phases + gold)
    assert_eq!(csv.lines().count(), 1 + 2 * 7);
    let report = render_report(&a.bundle, Some(&t));
    for section in ["Summary", "Per seed", "Bounds", "Certificates", "Wall clock"] {
        assert!(report.contains(section), "{section}");
    }
}

#[test]
fn gold_is_reported_without_scratch() {
    let cfg = ExperimentConfig { methods: vec![Method::Sisa], seeds: vec![4], bound_report: false, ..tiny() };
    let g = cfg.dataset.load(None).unwrap();
    let exp = run_experiment(&cfg, &g).unwrap();
    assert!(exp.bundle.seeds[0].gold.is_some());
    assert!(timing_report(&exp.timings).is_err());
}

#[test]
fn no_unlearning_phase_without_a_rate() {
    let cfg = ExperimentConfig { unlearn_rate: 0.0, seeds: vec![2], methods: vec![Method::Scratch], ..tiny() };
    let g = cfg.dataset.load(None).unwrap();
    let exp = run_experiment(&cfg, &g).unwrap();
    let s = &exp.bundle.seeds[0];
    assert!(s.request.is_empty() && s.gold.is_none() && s.runs[0].unlearned.is_none());
    assert!(timing_report(&exp.timings).is_err());
}

#[test]
fn invalid_experiments_are_config_errors() {
    let g = tiny().dataset.load(None).unwrap();
    let cfg = ExperimentConfig { unlearn_rate: 0.01, ..tiny() };
    assert!(matches!(run_experiment(&cfg, &g), Err(Error::Config(_))));
    let cfg = ExperimentConfig { unlearn_rate: 0.95, ..tiny() };
    assert!(matches!(run_experiment(&cfg, &g), Err(Error::Config(_))));
    let cfg = ExperimentConfig { seeds: vec![], ..tiny() };
    assert!(matches!(run_experiment(&cfg, &g), Err(Error::Config(_))));
}
