use std::path::Path;
use std::process::{Command, Output};

fn callosum(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_callosum")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const SMALL: &[&str] = &[
    "--m", "2", "--window", "6", "--horizon", "2", "--width", "4", "--channels", "3", "--epochs", "1",
    "--global-epochs", "1",
];

fn synth(dir: &Path) {
    let o = callosum(&["synth", "--nodes", "12", "--timesteps", "120", "--seed", "3", "--out-dir", "data"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn graph_args() -> Vec<&'static str> {
    vec!["--features", "data/features.csv", "--edges", "data/edges.csv"]
}

#[test]
fn train_unlearn_certify_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);

    let o = callosum(&["ingest", "--features", "data/features.csv", "--edges", "data/edges.csv", "--out", "g.json"], dir);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 nodes"));

    let mut train = vec!["train", "--graph", "g.json", "--out", "pre.json"];
    train.extend(SMALL);
    let o = callosum(&train, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("test MAE"));

    std::fs::write(dir.join("req.txt"), "# forget two sensors\nn1\nn7\n").unwrap();
    let mut unlearn = vec!["unlearn", "--checkpoint", "pre.json", "--request", "req.txt", "--out", "post.json"];
    unlearn.extend(["--certificate", "cert.json"]);
    unlearn.extend(graph_args());
    let o = callosum(&unlearn, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cert: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("cert.json")).unwrap()).unwrap();
    assert_eq!(cert["valid"], true);
    assert_eq!(cert["influence_probe"], true);

    let mut check = vec!["certify", "--pre", "pre.json", "--post", "post.json", "--request", "req.txt"];
    check.extend(graph_args());
    let o = callosum(&check, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // A hand-edited checkpoint no longer matches the reference run.
    let mut post: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("post.json")).unwrap()).unwrap();
    let alpha = &mut post["global_layer"]["params"]["alpha"][0];
    *alpha = serde_json::json!(alpha.as_f64().unwrap() * 0.5 + 0.01);
    std::fs::write(dir.join("tampered.json"), serde_json::to_vec(&post).unwrap()).unwrap();
    let mut check = vec!["certify", "--post", "tampered.json", "--request", "req.txt", "--out", "bad.json"];
    check.extend(graph_args());
    let o = callosum(&check, dir);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let bad: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("bad.json")).unwrap()).unwrap();
    assert_eq!(bad["failed_checks"], serde_json::json!(["equivalence"]));
}

#[test]
fn config_errors_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    assert_eq!(code(&callosum(&["train", "--bogus-flag"], dir)), 3);
    assert_eq!(code(&callosum(&["bench", "--methods", "graph_eraser"], dir)), 3);

    std::fs::write(dir.join("bad.toml"), "unlearn_rate = 2.0\n").unwrap();
    assert_eq!(code(&callosum(&["bench", "--config", "bad.toml"], dir)), 3);
    std::fs::write(dir.join("typo.toml"), "[pipeline]\ngama = 0.1\n").unwrap();
    assert_eq!(code(&callosum(&["bench", "--config", "typo.toml"], dir)), 3);
    assert_eq!(code(&callosum(&["bench", "--config", "missing.toml"], dir)), 3);

    let mut train = vec!["train", "--out", "x.json", "--m", "50"];
    train.extend(graph_args());
    assert_eq!(code(&callosum(&train, dir)), 3);
    assert_eq!(code(&callosum(&["train", "--out", "x.json"], dir)), 3);
    assert_eq!(code(&callosum(&["--help"], dir)), 0);
}

#[test]
fn bench_writes_bundle_and_report_reads_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    std::fs::write(
        dir.join("exp.toml"),
        "methods = [\"callosum\", \"scratch\", \"sisa\"]\nunlearn_rate = 0.17\nseeds = [1]\n\
         [dataset]\nkind = \"csv\"\nfeatures = \"data/features.csv\"\nedges = \"data/edges.csv\"\n\
         [pipeline]\nm = 2\n[pipeline.task]\nhorizon = 2\nwindow = 6\n\
         [pipeline.sub_model]\nwidth = 4\nchannels = 3\n[pipeline.sub_train]\nepochs = 1\n\
         [pipeline.global_train]\nepochs = 1\n",
    )
    .unwrap();
    let o = callosum(&["bench", "--config", "exp.toml", "--out-dir", "out"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Summary") && text.contains("gold") && text.contains("unlearn/scratch"), "{text}");

    let o = callosum(&["report", "--bundle", "out/bundle.json", "--timings", "out/timings.json"], dir);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Certificates"));
    let o = callosum(&["report", "--bundle", "out/bundle.json", "--csv"], dir);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("seed,method,phase,mae"));
}
