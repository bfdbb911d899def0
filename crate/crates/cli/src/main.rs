use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use callosum::bench::{
    merge_toml, render_report, run_experiment, timing_report, write_outputs, DatasetSpec, ExperimentConfig, Method,
    ResultsBundle, TimingRecord,
};
use callosum::stgraph::{export_csv, generate_synthetic, ingest_csv, read_request_file, STGraph};
use callosum::unlearn::{apply_unlearn, build_ensemble, certify, execute_unlearn, PipelineConfig, TrainedEnsemble};
use callosum::Error;
use clap::{Args, Parser, Subcommand};

const EXIT_INVALID_CERTIFICATE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "callosum", version, about = "Partitioned spatio-temporal forecasting with certified node unlearning")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate CSV features and edges and store them as one JSON graph.
    Ingest {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        /// Add the reverse of every edge.
        #[arg(long)]
        undirected: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a seeded synthetic graph as features.csv and edges.csv.
    Synth {
        #[arg(long, default_value_t = 40)]
        nodes: usize,
        #[arg(long, default_value_t = 2000)]
        timesteps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        diffusion: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build and train an ensemble and save its checkpoint.
    Train {
        #[command(flatten)]
        graph: GraphArgs,
        /// Pipeline settings as TOML; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a deletion request to a checkpoint, then certify it.
    Unlearn {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// One node id per line, or `edge,src,dst`.
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the certificate; printed when omitted.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Skip certification.
        #[arg(long)]
        no_certify: bool,
    },
    /// Check a post-unlearn checkpoint against a from-scratch reference run.
    Certify {
        #[command(flatten)]
        graph: GraphArgs,
        /// Checkpoint before the request; enables the influence probe.
        #[arg(long)]
        pre: Option<PathBuf>,
        #[arg(long)]
        post: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment: every method on every seed, with reports.
    Bench {
        /// Experiment config as TOML; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        unlearn_rate: Option<f64>,
        /// Use CSV data instead of the configured dataset.
        #[arg(long, requires = "edges")]
        features: Option<PathBuf>,
        #[arg(long, requires = "features")]
        edges: Option<PathBuf>,
        #[arg(long)]
        undirected: bool,
        /// Skip the unpartitioned reference behind the bound report.
        #[arg(long)]
        no_bounds: bool,
        #[command(flatten)]
        pipeline: PipelineFlags,
        #[arg(long, default_value = "bench-out")]
        out_dir: PathBuf,
    },
    /// Print the tables of a saved results bundle.
    Report {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        timings: Option<PathBuf>,
        /// Print the metrics CSV instead of tables.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
struct GraphArgs {
    /// Graph JSON written by `ingest`.
    #[arg(long, conflicts_with_all = ["features", "edges"])]
    graph: Option<PathBuf>,
    #[arg(long, requires = "edges")]
    features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    edges: Option<PathBuf>,
    #[arg(long)]
    undirected: bool,
}

impl GraphArgs {
    fn load(&self) -> Result<STGraph, Error> {
        match (&self.graph, &self.features, &self.edges) {
            (Some(g), _, _) => Ok(serde_json::from_slice(&fs::read(g)?)?),
            (None, Some(f), Some(e)) => ingest_csv(f, e, self.undirected),
            _ => Err(Error::Config("give --graph, or --features with --edges".into())),
        }
    }
}

/// Pipeline settings that can be overridden from the command line.
#[derive(Args, Default)]
struct PipelineFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Subgraph count; 0 selects it automatically.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    k_ring: Option<usize>,
    #[arg(long)]
    budget_c: Option<f64>,
    #[arg(long)]
    ganglions: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Attention heads `H`.
    #[arg(long)]
    heads: Option<usize>,
    /// Attention layers `L`.
    #[arg(long)]
    layers: Option<usize>,
    /// Global token width `D_g`.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    alpha_init: Option<f64>,
    #[arg(long)]
    global_epochs: Option<usize>,
}

impl PipelineFlags {
    fn apply(&self, p: &mut PipelineConfig) {
        fn set<T: Copy>(dst: &mut T, v: Option<T>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut p.seed, self.seed);
        set(&mut p.m, self.m);
        set(&mut p.gamma, self.gamma);
        set(&mut p.k_ring, self.k_ring);
        set(&mut p.budget_c, self.budget_c);
        set(&mut p.ganglions, self.ganglions);
        set(&mut p.task.horizon, self.horizon);
        set(&mut p.task.window, self.window);
        set(&mut p.sub_model.width, self.width);
        set(&mut p.sub_model.channels, self.channels);
        set(&mut p.sub_train.epochs, self.epochs);
        set(&mut p.sub_train.learning_rate, self.lr);
        set(&mut p.sub_train.lambda_reg, self.lambda_reg);
        set(&mut p.global.heads, self.heads);
        set(&mut p.global.layers, self.layers);
        set(&mut p.global.dim, self.dim);
        set(&mut p.global.lambda1, self.lambda1);
        set(&mut p.global.lambda2, self.lambda2);
        set(&mut p.global.alpha_init, self.alpha_init);
        set(&mut p.global_train.epochs, self.global_epochs);
    }
}

fn read_config(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

enum Outcome {
    Done,
    InvalidCertificate,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Ingest { features, edges, undirected, out } => {
            let g = ingest_csv(&features, &edges, undirected)?;
            write_json(&out, &g)?;
            println!("{} nodes, {} edges, {} timesteps, {} features", g.node_count(), g.edges().len(), g.timesteps(), g.feature_dim());
        }
        Command::Synth { nodes, timesteps, seed, diffusion, out_dir } => {
            let data = generate_synthetic(nodes, timesteps, seed, diffusion)?;
            fs::create_dir_all(&out_dir)?;
            export_csv(&data.graph, &out_dir.join("features.csv"), &out_dir.join("edges.csv"))?;
            println!("wrote {} ({} nodes, {} edges)", out_dir.display(), nodes, data.graph.edges().len());
        }
        Command::Train { graph, config, pipeline, out } => {
            let mut cfg = match &config {
                Some(p) => merge_toml(&PipelineConfig::default(), &read_config(p)?, &[])?,
                None => PipelineConfig::default(),
            };
            pipeline.apply(&mut cfg);
            let g = graph.load()?;
            let mut ens = build_ensemble(&g, &cfg)?;
            ens.save(&out)?;
            let m = ens.test_forecast(&g)?.metrics()?;
            println!("M = {}, delta_cut = {:.6}", ens.partition.m, ens.partition.delta_cut);
            println!("test MAE {:.4}  RMSE {:.4}", m.mae, m.rmse);
            println!("digest {}", ens.digest());
        }
        Command::Unlearn { graph, checkpoint, request, out, certificate, no_certify } => {
            let g = graph.load()?;
            let pre = TrainedEnsemble::load(&checkpoint)?;
            let req = read_request_file(&request)?;
            if no_certify {
                let post = apply_unlearn(&pre, &g, &req)?;
                post.save(&out)?;
                println!("retrained {:?}", post.history.last().map(|e| &e.retrained));
                return Ok(Outcome::Done);
            }
            let (post, cert) = execute_unlearn(&pre, &g, &req)?;
            post.save(&out)?;
            match certificate {
                Some(p) => write_json(&p, &cert)?,
                None => println!("{}", serde_json::to_string_pretty(&cert)?),
            }
            eprintln!("retrained {:?}; certificate valid: {}", cert.retrained_subgraphs, cert.valid);
            if !cert.valid {
                return Ok(Outcome::InvalidCertificate);
            }
        }
        Command::Certify { graph, pre, post, request, out } => {
            let g = graph.load()?;
            let pre = pre.as_deref().map(TrainedEnsemble::load).transpose()?;
            let post = TrainedEnsemble::load(&post)?;
            let req = read_request_file(&request)?;
            let cert = certify(pre.as_ref(), &post, &req, &g)?;
            match out {
                Some(p) => write_json(&p, &cert)?,
                None => println!("{}", serde_json::to_string_pretty(&cert)?),
            }
            eprintln!("valid: {}; failed checks: {:?}", cert.valid, cert.failed_checks);
            if !cert.valid {
                return Ok(Outcome::InvalidCertificate);
            }
        }
        Command::Bench { config, seeds, methods, unlearn_rate, features, edges, undirected, no_bounds, pipeline, out_dir } => {
            let base = config.as_deref().and_then(Path::parent).map(Path::to_path_buf);
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::from_toml(&read_config(p)?)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(r) = unlearn_rate {
                cfg.unlearn_rate = r;
            }
            if let (Some(f), Some(e)) = (features, edges) {
                cfg.dataset = DatasetSpec::Csv { features: f, edges: e, undirected };
            }
            if no_bounds {
                cfg.bound_report = false;
            }
            pipeline.apply(&mut cfg.pipeline);
            cfg.validate_shape()?;
            let g = cfg.dataset.load(base.as_deref())?;
            let exp = run_experiment(&cfg, &g)?;
            write_outputs(&out_dir, &exp)?;
            let timings = timing_report(&exp.timings).ok();
            print!("{}", render_report(&exp.bundle, timings.as_ref()));
            println!("results in {}", out_dir.display());
            let invalid = exp.bundle.seeds.iter().any(|s| s.certificate.as_ref().is_some_and(|c| !c.valid));
            if invalid {
                return Ok(Outcome::InvalidCertificate);
            }
        }
        Command::Report { bundle, timings, csv } => {
            let b: ResultsBundle = serde_json::from_slice(&fs::read(&bundle)?)?;
            if csv {
                print!("{}", callosum::bench::metrics_csv(&b)?);
                return Ok(Outcome::Done);
            }
            let t = match timings {
                Some(p) => {
                    let v: serde_json::Value = serde_json::from_slice(&fs::read(&p)?)?;
                    let records: Vec<TimingRecord> = serde_json::from_value(v["records"].clone())?;
                    Some(timing_report(&records)?)
                }
                None => None,
            };
            print!("{}", render_report(&b, t.as_ref()));
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::InvalidCertificate) => ExitCode::from(EXIT_INVALID_CERTIFICATE),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
