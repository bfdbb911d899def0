use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stgraph::{generate_synthetic, ingest_csv, STGraph};
use crate::unlearn::PipelineConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Callosum,
    Scratch,
    Sisa,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Callosum => "callosum",
            Method::Scratch => "scratch",
            Method::Sisa => "sisa",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "callosum" => Ok(Method::Callosum),
            "scratch" => Ok(Method::Scratch),
            "sisa" => Ok(Method::Sisa),
            other => Err(Error::Config(format!("unknown method {other:?}; expected callosum, scratch or sisa"))),
        }
    }
}

/// Where the graph comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        nodes: usize,
        timesteps: usize,
        seed: u64,
        diffusion: f64,
    },
    Csv {
        features: PathBuf,
        edges: PathBuf,
        #[serde(default)]
        undirected: bool,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { nodes: 40, timesteps: 2000, seed: 7, diffusion: 0.3 }
    }
}

impl DatasetSpec {
    /// Loads the graph; relative CSV paths resolve against `base`.
    pub fn load(&self, base: Option<&Path>) -> Result<STGraph> {
        match self {
            DatasetSpec::Synthetic { nodes, timesteps, seed, diffusion } => {
                Ok(generate_synthetic(*nodes, *timesteps, *seed, *diffusion)?.graph)
            }
            DatasetSpec::Csv { features, edges, undirected } => {
                let resolve = |p: &PathBuf| match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                ingest_csv(&resolve(features), &resolve(edges), *undirected)
            }
        }
    }
}

/// One self-contained experiment. Every default is written back into the
/// results bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub methods: Vec<Method>,
    /// Fraction of nodes deleted per seed; 0 skips the unlearning phase.
    pub unlearn_rate: f64,
    pub seeds: Vec<u64>,
    /// Shared by every method; `pipeline.seed` is replaced by each run seed.
    pub pipeline: PipelineConfig,
    /// Also build an unpartitioned (`m = 1`) callosum ensemble per seed as
    /// the full-graph reference of the bound report.
    pub bound_report: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            methods: vec![Method::Callosum, Method::Scratch, Method::Sisa],
            unlearn_rate: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            pipeline: PipelineConfig::default(),
            bound_report: true,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file; omitted keys, including keys of nested tables,
    /// keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = merge_toml(&ExperimentConfig::default(), text, &["dataset"])?;
        cfg.validate_shape()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that do not need the graph.
    pub fn validate_shape(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if !(0.0..1.0).contains(&self.unlearn_rate) {
            return bad(format!("unlearn_rate must lie in [0,1), got {}", self.unlearn_rate));
        }
        self.pipeline.validate()
    }

    /// Full validation against a loaded graph of `n` nodes.
    pub fn validate(&self, n: usize) -> Result<()> {
        self.validate_shape()?;
        if self.unlearn_rate > 0.0 && self.deletion_count(n) < 1 {
            return Err(Error::Config(format!(
                "unlearn_rate {} deletes no node of {n}; need rate·N >= 1",
                self.unlearn_rate
            )));
        }
        if self.deletion_count(n) + 3 > n {
            return Err(Error::Config(format!("unlearn_rate {} leaves fewer than 3 of {n} nodes", self.unlearn_rate)));
        }
        if self.methods.contains(&Method::Sisa) && self.pipeline.m == 0 && !self.methods.contains(&Method::Callosum) {
            return Err(Error::Config("sisa needs an explicit m unless callosum runs alongside".into()));
        }
        Ok(())
    }

    /// `⌊rate·N⌉` nodes per request.
    pub fn deletion_count(&self, n: usize) -> usize {
        (self.unlearn_rate * n as f64).round() as usize
    }
}

/// Overlays the TOML document `text` on `defaults`, table by table.
/// Top-level keys in `replace` are taken wholesale instead of merged.
pub fn merge_toml<T: Serialize + DeserializeOwned>(defaults: &T, text: &str, replace: &[&str]) -> Result<T> {
    let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
    let user: toml::Table = toml::from_str(text).map_err(|e| cfg_err(&e))?;
    let toml::Value::Table(mut base) = toml::Value::try_from(defaults).map_err(|e| cfg_err(&e))? else {
        return Err(Error::Config("defaults do not serialize to a table".into()));
    };
    for (k, v) in user {
        if replace.contains(&k.as_str()) {
            base.insert(k, v);
        } else {
            overlay(&mut base, k, v);
        }
    }
    toml::Value::Table(base).try_into().map_err(|e| cfg_err(&e))
}

fn overlay(base: &mut toml::Table, key: String, value: toml::Value) {
    match (base.get_mut(&key), value) {
        (Some(toml::Value::Table(b)), toml::Value::Table(v)) => {
            for (k, x) in v {
                overlay(b, k, x);
            }
        }
        (_, v) => {
            base.insert(key, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "methods = [\"scratch\"]\nseeds = [3]\n[dataset]\nkind = \"synthetic\"\nnodes = 12\ntimesteps = 100\nseed = 1\ndiffusion = 0.2\n[pipeline]\nm = 2\n",
        )
        .unwrap();
        assert_eq!(cfg.methods, vec![Method::Scratch]);
        assert_eq!(cfg.pipeline.m, 2);
        assert_eq!(cfg.pipeline.k_ring, PipelineConfig::default().k_ring);
        assert_eq!(cfg.unlearn_rate, 0.1);
    }

    #[test]
    fn nested_tables_merge_key_by_key() {
        let cfg = ExperimentConfig::from_toml("[pipeline.global_train]\nepochs = 2\n[pipeline.global]\nheads = 4\n").unwrap();
        let d = PipelineConfig::default();
        assert_eq!(cfg.pipeline.global_train.epochs, 2);
        assert_eq!(cfg.pipeline.global_train.learning_rate, d.global_train.learning_rate);
        assert_eq!(cfg.pipeline.global.heads, 4);
        assert_eq!(cfg.pipeline.global.dim, d.global.dim);

        let csv = ExperimentConfig::from_toml("[dataset]\nkind = \"csv\"\nfeatures = \"f.csv\"\nedges = \"e.csv\"\n").unwrap();
        assert!(matches!(csv.dataset, DatasetSpec::Csv { undirected: false, .. }));
        assert!(ExperimentConfig::from_toml("[pipeline.global]\nwidth = 3\n").is_err());
    }

    #[test]
    fn rejections_are_config_errors() {
        for text in [
            "methods = [\"steps\"]",
            "seeds = []",
            "unlearn_rate = 1.0",
            "unlearn_rate = -0.1",
            "colour = 3",
            "[pipeline]\ngamma = -1.0",
            "[dataset]\nkind = \"parquet\"",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
        let cfg = ExperimentConfig { unlearn_rate: 0.01, ..ExperimentConfig::default() };
        assert!(matches!(cfg.validate(40), Err(Error::Config(_))));
        assert!(cfg.validate(100).is_ok());
        let cfg = ExperimentConfig { unlearn_rate: 0.9, ..ExperimentConfig::default() };
        assert!(matches!(cfg.validate(10), Err(Error::Config(_))));
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::Callosum, Method::Scratch, Method::Sisa] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("graph_eraser".parse::<Method>().is_err());
    }
}
