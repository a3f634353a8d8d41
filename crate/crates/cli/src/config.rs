//! Experiment configuration: one JSON document, with command-line flags as a
//! flat projection onto it.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use splitfed::data::PartitionSpec;
use splitfed::engine::{RoundConfig, TransportKind};
use splitfed::model::{build, ModelGraph, NetConfig, Network, SplitPlan};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    /// Square input side; images are resized to it.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { base_width: 32, depth: 4, num_classes: 5, input_size: 64 }
    }
}

/// Synthetic data unless `dir` (holding `images/` and `masks/`) is set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub dir: Option<PathBuf>,
    /// Synthetic sample count; defaults to what the partition needs.
    pub samples: Option<usize>,
}

/// A named preset, optionally with its counts replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub preset: Option<String>,
    pub client_counts: Option<Vec<usize>>,
    pub test_count: Option<usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { preset: Some("synthetic-4client".into()), client_counts: None, test_count: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: Network,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    /// `training.seed` always mirrors the top-level `seed`.
    #[serde(default)]
    pub training: RoundConfig,
    /// Defaults to the network's own plan.
    #[serde(default)]
    pub plan: Option<SplitPlan>,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Test samples dumped as predicted-mask PNGs.
    #[serde(default = "default_mask_samples")]
    pub mask_samples: usize,
    /// Server address for `serve` and `client`.
    #[serde(default = "default_address")]
    pub address: String,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn default_mask_samples() -> usize {
    4
}

fn default_address() -> String {
    "127.0.0.1:7878".into()
}

/// Flags shared by every command that reads an experiment config.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub network: Option<String>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated client sample counts.
    #[arg(long, value_delimiter = ',')]
    pub client_counts: Option<Vec<usize>>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub global_rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub aggregate_server: Option<bool>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, requires = "be_first")]
    pub fe_last: Option<usize>,
    #[arg(long, requires = "fe_last")]
    pub be_first: Option<usize>,
    /// inproc or tcp.
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mask_samples: Option<usize>,
    #[arg(long)]
    pub address: Option<String>,
}

fn set(root: &mut Value, path: &[&str], v: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        let obj = cur.as_object_mut().expect("objects along override paths");
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
    }
    cur.as_object_mut().expect("object").insert(path[path.len() - 1].to_string(), v);
}

impl ConfigArgs {
    fn apply(&self, v: &mut Value) {
        if let Some(p) = &self.preset {
            // A preset flag replaces the whole partition layout from the file.
            set(v, &["partition"], json!({ "preset": p }));
        }
        if let (Some(fe_last), Some(be_first)) = (self.fe_last, self.be_first) {
            set(v, &["plan"], json!({ "fe_last": fe_last, "be_first": be_first }));
        }
        let mut put = |path: &[&str], val: Option<Value>| {
            if let Some(val) = val {
                set(v, path, val);
            }
        };
        put(&["network"], self.network.clone().map(Value::from));
        put(&["partition", "client_counts"], self.client_counts.clone().map(|c| json!(c)));
        put(&["partition", "test_count"], self.test_count.map(Value::from));
        put(&["seed"], self.seed.map(Value::from));
        put(&["training", "global_rounds"], self.global_rounds.map(Value::from));
        put(&["training", "local_epochs"], self.local_epochs.map(Value::from));
        put(&["training", "batch_size"], self.batch_size.map(Value::from));
        put(&["training", "lr"], self.lr.map(Value::from));
        put(&["training", "aggregate_server"], self.aggregate_server.map(Value::from));
        put(&["model", "base_width"], self.base_width.map(Value::from));
        put(&["model", "depth"], self.depth.map(Value::from));
        put(&["model", "num_classes"], self.num_classes.map(Value::from));
        put(&["model", "input_size"], self.input_size.map(Value::from));
        put(&["dataset", "samples"], self.samples.map(Value::from));
        put(&["dataset", "dir"], self.data_dir.as_ref().map(|p| json!(p)));
        put(&["transport"], self.transport.clone().map(Value::from));
        put(&["output_dir"], self.out.as_ref().map(|p| json!(p)));
        put(&["mask_samples"], self.mask_samples.map(Value::from));
        put(&["address"], self.address.clone().map(Value::from));
    }

    /// Reads the file (if any), applies the flags, checks the schema and
    /// resolves defaults.
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut v = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !v.is_object() {
            return Err(CliError::Config("the config must be a JSON object".into()));
        }
        self.apply(&mut v);
        parse_value(v)
    }
}

/// Schema check with the failing key path in the message.
pub fn parse_value(v: Value) -> Result<ExperimentConfig, CliError> {
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })?;
    cfg.training.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
fn parse_str(text: &str) -> Result<ExperimentConfig, CliError> {
    parse_value(serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?)
}

impl ExperimentConfig {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            num_classes: self.model.num_classes,
            base_width: self.model.base_width,
            depth: self.model.depth,
            input_hw: (self.model.input_size, self.model.input_size),
            ..NetConfig::default()
        }
    }

    pub fn graph(&self) -> Result<ModelGraph, CliError> {
        build(self.network, &self.net_config()).map_err(|e| CliError::Config(format!("model: {e}")))
    }

    pub fn plan(&self) -> Result<SplitPlan, CliError> {
        Ok(self.plan.unwrap_or(self.graph()?.default_plan))
    }

    pub fn partition_spec(&self) -> Result<PartitionSpec, CliError> {
        let p = &self.partition;
        let base = match &p.preset {
            Some(name) => PartitionSpec::preset(name, self.seed).ok_or_else(|| {
                let known: Vec<&str> = splitfed::data::PRESETS.iter().map(|p| p.0).collect();
                CliError::Config(format!("partition.preset: unknown preset {name:?} (known: {})", known.join(", ")))
            })?,
            None => PartitionSpec { client_counts: Vec::new(), test_count: 0, seed: self.seed },
        };
        let spec = PartitionSpec {
            client_counts: p.client_counts.clone().unwrap_or(base.client_counts),
            test_count: p.test_count.unwrap_or(base.test_count),
            seed: self.seed,
        };
        if spec.client_counts.is_empty() || spec.client_counts.contains(&0) {
            return Err(CliError::Config("partition.client_counts: need at least one client, each with samples".into()));
        }
        if spec.test_count == 0 {
            return Err(CliError::Config("partition.test_count: the test set must not be empty".into()));
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.training.validate().map_err(|e| CliError::Config(format!("training: {e}")))?;
        if self.model.num_classes > splitfed::data::PALETTE.len() {
            return Err(CliError::Config(format!("model.num_classes: at most {} classes are supported", splitfed::data::PALETTE.len())));
        }
        let graph = self.graph()?;
        if let Some(plan) = self.plan {
            splitfed::model::split_graph(&graph, plan).map_err(|e| CliError::Config(format!("plan: {e}")))?;
        }
        let spec = self.partition_spec()?;
        if let Some(n) = self.dataset.samples {
            if n < spec.total() {
                return Err(CliError::Config(format!("dataset.samples: {n} is fewer than the {} the partition needs", spec.total())));
            }
        }
        Ok(())
    }

    /// Writes the resolved config as pretty JSON.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(dir.join("config.json"), text + "\n").map_err(|e| CliError::Runtime(format!("writing config echo: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_network_is_named() {
        let err = parse_str("{}").unwrap_err().to_string();
        assert!(err.contains("network"), "{err}");
        let err = parse_str(r#"{"network": "unet", "training": {"rounds": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("training") && err.contains("rounds"), "{err}");
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"network": "segnet", "training": {"global_rounds": 10, "local_epochs": 2}}"#).unwrap();
        let args = ConfigArgs { config: Some(path), global_rounds: Some(3), ..Default::default() };
        let cfg = args.load().unwrap();
        assert_eq!((cfg.training.global_rounds, cfg.training.local_epochs), (3, 2));
        assert_eq!(cfg.network, Network::Segnet);
    }

    #[test]
    fn echo_reparses_equal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_str(r#"{"network": "cgnet", "seed": 9, "plan": {"fe_last": 0, "be_first": 2}}"#).unwrap();
        cfg.echo(dir.path()).unwrap();
        let back = parse_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.training.seed, 9);
    }

    #[test]
    fn semantic_errors() {
        assert!(parse_str(r#"{"network": "unet", "plan": {"fe_last": 5, "be_first": 2}}"#).is_err());
        assert!(parse_str(r#"{"network": "unet", "partition": {"preset": "nope"}}"#).is_err());
        assert!(parse_str(r#"{"network": "unet", "model": {"input_size": 60}}"#).is_err());
        assert!(parse_str(r#"{"network": "resnet"}"#).is_err());
    }
}
