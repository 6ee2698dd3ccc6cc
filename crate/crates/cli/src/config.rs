//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key in [`REQUIRED`] must appear exactly once; [`OPTIONAL`] keys
//! may be omitted. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use tdst::model::ReuseSpec;
use tdst::train::TrainConfig;
use tdst::ModelConfig;

use crate::error::{CliError, CliResult};

pub const REQUIRED: [&str; 14] = [
    "num_layers",
    "num_heads",
    "hidden_dim",
    "ffn_dim",
    "max_positions",
    "init_std",
    "learning_rate",
    "warmup_proportion",
    "batch_size",
    "epochs",
    "seed",
    "reuse",
    "clip_norm",
    "max_value_len",
];

pub const OPTIONAL: [&str; 2] = ["layer_norm_eps", "target_train_jga"];

/// Parsed settings in file order-independent form.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub entries: BTreeMap<String, String>,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !REQUIRED.contains(&key) && !OPTIONAL.contains(&key) {
                return Err(CliError::usage(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::usage(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
        }
        for key in REQUIRED {
            if !entries.contains_key(key) {
                return Err(CliError::usage(format!("config is missing key {key:?}")));
            }
        }
        let train = build(&entries)?;
        Ok(RunConfig { entries, train })
    }

    /// Canonical text form, one `key = value` per line in key order.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn get<T: std::str::FromStr>(entries: &BTreeMap<String, String>, key: &str) -> CliResult<T> {
    let raw = &entries[key];
    raw.parse()
        .map_err(|_| CliError::usage(format!("config key {key:?}: cannot parse {raw:?}")))
}

fn get_opt(entries: &BTreeMap<String, String>, key: &str) -> CliResult<Option<f64>> {
    match entries.get(key).map(String::as_str) {
        None | Some("none") => Ok(None),
        Some(_) => get(entries, key).map(Some),
    }
}

fn build(e: &BTreeMap<String, String>) -> CliResult<TrainConfig> {
    let model = ModelConfig {
        num_layers: get(e, "num_layers")?,
        num_heads: get(e, "num_heads")?,
        hidden_dim: get(e, "hidden_dim")?,
        ffn_dim: get(e, "ffn_dim")?,
        // filled in from the vocabulary at run time
        vocab_size: 0,
        max_positions: get(e, "max_positions")?,
        init_std: get(e, "init_std")?,
        layer_norm_eps: match e.get("layer_norm_eps") {
            Some(_) => get(e, "layer_norm_eps")?,
            None => 1e-12,
        },
    };
    let reuse: ReuseSpec = e["reuse"]
        .parse()
        .map_err(|err| CliError::usage(format!("config key \"reuse\": {err}")))?;
    let config = TrainConfig {
        model,
        learning_rate: get(e, "learning_rate")?,
        warmup_proportion: get(e, "warmup_proportion")?,
        batch_size: get(e, "batch_size")?,
        epochs: get(e, "epochs")?,
        seed: get(e, "seed")?,
        reuse,
        clip_norm: get_opt(e, "clip_norm")?,
        max_value_len: get(e, "max_value_len")?,
        target_train_jga: get_opt(e, "target_train_jga")?,
    };
    let mut check = config.clone();
    check.model.vocab_size = 1;
    check.validate().map_err(|err| CliError::usage(err.to_string()))?;
    Ok(config)
}
