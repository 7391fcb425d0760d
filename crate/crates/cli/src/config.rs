//! Run configuration: one JSON object with flat dotted keys, layered as
//! built-in defaults < config file < `AMLM_SEED` < `--set` flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use automlm_core::corpus::{Pairing, DEFAULT_MAX_PAIRS};
use automlm_core::model::ModelConfig;
use automlm_core::tokenizer::{DEFAULT_MAX_VOCAB, DEFAULT_MIN_FREQ};
use automlm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::failure::Failure;

pub const SEED_ENV: &str = "AMLM_SEED";

/// Keys filled in from other settings rather than configured directly.
const DERIVED_KEYS: [&str; 3] = ["model.vocab_size", "model.seed", "train.seed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub sessions: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub knowledge: Option<PathBuf>,
    pub testset: Option<PathBuf>,
    pub max_pairs: usize,
    pub pairing: Pairing,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            sessions: None,
            pairs: None,
            vocab: None,
            knowledge: None,
            testset: None,
            max_pairs: DEFAULT_MAX_PAIRS,
            pairing: Pairing::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: DEFAULT_MAX_VOCAB,
            min_freq: DEFAULT_MIN_FREQ,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: VocabConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

fn flatten_into(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys never nest under a leaf");
            }
        }
    }
    Value::Object(root)
}

/// Every configurable key with its default value.
pub fn default_keys() -> BTreeMap<String, Value> {
    let mut flat = BTreeMap::new();
    let value = serde_json::to_value(RunConfig::default()).expect("config serializes");
    flatten_into("", &value, &mut flat);
    for k in DERIVED_KEYS {
        flat.remove(k);
    }
    flat
}

/// Parses `key=value`; the value is read as JSON, falling back to a plain
/// string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let Some((key, value)) = raw.split_once('=') else {
        return Err(Failure::usage(format!("override `{raw}` is not of the form key=value")).into());
    };
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

fn apply(flat: &mut BTreeMap<String, Value>, key: &str, value: Value, origin: &str) -> Result<()> {
    match flat.get_mut(key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Failure::config(format!("unknown config key `{key}` ({origin})")).into()),
    }
}

impl RunConfig {
    /// Layers the config file, the seed variable and flag overrides on top of
    /// the defaults.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
        let mut flat = default_keys();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            let parsed: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::parse(format!("{}:{}: {e}", path.display(), e.line())))?;
            let Value::Object(map) = parsed else {
                bail!(Failure::config(format!("{}: config must be a JSON object", path.display())));
            };
            for (key, value) in map {
                apply(&mut flat, &key, value, &path.display().to_string())?;
            }
        }
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Failure::config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            flat.insert("seed".into(), Value::from(seed));
        }
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            apply(&mut flat, &key, value, "--set")?;
        }
        let mut config: RunConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Failure::config(format!("{e}")))
            .context("resolving configuration")?;
        config.model.seed = config.seed;
        config.train.seed = config.seed;
        config.train.validate()?;
        Ok(config)
    }

    /// The effective configuration in flat form.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut flat);
        for k in DERIVED_KEYS {
            flat.remove(k);
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use automlm_core::objectives::ObjectiveMode;

    #[test]
    fn defaults_round_trip_through_flat_keys() {
        let flat = default_keys();
        assert_eq!(flat["train.lambda"], Value::from(1.0));
        assert_eq!(flat["train.margin"], Value::from(0.1));
        assert_eq!(flat["train.masking.mask_prob"], Value::from(0.15));
        assert_eq!(flat["model.n_layers"], Value::from(4));
        assert!(!flat.contains_key("model.vocab_size"));
        let back: RunConfig = serde_json::from_value(unflatten(&flat)).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    #[test]
    fn precedence_is_flag_then_env_then_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train.lambda": 0.5, "seed": 3, "train.mode": "cl", "model.n_layers": 2}"#).unwrap();

        let file_only = RunConfig::resolve(Some(&path), None, &[]).unwrap();
        assert_eq!(file_only.train.objective.lambda, 0.5);
        assert_eq!(file_only.train.objective.mode, ObjectiveMode::Cl);
        assert_eq!((file_only.seed, file_only.model.seed, file_only.train.seed), (3, 3, 3));
        assert_eq!(file_only.train.batch_size, 128);

        let env = RunConfig::resolve(Some(&path), Some("7"), &[]).unwrap();
        assert_eq!(env.seed, 7);

        let flags = RunConfig::resolve(
            Some(&path),
            Some("7"),
            &["seed=9".into(), "train.lambda=2".into(), "data.sessions=/tmp/s.jsonl".into()],
        )
        .unwrap();
        assert_eq!(flags.seed, 9);
        assert_eq!(flags.train.seed, 9);
        assert_eq!(flags.train.objective.lambda, 2.0);
        assert_eq!(flags.model.n_layers, 2);
        assert_eq!(flags.data.sessions.as_deref(), Some(Path::new("/tmp/s.jsonl")));
    }

    #[test]
    fn rejects_bad_keys_and_values() {
        assert!(RunConfig::resolve(None, None, &["train.lamda=1".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["model.vocab_size=10".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["train.lambda=-1".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["train.batch_size=abc".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["novalue".into()]).is_err());
        assert!(RunConfig::resolve(None, Some("x"), &[]).is_err());
    }
}
