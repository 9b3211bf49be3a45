//! JSON config files with a flat, namespaced key set. Command flags always
//! win over file values; keys outside the vocabulary are rejected.

use std::path::{Path, PathBuf};

use aesth_core::{Error, Result};
use serde_json::Value;

/// Every key any command understands. Common keys are unprefixed; the rest
/// are namespaced by command.
const VOCAB: &[&str] = &[
    "seed",
    "canvas",
    "variant",
    "out",
    "synth.count",
    "synth.themes",
    "synth.bins",
    "synth.min-size",
    "synth.max-size",
    "synth.voters",
    "train.manifest",
    "train.val-manifest",
    "train.epochs",
    "train.batch-size",
    "train.eval-every",
    "train.bins",
    "train.themes",
    "train.roi-out",
    "train.theme-width",
    "train.align",
    "train.flip-only",
    "train.lr",
    "train.momentum",
    "train.weight-decay",
    "train.head-multiplier",
    "eval.checkpoint",
    "eval.manifest",
    "eval.csv",
    "eval.unpadded",
    "predict.checkpoint",
    "predict.image",
    "predict.theme",
    "verify.scope",
    "verify.mutate",
    "ablate.manifest",
    "ablate.epochs",
    "ablate.batch-size",
    "ablate.seeds",
    "ablate.holdout",
    "ablate.bins",
    "ablate.themes",
    "ablate.roi-out",
    "ablate.theme-width",
    "ablate.size-sweep",
    "ablate.align-parity",
    "ablate.aug-contrast",
];

pub struct FileConfig {
    map: serde_json::Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let map = match path {
            None => serde_json::Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let value: Value = serde_json::from_str(&text).map_err(|e| {
                    Error::ConfigMismatch(format!("config file {}: {e}", p.display()))
                })?;
                let Value::Object(map) = value else {
                    return Err(Error::ConfigMismatch(
                        "config file must hold a JSON object".to_string(),
                    ));
                };
                for key in map.keys() {
                    if !VOCAB.contains(&key.as_str()) {
                        return Err(Error::ConfigMismatch(format!("unknown config key {key:?}")));
                    }
                }
                map
            }
        };
        Ok(FileConfig { map })
    }

    fn get(&self, key: &str) -> Option<&Value> {
        debug_assert!(VOCAB.contains(&key), "key {key} missing from vocabulary");
        self.map.get(key)
    }

    pub fn usize(&self, flag: Option<usize>, key: &str) -> Result<Option<usize>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|n| Some(n as usize))
                .ok_or_else(|| bad(key, "unsigned integer")),
        }
    }

    pub fn u64(&self, flag: Option<u64>, key: &str) -> Result<Option<u64>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| bad(key, "unsigned integer")),
        }
    }

    pub fn f64(&self, flag: Option<f64>, key: &str) -> Result<Option<f64>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| bad(key, "number")),
        }
    }

    pub fn string(&self, flag: Option<String>, key: &str) -> Result<Option<String>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_str()
                .map(|s| Some(s.to_string()))
                .ok_or_else(|| bad(key, "string")),
        }
    }

    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<Option<PathBuf>> {
        if flag.is_some() {
            return Ok(flag);
        }
        Ok(self.string(None, key)?.map(PathBuf::from))
    }

    /// Boolean switches: a set flag wins; otherwise the file value applies.
    pub fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        match self.get(key) {
            None => Ok(false),
            Some(v) => v.as_bool().ok_or_else(|| bad(key, "boolean")),
        }
    }
}

fn bad(key: &str, want: &str) -> Error {
    Error::ConfigMismatch(format!("config key {key:?} must be a {want}"))
}
