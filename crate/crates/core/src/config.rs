//! Run configuration: one JSON document layered over the defaults, then
//! dotted-key overrides.
//!
//! The document holds the pipeline settings at top level plus two optional
//! keys, `run_dir` and `corpus` (toy corpus settings). A pipeline's own
//! `config.json` is therefore a valid input.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::PipelineConfig;
use crate::corpus::toy::ToyCorpusConfig;
use crate::error::{Error, Result};

pub const RUN_DIR_KEY: &str = "run_dir";
pub const CORPUS_KEY: &str = "corpus";
pub const DEFAULT_RUN_DIR: &str = "run";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub corpus: ToyCorpusConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: DEFAULT_RUN_DIR.into(),
            corpus: ToyCorpusConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// The flat document form.
    pub fn to_document(&self) -> Result<Value> {
        let mut doc = to_value(&self.pipeline)?;
        let obj = doc.as_object_mut().expect("pipeline config is an object");
        obj.insert(RUN_DIR_KEY.into(), to_value(&self.run_dir)?);
        obj.insert(CORPUS_KEY.into(), to_value(&self.corpus)?);
        Ok(doc)
    }

    pub fn from_document(mut doc: Value) -> Result<Self> {
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let run_dir = obj.remove(RUN_DIR_KEY).unwrap_or_else(|| Value::String(DEFAULT_RUN_DIR.into()));
        let corpus = obj.remove(CORPUS_KEY).unwrap_or(Value::Null);
        let bad = |what: &str, e: serde_json::Error| Error::Config(format!("{what}: {e}"));
        Ok(Self {
            run_dir: serde_json::from_value(run_dir).map_err(|e| bad(RUN_DIR_KEY, e))?,
            corpus: if corpus.is_null() {
                ToyCorpusConfig::default()
            } else {
                serde_json::from_value(corpus).map_err(|e| bad(CORPUS_KEY, e))?
            },
            pipeline: serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?,
        })
    }

    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut doc = Self::default().to_document()?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            merge(&mut doc, patch, "")?;
        }
        for (key, value) in overrides {
            set_dotted(&mut doc, key, value.clone())?;
        }
        let config = Self::from_document(doc)?;
        config.pipeline.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document()?).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn join_key(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key; every
/// other value replaces. Keys absent from a base object are rejected, except
/// below a null (an unset optional value), which the patch replaces whole.
pub fn merge(base: &mut Value, patch: Value, prefix: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = join_key(prefix, &k);
                let slot = b.get_mut(&k).ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
                merge(slot, v, &key)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Sets `a.b.c` to `value`; every segment must name an existing key.
pub fn set_dotted(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut slot = doc;
    for (i, part) in key.split('.').enumerate() {
        if slot.is_null() {
            *slot = Value::Object(Map::new());
        }
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: segment {i} is not an object")))?;
        if !obj.contains_key(part) && !obj.is_empty() {
            return Err(Error::Config(format!("unknown key {key}")));
        }
        slot = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    *slot = value;
    Ok(())
}

/// Parses `key=value`; the value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not KEY=VALUE")))?;
    if key.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Variant;
    use serde_json::json;

    #[test]
    fn defaults_round_trip_through_document() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_document(c.to_document().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), c);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 7, "asr_train": {"epochs": 3}, "corpus": {"paired": 12}}"#).unwrap();
        let overrides = vec![
            parse_override("seed=9").unwrap(),
            parse_override("variant=baseline").unwrap(),
            parse_override("lm_weight=0.25").unwrap(),
            parse_override("run_dir=out/x").unwrap(),
        ];
        let c = RunConfig::resolve(Some(&path), &overrides).unwrap();
        assert_eq!(c.pipeline.seed, 9);
        assert_eq!(c.pipeline.asr_train.epochs, 3);
        assert_eq!(c.pipeline.asr_train.batch_size, PipelineConfig::default().asr_train.batch_size);
        assert_eq!(c.pipeline.variant, Variant::Baseline);
        assert_eq!(c.pipeline.lm_weight, Some(0.25));
        assert_eq!(c.corpus.paired, 12);
        assert_eq!(c.run_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut doc = RunConfig::default().to_document().unwrap();
        assert!(set_dotted(&mut doc, "asr_train.epoch", json!(1)).is_err());
        assert!(merge(&mut doc, json!({"nope": 1}), "").is_err());
        assert!(set_dotted(&mut doc, "seed.x", json!(1)).is_err());
        assert!(parse_override("seed").is_err());
        assert!(RunConfig::resolve(None, &[parse_override("variant=nonsense").unwrap()]).is_err());
        assert!(RunConfig::resolve(None, &[parse_override("jobs=0").unwrap()]).is_err());
    }

    #[test]
    fn pipeline_config_file_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        let p = PipelineConfig {
            seed: 4,
            ..Default::default()
        };
        std::fs::write(&path, serde_json::to_string(&p).unwrap()).unwrap();
        let c = RunConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(c.pipeline, p);
        c.save(&dir.path().join("again.json")).unwrap();
        assert_eq!(RunConfig::resolve(Some(&dir.path().join("again.json")), &[]).unwrap(), c);
    }
}
