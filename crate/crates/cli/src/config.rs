use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use taftseg::config::content_hash;
use taftseg::{EvalConfig, ExperimentConfig, ModelConfig, TrainConfig, WorldConfig};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { count: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Add the low-level transform row.
    pub low_level: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { low_level: true }
    }
}

/// Everything a command may need, read from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            world: self.world.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    /// Short hash of the training configuration and the code version.
    pub fn run_id(&self) -> String {
        content_hash(&(self.experiment(), env!("CARGO_PKG_VERSION")))[..12].to_string()
    }

    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os("TAFTSEG_OUT") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(self.run_id())
    }
}

fn config_error(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Sets `path` (dot separated) in `root`; the value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(config_error(assignment, "empty override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(key, format!("{} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Reads, overrides, deserializes and validates the configuration.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut root = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| config_error("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_error("config", format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({ "schema_version": SCHEMA_VERSION }),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { "config".to_string() } else { path };
        config_error(&key, e.into_inner().to_string())
    })?;
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(config_error(
            "schema_version",
            format!(
                "unsupported schema version {}, expected {SCHEMA_VERSION}",
                cfg.schema_version
            ),
        ));
    }
    cfg.experiment().validate().map_err(CliError::from)?;
    cfg.eval.validate().map_err(CliError::from)?;
    if cfg.generate.count == 0 {
        return Err(config_error("generate.count", "must be positive"));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse() {
        let mut v = serde_json::json!({"schema_version": 1});
        apply_override(&mut v, "train.seed=7").unwrap();
        apply_override(&mut v, "eval.scales=[0.7,1.0]").unwrap();
        apply_override(&mut v, "output_dir=runs").unwrap();
        assert_eq!(v["train"]["seed"], 7);
        assert_eq!(v["eval"]["scales"][1], 1.0);
        assert_eq!(v["output_dir"], "runs");
        assert!(apply_override(&mut v, "novalue").is_err());
    }

    #[test]
    fn unknown_key_is_reported_with_path() {
        let err = load(None, &["train.bogus=1".into()]).unwrap_err();
        match err {
            CliError::Config { key, .. } => assert!(key.starts_with("train"), "{key}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_names_key() {
        let err = load(None, &["train.decay_point=5000".into()]).unwrap_err();
        match err {
            CliError::Config { key, .. } => assert_eq!(key, "train.decay_point"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn run_id_tracks_seed() {
        let a = load(None, &[]).unwrap();
        let b = load(None, &["train.seed=7".into()]).unwrap();
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id(), load(None, &["eval.episodes=5".into()]).unwrap().run_id());
    }
}
