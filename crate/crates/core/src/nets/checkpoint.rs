use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ParamGroup};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "taftseg-checkpoint-1";

/// JSON container of a trained model. Reference vectors are stored apart
/// from the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    /// Scene source fingerprint the model was trained on.
    pub source: String,
    pub split: usize,
    pub model: ModelConfig,
    pub aux_channels: usize,
    pub params: BTreeMap<String, Tensor>,
    pub references: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config_hash: &str, source: &str, split: usize) -> Self {
        let mut params = BTreeMap::new();
        let mut references = BTreeMap::new();
        for p in model.params() {
            let slot = if p.group == ParamGroup::References {
                &mut references
            } else {
                &mut params
            };
            slot.insert(p.name.clone(), p.value.clone());
        }
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            source: source.to_string(),
            split,
            model: model.config().clone(),
            aux_channels: model.aux_channels(),
            params,
            references,
        }
    }

    /// Rebuilds the model; every tensor must be present with the expected shape.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {:?}", self.format)));
        }
        let mut model = Model::new(&self.model, self.aux_channels, 0)?;
        let mut seen = 0;
        for p in model.params_mut() {
            let store = if p.group == ParamGroup::References {
                &self.references
            } else {
                &self.params
            };
            let value = store
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
            seen += 1;
        }
        let stored = self.params.len() + self.references.len();
        if stored != seen {
            let known: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
            let extra = self
                .params
                .keys()
                .chain(self.references.keys())
                .find(|k| !known.contains(&k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let m = Model::new(&ModelConfig::default(), 10, 11).unwrap();
        let ck = Checkpoint::from_model(&m, "abc", "shapes:x", 0);
        assert!(ck.references.contains_key("refs.fg"));
        assert!(!ck.params.contains_key("refs.fg"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn shape_mismatch_fails() {
        let m = Model::new(&ModelConfig::default(), 10, 11).unwrap();
        let mut ck = Checkpoint::from_model(&m, "abc", "shapes:x", 0);
        ck.references.insert("refs.fg".into(), Tensor::zeros(&[3]));
        let err = ck.to_model().unwrap_err().to_string();
        assert!(err.contains("refs.fg"), "{err}");
    }

    #[test]
    fn extra_tensor_fails() {
        let m = Model::new(&ModelConfig::default(), 10, 11).unwrap();
        let mut ck = Checkpoint::from_model(&m, "abc", "shapes:x", 0);
        ck.params.insert("stray".into(), Tensor::zeros(&[1]));
        assert!(ck.to_model().unwrap_err().to_string().contains("stray"));
    }
}
