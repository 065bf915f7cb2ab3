//! JSON checkpoints: configuration plus named parameter tensors in
//! canonical order. Floats are written with shortest round-trip formatting,
//! so a save/load cycle is exact and equal models give equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::WindowSpec;
use crate::grad::Tensor;
use crate::model::{Model, ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error("parameter {index}: expected {expected}, found {found}")]
    Layout { index: usize, expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    /// Windowing used to build the training instances.
    pub window: Option<WindowSpec>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, window: Option<&WindowSpec>) -> Self {
        let layout = ModelParams::layout(&model.config);
        let params = layout
            .iter()
            .zip(model.params.tensors())
            .map(|(slot, t)| NamedTensor { name: slot.name.clone(), shape: t.shape(), data: t.data().to_vec() })
            .collect();
        Self { version: CHECKPOINT_VERSION, config: model.config.clone(), window: window.cloned(), params }
    }

    /// Rebuilds the model, checking names and shapes against the layout
    /// implied by the stored configuration.
    pub fn to_model(&self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(self.version));
        }
        self.config.validate()?;
        let layout = ModelParams::layout(&self.config);
        if layout.len() != self.params.len() {
            return Err(CheckpointError::Layout {
                index: layout.len().min(self.params.len()),
                expected: format!("{} tensors", layout.len()),
                found: format!("{} tensors", self.params.len()),
            });
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for (index, (slot, p)) in layout.iter().zip(&self.params).enumerate() {
            if slot.name != p.name || slot.shape != p.shape {
                return Err(CheckpointError::Layout {
                    index,
                    expected: format!("{} {:?}", slot.name, slot.shape),
                    found: format!("{} {:?}", p.name, p.shape),
                });
            }
            let t = Tensor::new(p.shape[0], p.shape[1], p.data.clone()).map_err(|e| CheckpointError::Layout {
                index,
                expected: format!("{:?}", p.shape),
                found: e.to_string(),
            })?;
            tensors.push(t);
        }
        Ok(Model::from_parts(self.config.clone(), ModelParams::from_tensors(&self.config, tensors)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: p.clone(), source })?;
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json { path: p, source })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::DistKind;

    fn model() -> Model {
        let mut cfg = ModelConfig::new(vec![3, 2], 4, 5, DistKind::LogNormal, 9);
        cfg.head_hidden = vec![4];
        Model::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let ck = Checkpoint::from_model(&m, Some(&WindowSpec::new(4)));
        let back: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.to_json(), ck.to_json());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = model();
        Checkpoint::from_model(&m, None).save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap().to_model().unwrap(), m);
    }

    #[test]
    fn rejects_mismatched_layout() {
        let mut ck = Checkpoint::from_model(&model(), None);
        ck.params.swap(0, 1);
        assert!(matches!(ck.to_model(), Err(CheckpointError::Layout { index: 0, .. })));
        let mut ck = Checkpoint::from_model(&model(), None);
        ck.params.pop();
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&model(), None);
        ck.version = 7;
        assert!(matches!(ck.to_model(), Err(CheckpointError::Version(7))));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(Checkpoint::from_model(&model(), None)).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<Checkpoint>(v).is_err());
    }
}
