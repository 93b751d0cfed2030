//! Run configuration files (TOML). Unknown keys are rejected.
//!
//! ```toml
//! [model]
//! k = 30
//! n_virtual = 3
//! layers = 10
//! hidden = 128
//!
//! [train]
//! epochs = 50
//! lr = 1e-3
//! batch = 8
//! seed = 0
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blockgat::ModelConfig;
use crate::error::{Error, Result};
use crate::featurizer::FrameMode;
use crate::graph::EntityKind;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    /// Checked against the dataset header when set.
    pub entity: Option<EntityKind>,
}

/// Model settings; unset fields take the entity defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub k: Option<usize>,
    pub n_virtual: Option<usize>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub virtual_atoms: Option<usize>,
    pub dropout: Option<f64>,
    pub frame_mode: Option<FrameMode>,
    pub coord_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub device_threads: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn model_config(&self, entity: EntityKind, num_classes: usize) -> Result<ModelConfig> {
        if let Some(e) = self.task.entity {
            if e != entity {
                return Err(Error::EntityMismatch {
                    expected: e.to_string(),
                    found: entity.to_string(),
                });
            }
        }
        let m = &self.model;
        let mut c = ModelConfig::for_entity(entity, num_classes);
        c.k = m.k.unwrap_or(c.k);
        c.gat.n_virtual = m.n_virtual.unwrap_or(c.gat.n_virtual);
        c.gat.layers = m.layers.unwrap_or(c.gat.layers);
        c.gat.hidden = m.hidden.unwrap_or(c.gat.hidden);
        c.gat.virtual_atoms = m.virtual_atoms.unwrap_or(c.gat.virtual_atoms);
        c.gat.dropout = m.dropout.unwrap_or(c.gat.dropout);
        c.featurizer.frame_mode = m.frame_mode.unwrap_or(c.featurizer.frame_mode);
        c.featurizer.coord_scale = m.coord_scale.unwrap_or(c.featurizer.coord_scale);
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let d = TrainConfig::default();
        let c = TrainConfig {
            learning_rate: t.lr.unwrap_or(d.learning_rate),
            batch_size: t.batch.unwrap_or(d.batch_size),
            epochs: t.epochs.unwrap_or(d.epochs),
            seed: t.seed.unwrap_or(d.seed),
            threads: t.device_threads.unwrap_or(d.threads),
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let rc = RunConfig::default();
        let m = rc.model_config(EntityKind::Protein, 20).unwrap();
        assert_eq!((m.gat.layers, m.gat.hidden, m.k, m.gat.dropout), (10, 128, 30, 0.05));
        let t = rc.train_config().unwrap();
        assert_eq!((t.learning_rate, t.batch_size, t.epochs), (1e-3, 8, 50));
    }

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let rc = RunConfig::parse(
            "[task]\nentity = \"atomic\"\n[model]\nlayers = 2\nframe_mode = \"identity\"\n[train]\nlr = 0.01\nseed = 7\n",
        )
        .unwrap();
        let m = rc.model_config(EntityKind::Atomic, 54).unwrap();
        assert_eq!(m.gat.layers, 2);
        assert_eq!(m.featurizer.frame_mode, FrameMode::Identity);
        assert_eq!(rc.train_config().unwrap().seed, 7);
        assert!(rc.model_config(EntityKind::Rna, 4).is_err());
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("[optimizer]\n").is_err());
        assert!(RunConfig::parse("[train]\nbatch = 0\n").unwrap().train_config().is_err());
    }
}
