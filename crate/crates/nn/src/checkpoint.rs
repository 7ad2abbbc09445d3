//! Model checkpoints in the `DPSG` container: one array per parameter plus a
//! JSON header with everything needed to rebuild and apply the model.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stormtail_core::container::{Container, NamedArray};
use stormtail_core::data::NormalizationStats;
use stormtail_core::grid::ThresholdSchema;
use stormtail_core::losses::{ClassStats, LossConfig};
use stormtail_core::{Error, Result};

use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::variant::Variant;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: String,
    pub variant: Variant,
    pub seed: u64,
    pub epoch: usize,
    pub model: ModelConfig,
    pub normalization: NormalizationStats,
    pub schema: ThresholdSchema,
    pub class_stats: ClassStats,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(serde_json::to_value(&self.meta)?);
        for id in self.model.params.ids() {
            let t = self.model.params.get(id);
            c.push(NamedArray::from_f64(self.model.params.name(id), t.shape().to_vec(), t.data()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
        if meta.kind != "checkpoint" {
            return Err(Error::Config(format!("expected a checkpoint, found {:?}", meta.kind)));
        }
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion(meta.schema_version));
        }
        // Rebuild to learn the expected names and shapes, then overwrite.
        let template = Model::new(meta.model.clone(), meta.seed)?;
        let mut params = ParamStore::new();
        for id in template.params.ids() {
            let name = template.params.name(id);
            let want = template.params.get(id).shape();
            let a = c
                .array(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if a.shape != want {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {want:?}"),
                    actual: format!("{:?}", a.shape),
                });
            }
            params.add(name, Tensor::new(a.shape.clone(), a.to_f64()));
        }
        if c.arrays.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} arrays, model expects {}",
                c.arrays.len(),
                params.len()
            )));
        }
        Ok(Self {
            model: Model::from_params(meta.model.clone(), params)?,
            meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Config stored in a checkpoint, for callers that want to check
/// compatibility before loading parameters.
pub fn peek_model_config(path: &Path) -> Result<ModelConfig> {
    let c = Container::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta)?;
    Ok(meta.model)
}
