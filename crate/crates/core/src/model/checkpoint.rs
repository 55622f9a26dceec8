use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GarnnModel, ModelConfig};
use crate::autodiff::{ParamSet, Tensor};
use crate::data::Normalizer;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "garnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Text checkpoint: parameter path → shape and flat values.
///
/// Values are written as shortest round-trip decimals and parsed with
/// exact float conversion, so save → load is bit-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
    /// Window shape the model was trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windowing: Option<Windowing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub params: BTreeMap<String, StoredTensor>,
}

/// History length `T` and horizon `H`, in samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windowing {
    pub history: usize,
    pub horizon: usize,
}

impl Checkpoint {
    pub fn from_model(model: &GarnnModel, normalizer: Option<Normalizer>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            normalizer,
            windowing: None,
            seed: None,
            params,
        }
    }

    pub fn to_model(&self) -> Result<GarnnModel> {
        let mut params = ParamSet::new();
        for (name, st) in &self.params {
            params.insert(name.clone(), Tensor::new(st.shape.clone(), st.values.clone())?);
        }
        GarnnModel::from_params(self.config.clone(), params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
