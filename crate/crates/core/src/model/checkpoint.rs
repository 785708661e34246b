use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ConditionMap, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::rng::Rng;
use crate::Tensor;

/// Adam moment buffers, aligned with the parameter order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model: versioned config, named parameter blobs, vocabulary,
/// condition label mapping, step counter and optional optimizer state.
/// JSON on disk; f64 round-tripping is exact, so a reloaded checkpoint
/// reproduces forward outputs bit-for-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub vocab_tokens: Vec<String>,
    pub condition_labels: Vec<String>,
    pub params: Vec<ParamBlob>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(
        model: &Model,
        vocab: &Vocabulary,
        conditions: &ConditionMap,
        step: u64,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        let params = model
            .params()
            .iter()
            .map(|p| ParamBlob {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: 1,
            config: model.config().clone(),
            step,
            vocab_tokens: vocab.tokens().to_vec(),
            condition_labels: conditions.labels().to_vec(),
            params,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| Error::Data(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&body)
            .map_err(|e| Error::Data(format!("checkpoint file {}: {e}", path.display())))?;
        if ckpt.format_version != 1 {
            return Err(Error::Data(format!(
                "unsupported checkpoint format version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild the model (and its companions) from the blobs. The parameter
    /// inventory must match the config-derived layout exactly.
    pub fn restore(&self) -> Result<(Model, Vocabulary, ConditionMap)> {
        if self.vocab_tokens.len() != self.config.vocab_size {
            return Err(Error::Data(format!(
                "checkpoint vocabulary has {} tokens but the config says {}",
                self.vocab_tokens.len(),
                self.config.vocab_size
            )));
        }
        let mut scratch = Rng::seed_from_u64(0);
        let mut model = Model::new(self.config.clone(), &mut scratch)?;
        if self.params.len() != model.params().len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for blob in &self.params {
            let idx = model.params().index_of(&blob.name).ok_or_else(|| {
                Error::Data(format!("checkpoint parameter {} unknown", blob.name))
            })?;
            let param = model.params_mut().get_mut(idx);
            if param.tensor.shape() != blob.shape.as_slice() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    blob.name,
                    blob.shape,
                    param.tensor.shape()
                )));
            }
            param.tensor = Tensor::new(blob.shape.clone(), blob.data.clone())?.with_grad();
        }
        let vocab = Vocabulary::from_saved_tokens(self.vocab_tokens.clone())?;
        let conditions = ConditionMap::from_labels(self.condition_labels.clone());
        Ok((model, vocab, conditions))
    }
}
