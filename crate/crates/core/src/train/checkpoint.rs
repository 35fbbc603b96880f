use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamState;
use super::trainer::EpochRecord;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::numerics::{ParamStore, Tensor4};

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

/// Everything needed to resume training or rebuild the model for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub config_hash: String,
    pub params: Vec<StoredParam>,
    pub optimizer: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Trainer RNG as of the end of `epoch`.
    pub rng: ChaCha8Rng,
    pub curves: Vec<EpochRecord>,
    pub best_miou: Option<f64>,
}

impl Checkpoint {
    pub fn capture(
        cfg: &TrainConfig,
        params: &ParamStore,
        optimizer: &AdamState,
        epoch: usize,
        rng: &ChaCha8Rng,
        curves: &[EpochRecord],
        best_miou: Option<f64>,
    ) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config_text: cfg.render(),
            config_hash: cfg.hash(),
            params: params
                .iter()
                .map(|(_, p)| StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            optimizer: optimizer.clone(),
            epoch,
            rng: rng.clone(),
            curves: curves.to_vec(),
            best_miou,
        }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config_text)
    }

    /// Parameters as a store laid out like `template`'s.
    pub fn param_store(&self, template: &ParamStore) -> Result<ParamStore> {
        if self.params.len() != template.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model {}",
                self.params.len(),
                template.len()
            )));
        }
        let mut store = template.clone();
        for (id, sp) in template.ids().zip(&self.params) {
            let p = store.get_mut(id);
            if p.name != sp.name || p.value.shape() != sp.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match stored `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    sp.name,
                    sp.shape
                )));
            }
            p.value = Tensor4::from_vec(sp.shape, sp.data.clone())?;
        }
        Ok(store)
    }

    /// Rebuilds the model described by the stored config with the stored weights.
    pub fn model(&self) -> Result<Segmenter> {
        let cfg = self.config()?;
        let mut model = Segmenter::new(&cfg.model, cfg.seed)?;
        let store = self.param_store(&model.params)?;
        model.load_params(&store)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = bincode::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
