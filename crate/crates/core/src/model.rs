use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{argmax, Decoder};
use crate::encoder::{replicate_x_channels, BackboneKind, DecoupledFeatures, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::numerics::{Graph, ParamGroup, ParamStore, Tensor4, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub backbone: BackboneKind,
    pub fusion: FusionConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            backbone: BackboneKind::ConvNext,
            fusion: FusionConfig::default(),
            num_classes: 3,
        }
    }
}

/// Complete RGB-X segmentation network together with its parameters.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl Segmenter {
    /// Builds the network with parameters initialized from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config.encoder)?;
        let fusion = Fusion::new(&mut params, &mut rng, config.encoder.channels, config.fusion)?;
        let decoder = Decoder::new(&mut params, &mut rng, config.encoder.channels, config.num_classes)?;
        Ok(Segmenter {
            config: config.clone(),
            params,
            encoder,
            fusion,
            decoder,
        })
    }

    /// Encoder + fusion + decoder on graph inputs `rgb` and `x`, both `(B, H, W, 3)`.
    pub fn forward(&self, g: &mut Graph<'_>, rgb: Var, x: Var) -> Result<Var> {
        let dec: DecoupledFeatures = self.encoder.forward(g, rgb, x)?;
        let fused = self.fusion.forward(g, &dec)?;
        self.decoder.forward(g, &fused)
    }

    /// Logits for raw tensors; a one-channel `x` is replicated first.
    pub fn logits(&self, rgb: &Tensor4, x: &Tensor4) -> Result<Tensor4> {
        let x = replicate_x_channels(x)?;
        let mut g = Graph::inference(&self.params);
        let r = g.input(rgb.clone());
        let xv = g.input(x);
        let out = self.forward(&mut g, r, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, rgb: &Tensor4, x: &Tensor4) -> Result<Vec<u8>> {
        Ok(argmax(&self.logits(rgb, x)?))
    }

    /// Trainable parameter count, optionally for one group.
    pub fn count_parameters(&self, group: Option<ParamGroup>) -> usize {
        self.params.count(group)
    }

    /// Overwrites parameters from another network with identical structure.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: {} vs {}",
                other.len(),
                self.params.len()
            )));
        }
        for (id, p) in other.iter() {
            let mine = self.params.get_mut(id);
            if mine.name != p.name || mine.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter `{}` does not match", p.name)));
            }
            mine.value = p.value.clone();
        }
        Ok(())
    }
}
