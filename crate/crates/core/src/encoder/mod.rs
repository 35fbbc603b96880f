//! Hybrid feature decoupling encoder.
//!
//! One backbone (shared by default) turns the RGB image and the replicated X map into
//! two four-stage pyramids. Each modality then gets its own global enhancer (GFE,
//! self-attention) and local extractor (LFE, inverted residual) per stage, producing
//! global and local pyramids for the fusion block.

mod backbone;
mod gfe;
mod lfe;

use rand::Rng;

pub use backbone::{stage_stride, Backbone, ConvNextBlock, MAX_STRIDE};
pub use gfe::GlobalEnhancer;
pub use lfe::LocalExtractor;

use crate::error::{Error, Result};
use crate::numerics::layers::Builder;
use crate::numerics::{Graph, ParamGroup, ParamId, Tensor4, Var};

/// Four stage tensors, stage `i` shaped `(B, H/S_i, W/S_i, C_i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pyramid(pub [Var; 4]);

impl Pyramid {
    pub fn stage(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Output of the encoder: per-modality global and local pyramids.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledFeatures {
    pub global_rgb: Pyramid,
    pub global_x: Pyramid,
    pub local_rgb: Pyramid,
    pub local_x: Pyramid,
}

/// Whether RGB and X run through one backbone or two independent copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    Shared,
    Separate,
}

impl Sharing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Sharing::Shared),
            "separate" => Ok(Sharing::Separate),
            _ => Err(Error::Config(format!(
                "backbone.sharing: unknown value `{s}` (valid: shared, separate)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sharing::Shared => "shared",
            Sharing::Separate => "separate",
        }
    }
}

/// Backbone family. Only the toy ConvNeXt-style pyramid is built; the larger families
/// are recognized so configs naming them fail with a clear message.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    ConvNext,
}

impl BackboneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convnext" => Ok(BackboneKind::ConvNext),
            "dinat" | "unireplknet" => Err(Error::Config(format!(
                "backbone.kind `{s}` is not available at desk scale (valid: convnext)"
            ))),
            _ => Err(Error::Config(format!(
                "backbone.kind: unknown value `{s}` (valid: convnext)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        "convnext"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub lfe_expansion: usize,
    pub sharing: Sharing,
    pub gfe: bool,
    pub lfe: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 128],
            depths: [1, 1, 2, 1],
            heads: [1, 2, 4, 8],
            lfe_expansion: 4,
            sharing: Sharing::Shared,
            gfe: true,
            lfe: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.channels[i] == 0 {
                return Err(Error::Config(format!("model.channels[{i}] must be > 0")));
            }
            if self.heads[i] == 0 || self.channels[i] % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "model.heads[{i}] = {} does not divide model.channels[{i}] = {}",
                    self.heads[i], self.channels[i]
                )));
            }
        }
        if self.lfe_expansion == 0 {
            return Err(Error::Config("model.lfe_expansion must be >= 1".into()));
        }
        Ok(())
    }
}

/// Replicates a single-channel X map to three channels; three-channel input passes
/// through unchanged.
pub fn replicate_x_channels(x: &Tensor4) -> Result<Tensor4> {
    let [b, h, w, c] = x.shape();
    match c {
        3 => Ok(x.clone()),
        1 => {
            let data = x.data().iter().flat_map(|&v| [v, v, v]).collect();
            Tensor4::from_vec([b, h, w, 3], data)
        }
        _ => Err(Error::Format(format!(
            "X data must have 1 or 3 channels, got {c}"
        ))),
    }
}

/// Per-modality enhancer stacks (one module per stage).
#[derive(Clone, Debug)]
pub struct ModalityEnhancers {
    pub gfe: Option<Vec<GlobalEnhancer>>,
    pub lfe: Option<Vec<LocalExtractor>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    /// Second backbone copy, present only with [`Sharing::Separate`].
    pub backbone_x: Option<Backbone>,
    pub rgb: ModalityEnhancers,
    pub x: ModalityEnhancers,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut crate::numerics::ParamStore, rng: &mut R, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let backbone = {
            let mut b = Builder::new(store, rng, ParamGroup::Backbone, "backbone");
            Backbone::new(&mut b, config.channels, config.depths)?
        };
        let backbone_x = match config.sharing {
            Sharing::Shared => None,
            Sharing::Separate => {
                let mut b = Builder::new(store, rng, ParamGroup::Backbone, "backbone_x");
                Some(Backbone::new(&mut b, config.channels, config.depths)?)
            }
        };
        let mut enhancers = |modality: &str| -> Result<ModalityEnhancers> {
            let gfe = if config.gfe {
                let mut b = Builder::new(store, rng, ParamGroup::Gfe, format!("gfe.{modality}"));
                Some(
                    (0..4)
                        .map(|i| {
                            let mut s = b.scope(format!("stage{}", i + 1));
                            GlobalEnhancer::new(&mut s, config.channels[i], config.heads[i])
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let lfe = if config.lfe {
                let mut b = Builder::new(store, rng, ParamGroup::Lfe, format!("lfe.{modality}"));
                Some(
                    (0..4)
                        .map(|i| {
                            let mut s = b.scope(format!("stage{}", i + 1));
                            LocalExtractor::new(&mut s, config.channels[i], config.lfe_expansion)
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(ModalityEnhancers { gfe, lfe })
        };
        let rgb = enhancers("rgb")?;
        let x = enhancers("x")?;
        Ok(Encoder {
            config: config.clone(),
            backbone,
            backbone_x,
            rgb,
            x,
        })
    }

    /// Backbone applied to each modality; the same parameters unless weight-separating.
    pub fn backbone_features(&self, g: &mut Graph<'_>, rgb: Var, x: Var) -> Result<(Pyramid, Pyramid)> {
        let fr = self.backbone.forward(g, rgb)?;
        let fx = self.backbone_x.as_ref().unwrap_or(&self.backbone).forward(g, x)?;
        Ok((fr, fx))
    }

    /// Parameters of the backbone that processes the X modality.
    pub fn x_backbone_params(&self) -> &[ParamId] {
        self.backbone_x.as_ref().unwrap_or(&self.backbone).params()
    }

    pub fn forward(&self, g: &mut Graph<'_>, rgb: Var, x: Var) -> Result<DecoupledFeatures> {
        for (name, v) in [("rgb", rgb), ("x", x)] {
            let c = g.shape(v)[3];
            if c != 3 {
                return Err(Error::Shape(format!(
                    "{name} input must have 3 channels after replication, got {c}"
                )));
            }
        }
        if g.shape(rgb) != g.shape(x) {
            return Err(Error::Shape(format!(
                "rgb {:?} and x {:?} differ",
                g.shape(rgb),
                g.shape(x)
            )));
        }
        let (fr, fx) = self.backbone_features(g, rgb, x)?;
        let (global_rgb, local_rgb) = decouple(g, &self.rgb, fr)?;
        let (global_x, local_x) = decouple(g, &self.x, fx)?;
        Ok(DecoupledFeatures {
            global_rgb,
            global_x,
            local_rgb,
            local_x,
        })
    }
}

/// Disabled enhancers pass the backbone features through unchanged.
fn decouple(g: &mut Graph<'_>, enh: &ModalityEnhancers, f: Pyramid) -> Result<(Pyramid, Pyramid)> {
    let mut global = f.0;
    let mut local = f.0;
    for i in 0..4 {
        if let Some(gfe) = &enh.gfe {
            global[i] = gfe[i].forward(g, f.0[i])?;
        }
        if let Some(lfe) = &enh.lfe {
            local[i] = lfe[i].forward(g, f.0[i])?;
        }
    }
    Ok((Pyramid(global), Pyramid(local)))
}
