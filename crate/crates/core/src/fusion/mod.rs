//! Multi-scale heterogeneous feature fusion.
//!
//! Each of the four stages is fused independently by a dual-branch block: a global
//! branch (cross-attention recalibration, GFRM) over the global pyramids and a local
//! branch (convolutional fusion, LFFM) over the local pyramids, merged by a spatial
//! integration module (FEIM). Flags swap in ablation variants per branch.

mod feim;
mod gfrm;
mod legacy;
mod lffm;

use rand::Rng;

pub use feim::{AxisConv, FeatureIntegration};
pub use gfrm::GlobalRecalibration;
pub use legacy::{ChannelRecalibration, ConcatAttentionFusion};
pub use lffm::LocalFusion;

use crate::encoder::{DecoupledFeatures, Pyramid};
use crate::error::{Error, Result};
use crate::numerics::layers::Builder;
use crate::numerics::{Graph, ParamGroup, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalFusion {
    Gfrm,
    /// Concat + self-attention stand-in.
    Hffm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalFusionKind {
    Lffm,
    /// Channel duplication instead of the learned expansion.
    LffmDup,
    /// No local branch; local features are folded into the global inputs.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    Feim,
    /// Row and column descriptors processed by separate convs.
    FeimNonInteract,
    /// Channel-attention-only stand-in.
    Ffrm,
}

fn bad_value(key: &str, value: &str, valid: &[&str]) -> Error {
    Error::Config(format!(
        "{key}: unknown value `{value}` (valid: {})",
        valid.join(", ")
    ))
}

impl GlobalFusion {
    pub const VALUES: [&'static str; 2] = ["gfrm", "hffm"];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gfrm" => Ok(Self::Gfrm),
            "hffm" => Ok(Self::Hffm),
            _ => Err(bad_value("fusion.global", s, &Self::VALUES)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Gfrm => "gfrm",
            Self::Hffm => "hffm",
        }
    }
}

impl LocalFusionKind {
    pub const VALUES: [&'static str; 3] = ["lffm", "lffm_dup", "none"];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lffm" => Ok(Self::Lffm),
            "lffm_dup" => Ok(Self::LffmDup),
            "none" => Ok(Self::None),
            _ => Err(bad_value("fusion.local", s, &Self::VALUES)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lffm => "lffm",
            Self::LffmDup => "lffm_dup",
            Self::None => "none",
        }
    }
}

impl Integration {
    pub const VALUES: [&'static str; 3] = ["feim", "feim_noninteract", "ffrm"];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feim" => Ok(Self::Feim),
            "feim_noninteract" => Ok(Self::FeimNonInteract),
            "ffrm" => Ok(Self::Ffrm),
            _ => Err(bad_value("fusion.integrate", s, &Self::VALUES)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Feim => "feim",
            Self::FeimNonInteract => "feim_noninteract",
            Self::Ffrm => "ffrm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub global: GlobalFusion,
    pub local: LocalFusionKind,
    pub integrate: Integration,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            global: GlobalFusion::Gfrm,
            local: LocalFusionKind::Lffm,
            integrate: Integration::Feim,
        }
    }
}

impl FusionConfig {
    /// Human-readable row label, e.g. `GFRM + LFFM + FEIM`; ★ marks the duplication variant, ☆ the
    /// non-interacting integration.
    pub fn label(&self) -> String {
        let mut parts = vec![match self.global {
            GlobalFusion::Gfrm => "GFRM",
            GlobalFusion::Hffm => "HFFM",
        }];
        match self.local {
            LocalFusionKind::Lffm => parts.push("LFFM"),
            LocalFusionKind::LffmDup => parts.push("LFFM★"),
            LocalFusionKind::None => {}
        }
        parts.push(match self.integrate {
            Integration::Feim => "FEIM",
            Integration::FeimNonInteract => "FEIM☆",
            Integration::Ffrm => "FFRM",
        });
        parts.join(" + ")
    }
}

#[derive(Clone, Debug)]
pub enum GlobalBranch {
    Gfrm(GlobalRecalibration),
    Hffm(ConcatAttentionFusion),
}

#[derive(Clone, Debug)]
pub enum IntegrateBranch {
    Feim(FeatureIntegration),
    Ffrm(ChannelRecalibration),
}

/// Fusion block for one pyramid stage.
#[derive(Clone, Debug)]
pub struct FusionStage {
    pub global: GlobalBranch,
    pub local: Option<LocalFusion>,
    pub integrate: IntegrateBranch,
}

impl FusionStage {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize, cfg: &FusionConfig) -> Result<Self> {
        let global = match cfg.global {
            GlobalFusion::Gfrm => GlobalBranch::Gfrm(GlobalRecalibration::new(&mut b.scope("gfrm"), c)?),
            GlobalFusion::Hffm => GlobalBranch::Hffm(ConcatAttentionFusion::new(&mut b.scope("hffm"), c)?),
        };
        let local = match cfg.local {
            LocalFusionKind::Lffm => Some(LocalFusion::new(&mut b.scope("lffm"), c, false)?),
            LocalFusionKind::LffmDup => Some(LocalFusion::new(&mut b.scope("lffm"), c, true)?),
            LocalFusionKind::None => None,
        };
        let integrate = match cfg.integrate {
            Integration::Feim => IntegrateBranch::Feim(FeatureIntegration::new(&mut b.scope("feim"), c, true)?),
            Integration::FeimNonInteract => {
                IntegrateBranch::Feim(FeatureIntegration::new(&mut b.scope("feim"), c, false)?)
            }
            Integration::Ffrm => IntegrateBranch::Ffrm(ChannelRecalibration::new(&mut b.scope("ffrm"), c)?),
        };
        Ok(FusionStage {
            global,
            local,
            integrate,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, gr: Var, gx: Var, lr: Var, lx: Var) -> Result<Var> {
        let (gr, gx) = if self.local.is_none() {
            (g.add(gr, lr)?, g.add(gx, lx)?)
        } else {
            (gr, gx)
        };
        let fg = match &self.global {
            GlobalBranch::Gfrm(m) => m.forward(g, gr, gx)?,
            GlobalBranch::Hffm(m) => m.forward(g, gr, gx)?,
        };
        let fl = match &self.local {
            Some(m) => Some(m.forward(g, lr, lx)?),
            None => None,
        };
        match &self.integrate {
            IntegrateBranch::Feim(m) => m.forward(g, fg, fl),
            IntegrateBranch::Ffrm(m) => m.forward(g, fg, fl),
        }
    }
}

/// The four per-stage fusion blocks.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub stages: Vec<FusionStage>,
}

impl Fusion {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: [usize; 4], config: FusionConfig) -> Result<Self> {
        let mut b = Builder::new(store, rng, ParamGroup::Fusion, "fusion");
        let stages = (0..4)
            .map(|i| FusionStage::new(&mut b.scope(format!("stage{}", i + 1)), channels[i], &config))
            .collect::<Result<_>>()?;
        Ok(Fusion { config, stages })
    }

    pub fn forward(&self, g: &mut Graph<'_>, dec: &DecoupledFeatures) -> Result<Pyramid> {
        let mut out = dec.global_rgb.0;
        for (i, stage) in self.stages.iter().enumerate() {
            out[i] = stage.forward(
                g,
                dec.global_rgb.0[i],
                dec.global_x.0[i],
                dec.local_rgb.0[i],
                dec.local_x.0[i],
            )?;
        }
        Ok(Pyramid(out))
    }
}
