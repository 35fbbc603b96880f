//! Approximate stand-ins for the earlier fusion design, used only to fill the ablation
//! grid. They are not faithful reproductions of that design's internals.

use rand::Rng;

use crate::error::Result;
use crate::numerics::layers::{attention, Builder, Conv2d, LayerNorm};
use crate::numerics::{ConvSpec, Graph, Var};

/// Concatenate both modalities, reduce to `C`, one scaled self-attention with a
/// residual, layer norm.
#[derive(Clone, Debug)]
pub struct ConcatAttentionFusion {
    pub reduce: Conv2d,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub norm: LayerNorm,
}

impl ConcatAttentionFusion {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize) -> Result<Self> {
        let pw = ConvSpec::pointwise();
        Ok(ConcatAttentionFusion {
            reduce: b.conv("reduce", 2 * c, c, pw, true)?,
            q: b.conv("q", c, c, pw, true)?,
            k: b.conv("k", c, c, pw, true)?,
            v: b.conv("v", c, c, pw, true)?,
            norm: b.norm("norm", c)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, gr: Var, gx: Var) -> Result<Var> {
        let cat = g.concat(&[gr, gx], 3)?;
        let y = self.reduce.forward(g, cat)?;
        let c = g.shape(y)[3];
        let (q, k, v) = (self.q.forward(g, y)?, self.k.forward(g, y)?, self.v.forward(g, y)?);
        let a = attention(g, q, k, v, 1, 1.0 / (c as f64).sqrt())?;
        let r = g.add(a, y)?;
        self.norm.forward(g, r)
    }
}

/// Squeeze-and-excitation style recalibration of the summed features:
/// `F * sigmoid(Conv1x1(mean_hw(F))) + F`.
#[derive(Clone, Debug)]
pub struct ChannelRecalibration {
    pub channel: Conv2d,
}

impl ChannelRecalibration {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize) -> Result<Self> {
        Ok(ChannelRecalibration {
            channel: b.conv("channel", c, c, ConvSpec::pointwise(), true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, global: Var, local: Option<Var>) -> Result<Var> {
        let fs = match local {
            Some(l) => g.add(global, l)?,
            None => global,
        };
        let z = g.mean(fs, [false, true, true, false]);
        let gate = self.channel.forward(g, z)?;
        let gate = g.sigmoid(gate);
        let y = g.mul(fs, gate)?;
        g.add(y, fs)
    }
}
