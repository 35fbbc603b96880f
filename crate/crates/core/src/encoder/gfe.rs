use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{attention, Builder, Conv2d, LayerNorm};
use crate::numerics::{ConvSpec, Graph, Var};

/// Global feature enhancer: `Norm(MHSA(F) + F)` over spatial tokens, with no positional
/// encoding and no feed-forward sublayer. Scores are scaled by `1/sqrt(head_dim)`.
#[derive(Clone, Debug)]
pub struct GlobalEnhancer {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub norm: LayerNorm,
    pub heads: usize,
}

impl GlobalEnhancer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide {channels} channels"
            )));
        }
        Ok(GlobalEnhancer {
            q: b.conv("q", channels, channels, ConvSpec::pointwise(), true)?,
            k: b.conv("k", channels, channels, ConvSpec::pointwise(), true)?,
            v: b.conv("v", channels, channels, ConvSpec::pointwise(), true)?,
            norm: b.norm("norm", channels)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let c = g.shape(f)[3];
        if c % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} attention heads do not divide {c} channels",
                self.heads
            )));
        }
        let q = self.q.forward(g, f)?;
        let k = self.k.forward(g, f)?;
        let v = self.v.forward(g, f)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let att = attention(g, q, k, v, self.heads, scale)?;
        let res = g.add(att, f)?;
        self.norm.forward(g, res)
    }
}
