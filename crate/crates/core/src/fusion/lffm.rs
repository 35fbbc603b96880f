use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{Builder, Conv2d};
use crate::numerics::{ConvSpec, Graph, Var};

/// Local feature fusion module.
///
/// `H = DWConv3x3(Conv1x1([L_R, L_X]))` expands `2C -> 4C`; `H` splits into halves
/// `H_M`, `H_N` of `2C` channels and the output is `Conv1x1(H_M * GELU(H_N))` with `C`
/// channels. The duplication variant drops the expanding conv and repeats the
/// concatenated input instead.
#[derive(Clone, Debug)]
pub struct LocalFusion {
    /// `None` for the duplication variant.
    pub expand: Option<Conv2d>,
    pub dw: Conv2d,
    pub out: Conv2d,
    pub channels: usize,
}

impl LocalFusion {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize, duplicate: bool) -> Result<Self> {
        let expand = if duplicate {
            None
        } else {
            Some(b.conv("expand", 2 * c, 4 * c, ConvSpec::pointwise(), true)?)
        };
        Ok(LocalFusion {
            expand,
            dw: b.conv("dw", 4 * c, 4 * c, ConvSpec::depthwise(3, 4 * c), true)?,
            out: b.conv("out", 2 * c, c, ConvSpec::pointwise(), true)?,
            channels: c,
        })
    }

    /// Expanded map `H` before the split.
    pub fn expanded(&self, g: &mut Graph<'_>, lr: Var, lx: Var) -> Result<Var> {
        let cat = g.concat(&[lr, lx], 3)?;
        let h = match &self.expand {
            Some(conv) => conv.forward(g, cat)?,
            None => g.concat(&[cat, cat], 3)?,
        };
        self.dw.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph<'_>, lr: Var, lx: Var) -> Result<Var> {
        let h = self.expanded(g, lr, lx)?;
        let ch = g.shape(h)[3];
        if ch != 4 * self.channels {
            return Err(Error::Config(format!(
                "local fusion expanded to {ch} channels, expected {}",
                4 * self.channels
            )));
        }
        let half = ch / 2;
        let hm = g.slice(h, 3, 0, half)?;
        let hn = g.slice(h, 3, half, half)?;
        let act = g.gelu(hn);
        let prod = g.mul(hm, act)?;
        self.out.forward(g, prod)
    }
}
