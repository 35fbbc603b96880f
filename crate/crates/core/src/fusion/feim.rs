use rand::Rng;

use crate::error::Result;
use crate::numerics::layers::{Builder, Conv2d};
use crate::numerics::{ConvSpec, Graph, Var};

#[derive(Clone, Debug)]
pub enum AxisConv {
    /// One 1x1 conv over the row and column descriptors concatenated along space.
    Shared(Conv2d),
    /// Independent convs per axis, no shared processing.
    Separate { rows: Conv2d, cols: Conv2d },
}

/// Feature enhancement and integration module.
///
/// `F_S = F_G + F_L`; row descriptors `Z_h` (mean over width, `h x 1 x C`) and column
/// descriptors `Z_w` (mean over height, reshaped to `w x 1 x C`) are concatenated along
/// the spatial axis, passed through a 1x1 conv and a sigmoid, split back, and applied as
/// `F_S * Zh_hat * Zw_hat` with broadcasting.
#[derive(Clone, Debug)]
pub struct FeatureIntegration {
    pub conv: AxisConv,
}

impl FeatureIntegration {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize, interact: bool) -> Result<Self> {
        let pw = ConvSpec::pointwise();
        let conv = if interact {
            AxisConv::Shared(b.conv("conv", c, c, pw, true)?)
        } else {
            AxisConv::Separate {
                rows: b.conv("conv_rows", c, c, pw, true)?,
                cols: b.conv("conv_cols", c, c, pw, true)?,
            }
        };
        Ok(FeatureIntegration { conv })
    }

    /// Row and column gates: `(B, h, 1, C)` and `(B, 1, w, C)`.
    pub fn axis_gates(&self, g: &mut Graph<'_>, fs: Var) -> Result<(Var, Var)> {
        let [b, h, w, c] = g.shape(fs);
        let zh = g.mean(fs, [false, false, true, false]);
        let zw = g.mean(fs, [false, true, false, false]);
        let zw = g.reshape(zw, [b, w, 1, c])?;
        let (gh, gw) = match &self.conv {
            AxisConv::Shared(conv) => {
                let cat = g.concat(&[zh, zw], 1)?;
                let z = conv.forward(g, cat)?;
                let z = g.sigmoid(z);
                (g.slice(z, 1, 0, h)?, g.slice(z, 1, h, w)?)
            }
            AxisConv::Separate { rows, cols } => {
                let gh = rows.forward(g, zh)?;
                let gw = cols.forward(g, zw)?;
                (g.sigmoid(gh), g.sigmoid(gw))
            }
        };
        let gw = g.reshape(gw, [b, 1, w, c])?;
        Ok((gh, gw))
    }

    /// `local` is absent when the fusion block runs without a local branch.
    pub fn forward(&self, g: &mut Graph<'_>, global: Var, local: Option<Var>) -> Result<Var> {
        let fs = match local {
            Some(l) => g.add(global, l)?,
            None => global,
        };
        let (gh, gw) = self.axis_gates(g, fs)?;
        let y = g.mul(fs, gh)?;
        g.mul(y, gw)
    }
}
