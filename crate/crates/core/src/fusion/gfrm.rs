use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{attention, Builder, Conv2d, LayerNorm};
use crate::numerics::{ConvSpec, Graph, Init, ParamId, ParamKind, Var};

/// Global feature recalibration module.
///
/// 1. Bidirectional cross-attention: each modality queries the other's keys but reads
///    its own values, scaled by a learnable gate (`kappa` for RGB, `gamma` for X) and
///    added back residually. Single head, unscaled scores.
/// 2. Fusion: channel concat, 1x1 reduction `2C -> C`, ReLU, layer norm.
/// 3. Channel attention: spatial mean, 1x1 conv, sigmoid gate, `F * gate + F`.
#[derive(Clone, Debug)]
pub struct GlobalRecalibration {
    pub q_rgb: Conv2d,
    pub k_rgb: Conv2d,
    pub v_rgb: Conv2d,
    pub q_x: Conv2d,
    pub k_x: Conv2d,
    pub v_x: Conv2d,
    /// Gate on the RGB attention path, shape `[1, 1, 1, 1]`, zero at init.
    pub kappa: ParamId,
    /// Gate on the X attention path, shape `[1, 1, 1, 1]`, zero at init.
    pub gamma: ParamId,
    pub reduce: Conv2d,
    pub norm: LayerNorm,
    pub channel: Conv2d,
}

impl GlobalRecalibration {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize) -> Result<Self> {
        let pw = ConvSpec::pointwise();
        Ok(GlobalRecalibration {
            q_rgb: b.conv("q_rgb", c, c, pw, true)?,
            k_rgb: b.conv("k_rgb", c, c, pw, true)?,
            v_rgb: b.conv("v_rgb", c, c, pw, true)?,
            q_x: b.conv("q_x", c, c, pw, true)?,
            k_x: b.conv("k_x", c, c, pw, true)?,
            v_x: b.conv("v_x", c, c, pw, true)?,
            kappa: b.param("kappa", [1, 1, 1, 1], Init::Zeros, ParamKind::Gate)?,
            gamma: b.param("gamma", [1, 1, 1, 1], Init::Zeros, ParamKind::Gate)?,
            reduce: b.conv("reduce", 2 * c, c, pw, true)?,
            norm: b.norm("norm", c)?,
            channel: b.conv("channel", c, c, pw, true)?,
        })
    }

    pub fn cross_attend(&self, g: &mut Graph<'_>, gr: Var, gx: Var) -> Result<(Var, Var)> {
        if g.shape(gr) != g.shape(gx) {
            return Err(Error::Shape(format!(
                "cross-attention inputs differ: {:?} vs {:?}",
                g.shape(gr),
                g.shape(gx)
            )));
        }
        let (qr, kr, vr) = (self.q_rgb.forward(g, gr)?, self.k_rgb.forward(g, gr)?, self.v_rgb.forward(g, gr)?);
        let (qx, kx, vx) = (self.q_x.forward(g, gx)?, self.k_x.forward(g, gx)?, self.v_x.forward(g, gx)?);
        let kappa = g.param(self.kappa);
        let gamma = g.param(self.gamma);

        let ar = attention(g, qr, kx, vr, 1, 1.0)?;
        let ar = g.mul(ar, kappa)?;
        let out_r = g.add(ar, gr)?;

        let ax = attention(g, qx, kr, vx, 1, 1.0)?;
        let ax = g.mul(ax, gamma)?;
        let out_x = g.add(ax, gx)?;
        Ok((out_r, out_x))
    }

    pub fn fuse(&self, g: &mut Graph<'_>, gr: Var, gx: Var) -> Result<Var> {
        let cat = g.concat(&[gr, gx], 3)?;
        let y = self.reduce.forward(g, cat)?;
        let y = g.relu(y);
        self.norm.forward(g, y)
    }

    pub fn channel_attend(&self, g: &mut Graph<'_>, fc: Var) -> Result<Var> {
        let z = g.mean(fc, [false, true, true, false]);
        let gate = self.channel.forward(g, z)?;
        let gate = g.sigmoid(gate);
        let scaled = g.mul(fc, gate)?;
        g.add(scaled, fc)
    }

    pub fn forward(&self, g: &mut Graph<'_>, gr: Var, gx: Var) -> Result<Var> {
        let (r, x) = self.cross_attend(g, gr, gx)?;
        let fc = self.fuse(g, r, x)?;
        self.channel_attend(g, fc)
    }
}
