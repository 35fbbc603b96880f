//! Multi-scale decoder and per-pixel loss.
//!
//! FPN-style head: 1x1 laterals to a common width `D = C_1`, top-down nearest-neighbour
//! upsampling with addition, a 3x3 smoothing conv with ReLU, a 1x1 classifier at
//! stride 4, and bilinear upsampling by 4 to input resolution. This replaces the
//! mask-classification decoder used with the full-scale model.

use rand::Rng;

use crate::encoder::Pyramid;
use crate::error::{Error, Result};
use crate::numerics::layers::{Builder, Conv2d};
use crate::numerics::{ConvSpec, Graph, ParamGroup, ParamStore, Tensor4, Var};

/// Label value excluded from the loss and from metrics.
pub const IGNORE_ID: u8 = 255;

/// Integer class ids for a batch, indexed (b, h, w).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "label mask {batch}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(LabelMask {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_ID && v as usize >= num_classes)
        {
            Some(v) => Err(Error::Format(format!(
                "label {v} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub laterals: Vec<Conv2d>,
    pub smooth: Conv2d,
    pub classifier: Conv2d,
    pub num_classes: usize,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: [usize; 4], num_classes: usize) -> Result<Self> {
        if num_classes < 2 || num_classes > IGNORE_ID as usize {
            return Err(Error::Config(format!(
                "model.num_classes must be in [2, 255), got {num_classes}"
            )));
        }
        let dim = channels[0];
        let mut b = Builder::new(store, rng, ParamGroup::Decoder, "decoder");
        let laterals = (0..4)
            .map(|i| b.conv(&format!("lateral{}", i + 1), channels[i], dim, ConvSpec::pointwise(), true))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            laterals,
            smooth: b.conv("smooth", dim, dim, ConvSpec::same(3), true)?,
            classifier: b.conv("classifier", dim, num_classes, ConvSpec::pointwise(), true)?,
            num_classes,
        })
    }

    /// Class scores at stride 4, before the final upsampling.
    pub fn coarse_logits(&self, g: &mut Graph<'_>, fused: &Pyramid) -> Result<Var> {
        let mut top = self.laterals[3].forward(g, fused.0[3])?;
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, fused.0[i])?;
            let up = g.upsample_nearest(top, 2);
            top = g.add(lat, up)?;
        }
        let y = self.smooth.forward(g, top)?;
        let y = g.relu(y);
        self.classifier.forward(g, y)
    }

    /// Logits shaped `(B, H, W, K)` at input resolution.
    pub fn forward(&self, g: &mut Graph<'_>, fused: &Pyramid) -> Result<Var> {
        let coarse = self.coarse_logits(g, fused)?;
        Ok(g.upsample_bilinear(coarse, 4))
    }
}

/// Mean per-pixel cross-entropy over non-ignored pixels. Errors if every pixel is ignored.
pub fn cross_entropy_loss(g: &mut Graph<'_>, logits: Var, labels: &LabelMask) -> Result<Var> {
    let [b, h, w, _] = g.shape(logits);
    if [labels.batch, labels.height, labels.width] != [b, h, w] {
        return Err(Error::Shape(format!(
            "labels {}x{}x{} vs logits {:?}",
            labels.batch,
            labels.height,
            labels.width,
            g.shape(logits)
        )));
    }
    g.cross_entropy(logits, &labels.data, IGNORE_ID)
}

/// Per-pixel argmax over the class axis; ties go to the lowest class id.
pub fn argmax(logits: &Tensor4) -> Vec<u8> {
    let k = logits.shape()[3];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}
