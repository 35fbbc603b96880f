//! Paired RGB-X samples: disk layout, preprocessing, augmentation and a synthetic
//! generator whose labels need both modalities.

mod augment;
mod io;
mod synthetic;

pub use augment::{augment, resize_to_multiple_of_32, AugmentConfig};
pub use io::{load_dataset, load_pair, save_dataset, Dataset, DatasetMeta, XKind};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

use crate::decoder::LabelMask;
use crate::encoder::replicate_x_channels;
use crate::error::{Error, Result};
use crate::numerics::Tensor4;

/// Channel-last image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Format(format!(
                "{height}x{width}x{channels} image with {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }
}

/// Per-pixel class ids; 255 marks ignored pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub id: String,
    pub source: String,
}

/// An RGB image, its aligned X map (1 or 3 channels) and the label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub rgb: Image,
    pub x: Image,
    pub label: LabelMap,
    pub meta: SampleMeta,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let dims = (self.rgb.height, self.rgb.width);
        if (self.x.height, self.x.width) != dims || (self.label.height, self.label.width) != dims {
            return Err(Error::Format(format!(
                "sample `{}`: rgb {}x{}, x {}x{}, label {}x{} differ",
                self.meta.id,
                self.rgb.height,
                self.rgb.width,
                self.x.height,
                self.x.width,
                self.label.height,
                self.label.width
            )));
        }
        if self.rgb.channels != 3 {
            return Err(Error::Format(format!("sample `{}`: rgb must have 3 channels", self.meta.id)));
        }
        if self.x.channels != 1 && self.x.channels != 3 {
            return Err(Error::Format(format!(
                "sample `{}`: x has {} channels (expected 1 or 3)",
                self.meta.id, self.x.channels
            )));
        }
        Ok(())
    }
}

/// Model-ready batch: `rgb` and replicated `x` as `(B, H, W, 3)`, labels `(B, H, W)`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rgb: Tensor4,
    pub x: Tensor4,
    pub labels: LabelMask,
}

/// Stacks samples of equal size into a batch, replicating single-channel X data.
pub fn collate(pairs: &[&SamplePair]) -> Result<Batch> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Format("cannot collate an empty batch".into()))?;
    let (h, w) = (first.rgb.height, first.rgb.width);
    let xc = first.x.channels;
    let mut rgb = Vec::with_capacity(pairs.len() * h * w * 3);
    let mut x = Vec::with_capacity(pairs.len() * h * w * xc);
    let mut labels = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        p.validate()?;
        if (p.rgb.height, p.rgb.width, p.x.channels) != (h, w, xc) {
            return Err(Error::Format(format!(
                "sample `{}` does not match batch geometry {h}x{w} with {xc} x-channels",
                p.meta.id
            )));
        }
        rgb.extend_from_slice(&p.rgb.data);
        x.extend_from_slice(&p.x.data);
        labels.extend_from_slice(&p.label.data);
    }
    let b = pairs.len();
    let x = replicate_x_channels(&Tensor4::from_vec([b, h, w, xc], x)?)?;
    Ok(Batch {
        rgb: Tensor4::from_vec([b, h, w, 3], rgb)?,
        x,
        labels: LabelMask::new(b, h, w, labels)?,
    })
}
