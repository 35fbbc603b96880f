use rand::Rng;

use super::{Image, LabelMap, SamplePair};
use crate::encoder::MAX_STRIDE;
use crate::error::{Error, Result};
use crate::numerics::kernels::bilinear_taps;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Random resize factor range, inclusive.
    pub scale: (f64, f64),
    /// Crop size `(h, w)`, multiples of 32. Without a crop the resized sample is snapped
    /// to the nearest multiple of 32.
    pub crop: Option<(usize, usize)>,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale: (1.0, 1.0),
            crop: None,
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Pass-through configuration (no geometric or photometric change).
    pub fn identity() -> Self {
        AugmentConfig {
            scale: (1.0, 1.0),
            crop: None,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("augment.scale: invalid range {lo}..{hi}")));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "augment.crop: {h}x{w} is not a positive multiple of {MAX_STRIDE}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob: {} not in [0, 1]", self.flip_prob)));
        }
        for (name, v, max) in [
            ("brightness", self.brightness, 1.0),
            ("contrast", self.contrast, 1.0),
            ("saturation", self.saturation, 1.0),
            ("hue", self.hue, 0.5),
        ] {
            if !(0.0..=max).contains(&v) {
                return Err(Error::Config(format!("augment.{name}: {v} not in [0, {max}]")));
            }
        }
        Ok(())
    }
}

fn resize_bilinear(img: &Image, h: usize, w: usize) -> Image {
    if (h, w) == (img.height, img.width) {
        return img.clone();
    }
    let (ty, tx) = (bilinear_taps(img.height, h), bilinear_taps(img.width, w));
    let c = img.channels;
    let mut out = Image::filled(h, w, c, 0.0);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let dst = out.pixel_mut(oy, ox);
            for ch in 0..c {
                let top = img.pixel(y0, x0)[ch] * (1.0 - fx) + img.pixel(y0, x1)[ch] * fx;
                let bot = img.pixel(y1, x0)[ch] * (1.0 - fx) + img.pixel(y1, x1)[ch] * fx;
                dst[ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn nearest_index(o: usize, in_len: usize, out_len: usize) -> usize {
    (((o as f64 + 0.5) * in_len as f64 / out_len as f64) as usize).min(in_len - 1)
}

fn resize_nearest(label: &LabelMap, h: usize, w: usize) -> LabelMap {
    if (h, w) == (label.height, label.width) {
        return label.clone();
    }
    let mut data = Vec::with_capacity(h * w);
    for oy in 0..h {
        let y = nearest_index(oy, label.height, h);
        for ox in 0..w {
            data.push(label.at(y, nearest_index(ox, label.width, w)));
        }
    }
    LabelMap {
        height: h,
        width: w,
        data,
    }
}

fn resize_pair(p: &SamplePair, h: usize, w: usize) -> SamplePair {
    SamplePair {
        rgb: resize_bilinear(&p.rgb, h, w),
        x: resize_bilinear(&p.x, h, w),
        label: resize_nearest(&p.label, h, w),
        meta: p.meta.clone(),
    }
}

fn snap32(v: usize) -> usize {
    (((v as f64) / MAX_STRIDE as f64).round() as usize).max(1) * MAX_STRIDE
}

/// Resizes to the nearest multiple of 32 in each dimension (at least 32).
pub fn resize_to_multiple_of_32(p: &SamplePair) -> SamplePair {
    resize_pair(p, snap32(p.rgb.height), snap32(p.rgb.width))
}

fn crop_image(img: &Image, top: usize, left: usize, h: usize, w: usize) -> Image {
    let c = img.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        let row = (y * img.width + left) * c;
        data.extend_from_slice(&img.data[row..row + w * c]);
    }
    Image {
        height: h,
        width: w,
        channels: c,
        data,
    }
}

fn flip_image(img: &mut Image) {
    let (w, c) = (img.width, img.channels);
    for row in img.data.chunks_exact_mut(w * c) {
        for x in 0..w / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (w - 1 - x) * c + ch);
            }
        }
    }
}

fn gray(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: &[f64]) -> (f64, f64, f64) {
    let (r, g, b) = (p[0], p[1], p[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub(super) fn hsv_to_rgb(h: f64, s: f64, v: f64, out: &mut [f64]) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    out[0] = r;
    out[1] = g;
    out[2] = b;
}

/// Brightness, contrast, saturation and hue jitter, in that order, on a 3-channel image.
fn jitter_rgb<R: Rng>(img: &mut Image, cfg: &AugmentConfig, rng: &mut R) {
    let mut factor = |r: f64| if r > 0.0 { rng.gen_range(1.0 - r..=1.0 + r) } else { 1.0 };
    let (fb, fc, fs) = (factor(cfg.brightness), factor(cfg.contrast), factor(cfg.saturation));
    let dh = if cfg.hue > 0.0 { rng.gen_range(-cfg.hue..=cfg.hue) } else { 0.0 };
    if fb != 1.0 {
        img.data.iter_mut().for_each(|v| *v = (*v * fb).clamp(0.0, 1.0));
    }
    if fc != 1.0 {
        let n = (img.height * img.width) as f64;
        let mean = img.data.chunks_exact(3).map(gray).sum::<f64>() / n;
        img.data
            .iter_mut()
            .for_each(|v| *v = (mean + fc * (*v - mean)).clamp(0.0, 1.0));
    }
    if fs != 1.0 {
        for p in img.data.chunks_exact_mut(3) {
            let g = gray(p);
            p.iter_mut().for_each(|v| *v = (g + fs * (*v - g)).clamp(0.0, 1.0));
        }
    }
    if dh != 0.0 {
        for p in img.data.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(p);
            hsv_to_rgb(h + dh, s, v, p);
        }
    }
}

/// Random resize, crop and horizontal flip shared by rgb, x and label; colour jitter on
/// rgb only. Outputs are clamped to `[0, 1]` and have spatial dims divisible by 32.
pub fn augment<R: Rng>(pair: &SamplePair, rng: &mut R, cfg: &AugmentConfig) -> Result<SamplePair> {
    cfg.validate()?;
    pair.validate()?;
    let s = if cfg.scale.0 < cfg.scale.1 {
        rng.gen_range(cfg.scale.0..=cfg.scale.1)
    } else {
        cfg.scale.0
    };
    let rh = ((pair.rgb.height as f64 * s).round() as usize).max(1);
    let rw = ((pair.rgb.width as f64 * s).round() as usize).max(1);
    let mut out = resize_pair(pair, rh, rw);

    match cfg.crop {
        Some((ch, cw)) => {
            if ch > rh || cw > rw {
                return Err(Error::Config(format!(
                    "augment.crop {ch}x{cw} exceeds resized sample {rh}x{rw}"
                )));
            }
            let top = rng.gen_range(0..=rh - ch);
            let left = rng.gen_range(0..=rw - cw);
            out.rgb = crop_image(&out.rgb, top, left, ch, cw);
            out.x = crop_image(&out.x, top, left, ch, cw);
            let label = Image {
                height: rh,
                width: rw,
                channels: 1,
                data: out.label.data.iter().map(|&v| v as f64).collect(),
            };
            out.label = LabelMap {
                height: ch,
                width: cw,
                data: crop_image(&label, top, left, ch, cw)
                    .data
                    .into_iter()
                    .map(|v| v as u8)
                    .collect(),
            };
        }
        None => out = resize_to_multiple_of_32(&out),
    }

    if cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob) {
        flip_image(&mut out.rgb);
        flip_image(&mut out.x);
        let mut label = Image {
            height: out.label.height,
            width: out.label.width,
            channels: 1,
            data: out.label.data.iter().map(|&v| v as f64).collect(),
        };
        flip_image(&mut label);
        out.label.data = label.data.into_iter().map(|v| v as u8).collect();
    }

    jitter_rgb(&mut out.rgb, cfg, rng);
    out.rgb.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out.x.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}
