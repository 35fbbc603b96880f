use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb};

use super::{Image, LabelMap, SampleMeta, SamplePair};
use crate::decoder::IGNORE_ID;
use crate::error::{Error, Result};

const MAX16: f64 = 65535.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XKind {
    Depth,
    /// Three components in `[-1, 1]`, stored as `(v + 1) / 2`.
    Normal,
    Thermal,
    Polarization,
    Synthetic,
}

impl XKind {
    pub const VALUES: [&'static str; 5] = ["depth", "normal", "thermal", "polarization", "synthetic"];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "depth" => XKind::Depth,
            "normal" => XKind::Normal,
            "thermal" => XKind::Thermal,
            "polarization" => XKind::Polarization,
            "synthetic" => XKind::Synthetic,
            _ => {
                return Err(Error::Format(format!(
                    "x_kind `{s}` (valid: {})",
                    Self::VALUES.join(", ")
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            XKind::Depth => "depth",
            XKind::Normal => "normal",
            XKind::Thermal => "thermal",
            XKind::Polarization => "polarization",
            XKind::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for XKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Contents of `dataset.meta`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub x_kind: XKind,
    pub ignore_id: u8,
}

impl DatasetMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let (mut k, mut kind, mut ignore) = (None, None, IGNORE_ID);
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("dataset.meta: expected key=value, got `{line}`")))?;
            let value = value.trim();
            match key.trim() {
                "num_classes" => {
                    k = Some(value.parse().map_err(|_| Error::Format(format!("num_classes `{value}`")))?)
                }
                "x_kind" => kind = Some(XKind::parse(value)?),
                "ignore_id" => ignore = value.parse().map_err(|_| Error::Format(format!("ignore_id `{value}`")))?,
                other => return Err(Error::Format(format!("dataset.meta: unknown key `{other}`"))),
            }
        }
        Ok(DatasetMeta {
            num_classes: k.ok_or_else(|| Error::Format("dataset.meta: missing num_classes".into()))?,
            x_kind: kind.ok_or_else(|| Error::Format("dataset.meta: missing x_kind".into()))?,
            ignore_id: ignore,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "num_classes={}\nx_kind={}\nignore_id={}\n",
            self.num_classes, self.x_kind, self.ignore_id
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks every pair's geometry and label range.
    pub fn validate(&self) -> Result<()> {
        for p in &self.pairs {
            p.validate()?;
            if let Some(&v) = p
                .label
                .data
                .iter()
                .find(|&&v| v != self.meta.ignore_id && v as usize >= self.meta.num_classes)
            {
                return Err(Error::Format(format!(
                    "sample `{}`: label {v} out of range for {} classes",
                    p.meta.id, self.meta.num_classes
                )));
            }
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingSample(path.to_path_buf()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn channel_count(img: &DynamicImage) -> usize {
    if img.color().has_color() {
        3
    } else {
        1
    }
}

/// Decodes any PNG depth into `[0, 1]`; 8-bit data is widened exactly (×257) first.
fn to_image(img: DynamicImage, channels: usize) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.into_luma16().into_raw().into_iter().map(|v| v as f64 / MAX16).collect(),
        _ => img.into_rgb16().into_raw().into_iter().map(|v| v as f64 / MAX16).collect(),
    };
    Image {
        height: h,
        width: w,
        channels,
        data,
    }
}

fn sample_paths(root: &Path, id: &str) -> [PathBuf; 3] {
    let file = format!("{id}.png");
    [
        root.join("rgb").join(&file),
        root.join("x").join(&file),
        root.join("labels").join(&file),
    ]
}

/// Reads `rgb/<id>.png`, `x/<id>.png` and `labels/<id>.png` under `root`.
pub fn load_pair(root: &Path, id: &str) -> Result<SamplePair> {
    let [rp, xp, lp] = sample_paths(root, id);
    let rgb = to_image(open(&rp)?, 3);
    let x_img = open(&xp)?;
    let xc = channel_count(&x_img);
    let x = to_image(x_img, xc);
    let label = match open(&lp)? {
        DynamicImage::ImageLuma8(buf) => LabelMap {
            height: buf.height() as usize,
            width: buf.width() as usize,
            data: buf.into_raw(),
        },
        other => {
            return Err(Error::Format(format!(
                "{}: labels must be 8-bit grayscale, got {:?}",
                lp.display(),
                other.color()
            )))
        }
    };
    let pair = SamplePair {
        rgb,
        x,
        label,
        meta: SampleMeta {
            id: id.to_string(),
            source: root.display().to_string(),
        },
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads `manifest.txt`, `dataset.meta` and every listed sample.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        let p = root.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let meta = DatasetMeta::parse(&read("dataset.meta")?)?;
    let pairs = read("manifest.txt")?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| load_pair(root, id))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset { meta, pairs };
    ds.validate()?;
    Ok(ds)
}

fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAX16).round() as u16
}

fn write_png<P, C>(path: &Path, buf: ImageBuffer<P, C>) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the dataset in the on-disk layout. Image data is stored as 16-bit PNG.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    for sub in ["rgb", "x", "labels"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for p in &ds.pairs {
        let [rp, xp, lp] = sample_paths(root, &p.meta.id);
        let (w, h) = (p.rgb.width as u32, p.rgb.height as u32);
        let rgb: Vec<u16> = p.rgb.data.iter().map(|&v| quantize(v)).collect();
        write_png(&rp, ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, rgb).expect("sized"))?;
        let x: Vec<u16> = p.x.data.iter().map(|&v| quantize(v)).collect();
        if p.x.channels == 1 {
            write_png(&xp, ImageBuffer::<Luma<u16>, _>::from_raw(w, h, x).expect("sized"))?;
        } else {
            write_png(&xp, ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, x).expect("sized"))?;
        }
        write_png(&lp, GrayImage::from_raw(w, h, p.label.data.clone()).expect("sized"))?;
        manifest.push_str(&p.meta.id);
        manifest.push('\n');
    }
    let write = |name: &str, text: &str| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("manifest.txt", &manifest)?;
    write("dataset.meta", &ds.meta.render())
}
