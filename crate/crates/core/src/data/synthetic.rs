//! Grid-of-cells generator. Each cell draws an (rgb bucket, x bucket) combination;
//! the rule table maps the combination to a class. RGB buckets are evenly spaced hues,
//! X buckets evenly spaced intensity bands. Combinations are stratified so that every
//! image holds (nearly) equal counts of each, placed in random cell order; that makes the
//! position of a combination carry no information about it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::augment::hsv_to_rgb;
use super::{Dataset, DatasetMeta, Image, LabelMap, SampleMeta, SamplePair, XKind};
use crate::decoder::IGNORE_ID;
use crate::encoder::MAX_STRIDE;
use crate::error::{Error, Result};

/// Largest single-modality posterior tolerated for the designated joint class.
pub const MAX_SINGLE_MODALITY_POSTERIOR: f64 = 0.55;
/// Smallest pixel prevalence tolerated for the designated joint class.
pub const MIN_JOINT_PREVALENCE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Square cell edge in pixels; must divide both image dims.
    pub cell: usize,
    /// `rules[rgb_bucket][x_bucket]` is the class id.
    pub rules: Vec<Vec<u8>>,
    /// Class whose pixels need both modalities; `None` picks the first joint-only class.
    pub joint_class: Option<u8>,
    /// Per-cell hue offset, uniform in `±hue_jitter` (fraction of the colour wheel).
    pub hue_jitter: f64,
    /// Per-cell X offset as a fraction of one bucket width, uniform in `±x_spread`.
    pub x_spread: f64,
    /// Per-pixel Gaussian noise standard deviations.
    pub rgb_noise: f64,
    pub x_noise: f64,
}

impl Default for SyntheticSpec {
    /// Three classes: rgb bucket 1 is class 0 whatever X says; rgb bucket 0 is split by
    /// the X bucket into classes 1 and 2.
    fn default() -> Self {
        SyntheticSpec {
            height: 32,
            width: 32,
            cell: 8,
            rules: vec![vec![1, 2], vec![0, 0]],
            joint_class: Some(2),
            hue_jitter: 0.05,
            x_spread: 0.35,
            rgb_noise: 0.03,
            x_noise: 0.03,
        }
    }
}

/// Per-class facts implied by the rule table (uniform combination sampling).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassTruth {
    pub class: u8,
    /// Expected fraction of pixels.
    pub prevalence: f64,
    /// Observed fraction over the generated set.
    pub observed: f64,
    /// Largest P(class | rgb bucket) over buckets where the class occurs.
    pub rgb_only_bayes: f64,
    /// Largest P(class | x bucket) over buckets where the class occurs.
    pub x_only_bayes: f64,
    pub joint_bayes: f64,
    pub joint_only: bool,
}

/// Ground-truth report accompanying a generated set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroundTruth {
    pub joint_class: u8,
    pub num_classes: usize,
    pub samples: usize,
    pub classes: Vec<ClassTruth>,
}

impl GroundTruth {
    pub fn class(&self, c: u8) -> &ClassTruth {
        &self.classes[c as usize]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

fn parse_err(key: &str, v: &str) -> Error {
    Error::Config(format!("synthetic spec: bad value `{v}` for `{key}`"))
}

impl SyntheticSpec {
    pub fn rgb_buckets(&self) -> usize {
        self.rules.len()
    }

    pub fn x_buckets(&self) -> usize {
        self.rules.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.rules.iter().flatten().map(|&c| c as usize + 1).max().unwrap_or(0)
    }

    /// Valid keys for [`SyntheticSpec::set`].
    pub const KEYS: [&'static str; 9] = [
        "height",
        "width",
        "cell",
        "rules",
        "joint_class",
        "hue_jitter",
        "x_spread",
        "rgb_noise",
        "x_noise",
    ];

    /// Sets one field from its text form. `rules` lists rows per rgb bucket separated by
    /// `;`, classes per x bucket separated by `,`, e.g. `1,2; 0,0`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| parse_err(key, v));
        let int = |v: &str| v.parse::<usize>().map_err(|_| parse_err(key, v));
        match key {
            "height" => self.height = int(v)?,
            "width" => self.width = int(v)?,
            "cell" => self.cell = int(v)?,
            "hue_jitter" => self.hue_jitter = num(v)?,
            "x_spread" => self.x_spread = num(v)?,
            "rgb_noise" => self.rgb_noise = num(v)?,
            "x_noise" => self.x_noise = num(v)?,
            "joint_class" => {
                self.joint_class = match v {
                    "auto" => None,
                    _ => Some(v.parse().map_err(|_| parse_err(key, v))?),
                }
            }
            "rules" => {
                self.rules = v
                    .split(';')
                    .map(|row| {
                        row.split(',')
                            .map(|c| c.trim().parse::<u8>().map_err(|_| parse_err(key, c)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?
            }
            _ => {
                return Err(Error::Config(format!(
                    "synthetic spec: unknown key `{key}` (valid: {})",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines (`#` starts a comment) over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic spec: expected key=value, got `{line}`")))?;
            spec.set(key.trim(), v.trim())?;
        }
        Ok(spec)
    }

    pub fn render(&self) -> String {
        let rules: Vec<String> = self
            .rules
            .iter()
            .map(|r| r.iter().map(u8::to_string).collect::<Vec<_>>().join(","))
            .collect();
        format!(
            "height={}\nwidth={}\ncell={}\nrules={}\njoint_class={}\nhue_jitter={}\nx_spread={}\nrgb_noise={}\nx_noise={}\n",
            self.height,
            self.width,
            self.cell,
            rules.join("; "),
            self.joint_class.map_or("auto".to_string(), |c| c.to_string()),
            self.hue_jitter,
            self.x_spread,
            self.rgb_noise,
            self.x_noise
        )
    }

    /// Class facts from the rule table; `observed` is left at zero.
    fn class_table(&self) -> Vec<ClassTruth> {
        let (r, x) = (self.rgb_buckets(), self.x_buckets());
        let total = (r * x) as f64;
        (0..self.num_classes())
            .map(|c| {
                let c = c as u8;
                let count = self.rules.iter().flatten().filter(|&&v| v == c).count();
                let rgb_only_bayes = (0..r)
                    .filter(|&i| self.rules[i].contains(&c))
                    .map(|i| self.rules[i].iter().filter(|&&v| v == c).count() as f64 / x as f64)
                    .fold(0.0, f64::max);
                let x_only_bayes = (0..x)
                    .filter(|&j| self.rules.iter().any(|row| row[j] == c))
                    .map(|j| self.rules.iter().filter(|row| row[j] == c).count() as f64 / r as f64)
                    .fold(0.0, f64::max);
                ClassTruth {
                    class: c,
                    prevalence: count as f64 / total,
                    observed: 0.0,
                    rgb_only_bayes,
                    x_only_bayes,
                    joint_bayes: if count > 0 { 1.0 } else { 0.0 },
                    joint_only: count > 0
                        && rgb_only_bayes <= MAX_SINGLE_MODALITY_POSTERIOR
                        && x_only_bayes <= MAX_SINGLE_MODALITY_POSTERIOR,
                }
            })
            .collect()
    }

    /// Checks geometry and the rule table, and returns the designated joint class.
    pub fn validate(&self) -> Result<u8> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.height == 0 || self.width == 0 || self.height % MAX_STRIDE != 0 || self.width % MAX_STRIDE != 0 {
            return bad(format!("{}x{} is not a multiple of {MAX_STRIDE}", self.height, self.width));
        }
        if self.cell == 0 || self.height % self.cell != 0 || self.width % self.cell != 0 {
            return bad(format!("cell {} does not divide {}x{}", self.cell, self.height, self.width));
        }
        let x = self.x_buckets();
        if self.rgb_buckets() < 2 || x < 2 || self.rules.iter().any(|r| r.len() != x) {
            return bad("rules must be a rectangular table with at least 2x2 buckets".into());
        }
        let k = self.num_classes();
        if k < 2 || k > IGNORE_ID as usize {
            return bad(format!("{k} classes"));
        }
        if !(0.0..=0.5).contains(&self.x_spread) || !(0.0..0.5).contains(&self.hue_jitter) {
            return bad("x_spread must be in [0, 0.5] and hue_jitter in [0, 0.5)".into());
        }
        if self.rgb_noise < 0.0 || self.x_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        let table = self.class_table();
        if let Some(c) = table.iter().find(|t| t.prevalence == 0.0) {
            return bad(format!("class {} never occurs in the rule table", c.class));
        }
        let joint = match self.joint_class {
            Some(c) if c as usize >= k => return bad(format!("joint_class {c} out of range")),
            Some(c) => c,
            None => match table.iter().find(|t| t.joint_only) {
                Some(t) => t.class,
                None => return bad("no class is decodable only from the joint rule".into()),
            },
        };
        let t = &table[joint as usize];
        if !t.joint_only {
            return bad(format!(
                "class {joint} is decodable from one modality (rgb posterior {:.3}, x posterior {:.3})",
                t.rgb_only_bayes, t.x_only_bayes
            ));
        }
        if t.prevalence < MIN_JOINT_PREVALENCE {
            return bad(format!("joint class {joint} prevalence {:.3} below 0.10", t.prevalence));
        }
        Ok(joint)
    }
}

fn render_pair<R: Rng>(spec: &SyntheticSpec, combos: &[(usize, usize)], rng: &mut R, id: String) -> SamplePair {
    let (h, w, cell) = (spec.height, spec.width, spec.cell);
    let cols = w / cell;
    let (nr, nx) = (spec.rgb_buckets() as f64, spec.x_buckets() as f64);
    let rgb_noise = Normal::new(0.0, spec.rgb_noise).expect("validated");
    let x_noise = Normal::new(0.0, spec.x_noise).expect("validated");

    let cells: Vec<([f64; 3], f64)> = combos
        .iter()
        .map(|&(r, x)| {
            let hue = r as f64 / nr + rng.gen_range(-1.0..=1.0) * spec.hue_jitter;
            let sat = rng.gen_range(0.7..=0.9);
            let val = rng.gen_range(0.6..=0.9);
            let mut c = [0.0; 3];
            hsv_to_rgb(hue, sat, val, &mut c);
            let xv = (x as f64 + 0.5 + rng.gen_range(-1.0..=1.0) * spec.x_spread) / nx;
            (c, xv)
        })
        .collect();

    let mut rgb = Image::filled(h, w, 3, 0.0);
    let mut x = Image::filled(h, w, 1, 0.0);
    let mut label = Vec::with_capacity(h * w);
    for py in 0..h {
        for px in 0..w {
            let ci = (py / cell) * cols + px / cell;
            let (colour, xv) = cells[ci];
            let dst = rgb.pixel_mut(py, px);
            for ch in 0..3 {
                dst[ch] = (colour[ch] + rgb_noise.sample(rng)).clamp(0.0, 1.0);
            }
            x.pixel_mut(py, px)[0] = (xv + x_noise.sample(rng)).clamp(0.0, 1.0);
            let (r, b) = combos[ci];
            label.push(spec.rules[r][b]);
        }
    }
    SamplePair {
        rgb,
        x,
        label: LabelMap {
            height: h,
            width: w,
            data: label,
        },
        meta: SampleMeta {
            id,
            source: "synthetic".into(),
        },
    }
}

/// Generates `n` pairs plus the ground-truth report for the spec's joint class.
pub fn generate_synthetic<R: Rng>(spec: &SyntheticSpec, n: usize, rng: &mut R) -> Result<(Dataset, GroundTruth)> {
    let joint_class = spec.validate()?;
    let all: Vec<(usize, usize)> = (0..spec.rgb_buckets())
        .flat_map(|r| (0..spec.x_buckets()).map(move |x| (r, x)))
        .collect();
    let n_cells = (spec.height / spec.cell) * (spec.width / spec.cell);

    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        // Whole rounds of every combination, topped up with distinct random ones.
        let mut combos: Vec<(usize, usize)> = all.iter().cycle().take(n_cells - n_cells % all.len()).copied().collect();
        let mut extra = all.clone();
        extra.shuffle(rng);
        combos.extend(extra.into_iter().take(n_cells % all.len()));
        combos.shuffle(rng);
        pairs.push(render_pair(spec, &combos, rng, format!("syn_{i:05}")));
    }

    let k = spec.num_classes();
    let mut hist = vec![0usize; k];
    for p in &pairs {
        for &v in &p.label.data {
            hist[v as usize] += 1;
        }
    }
    let total: usize = hist.iter().sum();
    let mut classes = spec.class_table();
    for (t, &count) in classes.iter_mut().zip(&hist) {
        t.observed = if total > 0 { count as f64 / total as f64 } else { 0.0 };
    }
    let ds = Dataset {
        meta: DatasetMeta {
            num_classes: k,
            x_kind: XKind::Synthetic,
            ignore_id: IGNORE_ID,
        },
        pairs,
    };
    Ok((
        ds,
        GroundTruth {
            joint_class,
            num_classes: k,
            samples: n,
            classes,
        },
    ))
}
