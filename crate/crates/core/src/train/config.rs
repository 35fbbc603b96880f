//! Flat `key = value` configuration with optional `[section]` prefixes.
//!
//! ```text
//! # comment
//! [train]
//! base_lr = 1e-4        # -> train.base_lr
//! fusion.local = none   # dotted keys work anywhere
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::encoder::{BackboneKind, Sharing};
use crate::error::{Error, Result};
use crate::eval::{AccDefinition, MetricOptions, UndefinedPolicy};
use crate::fusion::{GlobalFusion, Integration, LocalFusionKind};
use crate::model::ModelConfig;

/// One `key = value` line with its section prefix applied.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits text into entries. Section headers are kept raw in `section` (for grid rows);
/// keys are prefixed with the section name unless it contains whitespace.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section `{line}`", i + 1)))?
                .trim();
            section = (!name.is_empty()).then(|| name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
        let k = k.trim();
        let key = match &section {
            Some(s) if !s.contains(char::is_whitespace) => format!("{s}.{k}"),
            _ => k.to_string(),
        };
        out.push(Entry {
            section: section.clone(),
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    /// `n` pairs from the configured synthetic spec.
    Synthetic(usize),
}

impl DataSource {
    fn parse(key: &str, v: &str, base: &Path) -> Result<Self> {
        match v.strip_prefix("synthetic:") {
            Some(n) => Ok(DataSource::Synthetic(
                n.trim().parse().map_err(|_| bad(key, v, "synthetic:<count> or a directory"))?,
            )),
            None if v.is_empty() => Err(bad(key, v, "synthetic:<count> or a directory")),
            None => Ok(DataSource::Dir(base.join(v))),
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Dir(p) => p.display().to_string(),
            DataSource::Synthetic(n) => format!("synthetic:{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_multiplier: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            weight_decay: 5e-2,
            backbone_lr_multiplier: 0.1,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: DataSource,
    /// Validation source; without one the training set is evaluated.
    pub val: Option<DataSource>,
    /// Replace X by zeros everywhere (single-modality baseline).
    pub zero_x: bool,
    pub augment: bool,
    pub synthetic_seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: DataSource::Synthetic(10),
            val: None,
            zero_x: false,
            augment: false,
            synthetic_seed: 0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps; the LR schedule spans the capped length.
    pub max_steps: Option<u64>,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub metrics: MetricOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            epochs: 10,
            batch_size: 2,
            seed: 0,
            max_steps: None,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

fn bad(key: &str, v: &str, valid: &str) -> Error {
    Error::Config(format!("{key}: invalid value `{v}` (valid: {valid})"))
}

fn num<T: std::str::FromStr>(key: &str, v: &str, valid: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, v, valid))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, v, "on, off")),
    }
}

fn list<const N: usize, T: std::str::FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<&str> = v
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(str::trim)
        .collect();
    let what = format!("{N} comma-separated numbers");
    if items.len() != N {
        return Err(bad(key, v, &what));
    }
    let mut out = [T::default(); N];
    for (o, s) in out.iter_mut().zip(items) {
        *o = num(key, s, &what)?;
    }
    Ok(out)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every key accepted by [`TrainConfig::set`], in rendering order.
pub const KEYS: &[&str] = &[
    "model.num_classes",
    "model.channels",
    "model.depths",
    "model.heads",
    "model.lfe_expansion",
    "backbone.kind",
    "backbone.sharing",
    "encoder.gfe",
    "encoder.lfe",
    "fusion.global",
    "fusion.local",
    "fusion.integrate",
    "train.base_lr",
    "train.weight_decay",
    "train.backbone_lr_multiplier",
    "train.poly_power",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.max_steps",
    "data.train",
    "data.val",
    "data.zero_x",
    "data.augment",
    "data.synthetic_seed",
    "augment.scale",
    "augment.crop",
    "augment.flip_prob",
    "augment.brightness",
    "augment.contrast",
    "augment.saturation",
    "augment.hue",
    "eval.undefined",
    "eval.acc",
];

impl TrainConfig {
    /// Reads a config file; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_with_base(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Path::new(""))
    }

    pub fn parse_with_base(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for e in parse_entries(text)? {
            cfg.set_with_base(&e.key, &e.value, base)
                .map_err(|err| Error::Config(format!("line {}: {}", e.line, strip_prefix(&err))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one dotted key. `model.`-prefixed ablation flags (`model.fusion.local`)
    /// are accepted as aliases.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        self.set_with_base(key, v, Path::new(""))
    }

    pub fn set_with_base(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let key = match key.strip_prefix("model.") {
            Some(rest) if ["backbone.", "encoder.", "fusion."].iter().any(|p| rest.starts_with(p)) => rest,
            _ => key,
        };
        if let Some(k) = key.strip_prefix("synthetic.") {
            return self.data.synthetic.set(k, v);
        }
        let (m, o, a) = (&mut self.model, &mut self.optim, &mut self.augment);
        let real = "a number";
        match key {
            "model.num_classes" => m.num_classes = num(key, v, "an integer in [2, 255)")?,
            "model.channels" => m.encoder.channels = list(key, v)?,
            "model.depths" => m.encoder.depths = list(key, v)?,
            "model.heads" => m.encoder.heads = list(key, v)?,
            "model.lfe_expansion" => m.encoder.lfe_expansion = num(key, v, "a positive integer")?,
            "backbone.kind" => m.backbone = BackboneKind::parse(v)?,
            "backbone.sharing" => m.encoder.sharing = Sharing::parse(v)?,
            "encoder.gfe" => m.encoder.gfe = boolean(key, v)?,
            "encoder.lfe" => m.encoder.lfe = boolean(key, v)?,
            "fusion.global" => m.fusion.global = GlobalFusion::parse(v)?,
            "fusion.local" => m.fusion.local = LocalFusionKind::parse(v)?,
            "fusion.integrate" => m.fusion.integrate = Integration::parse(v)?,
            "train.base_lr" => o.base_lr = num(key, v, real)?,
            "train.weight_decay" => o.weight_decay = num(key, v, real)?,
            "train.backbone_lr_multiplier" => o.backbone_lr_multiplier = num(key, v, real)?,
            "train.poly_power" => o.poly_power = num(key, v, real)?,
            "train.beta1" => o.beta1 = num(key, v, real)?,
            "train.beta2" => o.beta2 = num(key, v, real)?,
            "train.eps" => o.eps = num(key, v, real)?,
            "train.epochs" => self.epochs = num(key, v, "a positive integer")?,
            "train.batch_size" => self.batch_size = num(key, v, "a positive integer")?,
            "train.seed" => self.seed = num(key, v, "an unsigned integer")?,
            "train.max_steps" => {
                self.max_steps = match v {
                    "none" => None,
                    _ => Some(num(key, v, "none or a positive integer")?),
                }
            }
            "data.train" => self.data.train = DataSource::parse(key, v, base)?,
            "data.val" => {
                self.data.val = match v {
                    "none" => None,
                    _ => Some(DataSource::parse(key, v, base)?),
                }
            }
            "data.zero_x" => self.data.zero_x = boolean(key, v)?,
            "data.augment" => self.data.augment = boolean(key, v)?,
            "data.synthetic_seed" => self.data.synthetic_seed = num(key, v, "an unsigned integer")?,
            "augment.scale" => {
                let [lo, hi] = list(key, v)?;
                a.scale = (lo, hi);
            }
            "augment.crop" => {
                a.crop = match v {
                    "none" => None,
                    _ => {
                        let [h, w] = list(key, v)?;
                        Some((h, w))
                    }
                }
            }
            "augment.flip_prob" => a.flip_prob = num(key, v, real)?,
            "augment.brightness" => a.brightness = num(key, v, real)?,
            "augment.contrast" => a.contrast = num(key, v, real)?,
            "augment.saturation" => a.saturation = num(key, v, real)?,
            "augment.hue" => a.hue = num(key, v, real)?,
            "eval.undefined" => {
                self.metrics.undefined = match v {
                    "exclude" => UndefinedPolicy::Exclude,
                    "zero" => UndefinedPolicy::ScoreZero,
                    _ => return Err(bad(key, v, "exclude, zero")),
                }
            }
            "eval.acc" => {
                self.metrics.acc = match v {
                    "per_class" => AccDefinition::PerClass,
                    "global" => AccDefinition::Global,
                    _ => return Err(bad(key, v, "per_class, global")),
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (valid: {}, synthetic.{{{}}})",
                    KEYS.join(", "),
                    SyntheticSpec::KEYS.join(",")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        for (name, v) in [
            ("train.base_lr", o.base_lr),
            ("train.backbone_lr_multiplier", o.backbone_lr_multiplier),
            ("train.poly_power", o.poly_power),
            ("train.eps", o.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("train.weight_decay must be >= 0, got {}", o.weight_decay)));
        }
        for (name, b) in [("train.beta1", o.beta1), ("train.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(Error::Config(
                "train.epochs, train.batch_size and train.max_steps must be positive".into(),
            ));
        }
        if matches!(self.data.train, DataSource::Synthetic(0)) || matches!(self.data.val, Some(DataSource::Synthetic(0))) {
            return Err(Error::Config("synthetic data sources need at least one sample".into()));
        }
        self.model.encoder.validate()?;
        self.augment.validate()
    }

    /// Canonical text form; parsing it reproduces `self`.
    pub fn render(&self) -> String {
        let (m, o, a, d) = (&self.model, &self.optim, &self.augment, &self.data);
        let e = &m.encoder;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.channels", join(&e.channels));
        kv("model.depths", join(&e.depths));
        kv("model.heads", join(&e.heads));
        kv("model.lfe_expansion", e.lfe_expansion.to_string());
        kv("backbone.kind", m.backbone.name().into());
        kv("backbone.sharing", e.sharing.name().into());
        kv("encoder.gfe", on_off(e.gfe).into());
        kv("encoder.lfe", on_off(e.lfe).into());
        kv("fusion.global", m.fusion.global.name().into());
        kv("fusion.local", m.fusion.local.name().into());
        kv("fusion.integrate", m.fusion.integrate.name().into());
        kv("train.base_lr", format!("{:e}", o.base_lr));
        kv("train.weight_decay", format!("{:e}", o.weight_decay));
        kv("train.backbone_lr_multiplier", format!("{:e}", o.backbone_lr_multiplier));
        kv("train.poly_power", format!("{:e}", o.poly_power));
        kv("train.beta1", format!("{:e}", o.beta1));
        kv("train.beta2", format!("{:e}", o.beta2));
        kv("train.eps", format!("{:e}", o.eps));
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.seed.to_string());
        kv("train.max_steps", self.max_steps.map_or("none".into(), |n| n.to_string()));
        kv("data.train", d.train.render());
        kv("data.val", d.val.as_ref().map_or("none".into(), DataSource::render));
        kv("data.zero_x", on_off(d.zero_x).into());
        kv("data.augment", on_off(d.augment).into());
        kv("data.synthetic_seed", d.synthetic_seed.to_string());
        kv("augment.scale", format!("{:e},{:e}", a.scale.0, a.scale.1));
        kv("augment.crop", a.crop.map_or("none".into(), |(h, w)| format!("{h},{w}")));
        kv("augment.flip_prob", format!("{:e}", a.flip_prob));
        kv("augment.brightness", format!("{:e}", a.brightness));
        kv("augment.contrast", format!("{:e}", a.contrast));
        kv("augment.saturation", format!("{:e}", a.saturation));
        kv("augment.hue", format!("{:e}", a.hue));
        kv(
            "eval.undefined",
            match self.metrics.undefined {
                UndefinedPolicy::Exclude => "exclude",
                UndefinedPolicy::ScoreZero => "zero",
            }
            .into(),
        );
        kv(
            "eval.acc",
            match self.metrics.acc {
                AccDefinition::PerClass => "per_class",
                AccDefinition::Global => "global",
            }
            .into(),
        );
        for line in d.synthetic.render().lines() {
            let (k, v) = line.split_once('=').expect("key=value");
            kv(&format!("synthetic.{k}"), v.to_string());
        }
        s
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
