//! Ablation grids: a base config plus one override set per row; each row is trained
//! from scratch and reported with mIoU, parameter count and wall time.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{parse_entries, TrainConfig};
use super::trainer::{load_data, train, RunOptions, TrainData};
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::numerics::ParamGroup;

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub title: String,
    pub base: TrainConfig,
    pub rows: Vec<GridRow>,
}

fn row(label: &str, overrides: &[(&str, &str)]) -> GridRow {
    GridRow {
        label: label.to_string(),
        overrides: overrides.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

/// Built-in row sets: `sharing` (backbone strategy), `hfde` (GFE/LFE toggles) and
/// `mhff` (the six fusion variants).
pub fn preset_rows(name: &str) -> Result<Vec<GridRow>> {
    let fusion = |g: &str, l: &str, i: &str| {
        let mut cfg = crate::fusion::FusionConfig::default();
        cfg.global = crate::fusion::GlobalFusion::parse(g)?;
        cfg.local = crate::fusion::LocalFusionKind::parse(l)?;
        cfg.integrate = crate::fusion::Integration::parse(i)?;
        Ok::<_, Error>(row(
            &cfg.label(),
            &[("fusion.global", g), ("fusion.local", l), ("fusion.integrate", i)],
        ))
    };
    Ok(match name {
        "sharing" => vec![
            row("Weight-Separating", &[("backbone.sharing", "separate")]),
            row("Weight-Sharing", &[("backbone.sharing", "shared")]),
        ],
        "hfde" => vec![
            row("GFE ✓ LFE ✗", &[("encoder.gfe", "on"), ("encoder.lfe", "off")]),
            row("GFE ✗ LFE ✓", &[("encoder.gfe", "off"), ("encoder.lfe", "on")]),
            row("GFE ✓ LFE ✓", &[("encoder.gfe", "on"), ("encoder.lfe", "on")]),
        ],
        "mhff" => vec![
            fusion("hffm", "none", "ffrm")?,
            fusion("hffm", "lffm", "ffrm")?,
            fusion("gfrm", "lffm", "ffrm")?,
            fusion("gfrm", "lffm", "feim")?,
            fusion("gfrm", "lffm_dup", "feim")?,
            fusion("gfrm", "lffm", "feim_noninteract")?,
        ],
        _ => {
            return Err(Error::Config(format!(
                "grid preset `{name}` (valid: sharing, hfde, mhff)"
            )))
        }
    })
}

impl GridSpec {
    /// Grid file syntax:
    ///
    /// ```text
    /// title = Fusion ablation
    /// base = base.cfg          # optional, relative to the grid file
    /// preset = mhff            # optional, appends built-in rows
    /// epochs = 2               # shorthand for train.epochs
    /// train.base_lr = 2e-3     # any other key overrides the base config
    /// [row GFRM only]
    /// fusion.local = none
    /// ```
    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut base_text = String::new();
        if let Some(e) = entries.iter().find(|e| e.section.is_none() && e.key == "base") {
            let p = dir.join(&e.value);
            base_text = fs::read_to_string(&p)
                .map_err(|err| Error::Config(format!("grid base {}: {err}", p.display())))?;
        }
        let base_dir = entries
            .iter()
            .find(|e| e.section.is_none() && e.key == "base")
            .and_then(|e| dir.join(&e.value).parent().map(Path::to_path_buf))
            .unwrap_or_else(|| dir.to_path_buf());
        let mut base = TrainConfig::parse_with_base(&base_text, &base_dir)?;
        let mut title = String::from("Ablation");
        let mut rows: Vec<GridRow> = Vec::new();
        for e in &entries {
            let fail = |err: Error| match err {
                Error::Config(m) => Error::Config(format!("grid line {}: {m}", e.line)),
                other => other,
            };
            match e.section.as_deref().and_then(|s| s.strip_prefix("row")) {
                Some(label) => {
                    let label = label.trim();
                    if label.is_empty() {
                        return Err(Error::Config(format!("grid line {}: row needs a label", e.line)));
                    }
                    // Section keys are not prefixed for rows; validate eagerly.
                    base.clone().set_with_base(&e.key, &e.value, dir).map_err(fail)?;
                    match rows.iter_mut().find(|r| r.label == label) {
                        Some(r) => r.overrides.push((e.key.clone(), e.value.clone())),
                        None => rows.push(GridRow {
                            label: label.to_string(),
                            overrides: vec![(e.key.clone(), e.value.clone())],
                        }),
                    }
                }
                None => match e.key.as_str() {
                    "title" => title = e.value.clone(),
                    "base" => {}
                    "preset" => rows.extend(preset_rows(&e.value)?),
                    "epochs" => base.set("train.epochs", &e.value).map_err(fail)?,
                    _ => base.set_with_base(&e.key, &e.value, dir).map_err(fail)?,
                },
            }
        }
        if rows.is_empty() {
            return Err(Error::Config("grid has no rows".into()));
        }
        base.validate()?;
        Ok(GridSpec { title, base, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read grid {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The base config with one row's overrides applied.
    pub fn row_config(&self, row: &GridRow) -> Result<TrainConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in &row.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub label: String,
    pub sharing: String,
    pub gfe: bool,
    pub lfe: bool,
    pub fusion: String,
    pub params: usize,
    pub backbone_params: usize,
    pub miou: Option<f64>,
    pub pixel_acc: f64,
    pub final_loss: f64,
    pub wall_secs: f64,
}

/// Trains every row. Rows sharing a data configuration reuse the loaded data.
pub fn run_ablation_grid(spec: &GridSpec, out_dir: Option<&Path>, verbose: bool) -> Result<Vec<GridResult>> {
    let mut cache: Vec<(String, TrainData)> = Vec::new();
    let mut results = Vec::with_capacity(spec.rows.len());
    for (i, row) in spec.rows.iter().enumerate() {
        let cfg = spec.row_config(row)?;
        let key = format!("{:?}|{}", cfg.data, cfg.model.num_classes);
        let idx = match cache.iter().position(|(k, _)| *k == key) {
            Some(idx) => idx,
            None => {
                cache.push((key, load_data(&cfg)?));
                cache.len() - 1
            }
        };
        if verbose {
            eprintln!("[{}/{}] {}", i + 1, spec.rows.len(), row.label);
        }
        let opts = RunOptions {
            out_dir: out_dir.map(|d| d.join(format!("row{:02}", i + 1))),
            verbose,
            ..RunOptions::default()
        };
        let outcome = train(&cfg, &cache[idx].1, opts)?;
        let e = &cfg.model.encoder;
        results.push(GridResult {
            label: row.label.clone(),
            sharing: e.sharing.name().to_string(),
            gfe: e.gfe,
            lfe: e.lfe,
            fusion: cfg.model.fusion.label(),
            params: outcome.model.count_parameters(None),
            backbone_params: outcome.model.count_parameters(Some(ParamGroup::Backbone)),
            miou: outcome.final_metrics.means.m_iou,
            pixel_acc: outcome.final_metrics.pixel_acc,
            final_loss: outcome.curves.last().map_or(f64::NAN, |r| r.train_loss),
            wall_secs: outcome.wall.as_secs_f64(),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("results.csv");
        fs::write(&csv_path, grid_csv(&results)?).map_err(|e| Error::io(&csv_path, e))?;
        let txt = dir.join("results.txt");
        fs::write(&txt, grid_table(&spec.title, &results)).map_err(|e| Error::io(&txt, e))?;
    }
    Ok(results)
}

pub const CSV_HEADER: [&str; 11] = [
    "label",
    "sharing",
    "gfe",
    "lfe",
    "fusion",
    "params",
    "backbone_params",
    "miou",
    "pixel_acc",
    "final_loss",
    "wall_secs",
];

pub fn grid_csv(results: &[GridResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(fail)?;
    for r in results {
        w.write_record([
            r.label.clone(),
            r.sharing.clone(),
            on_off(r.gfe).to_string(),
            on_off(r.lfe).to_string(),
            r.fusion.clone(),
            r.params.to_string(),
            r.backbone_params.to_string(),
            r.miou.map_or(String::new(), |v| v.to_string()),
            r.pixel_acc.to_string(),
            r.final_loss.to_string(),
            format!("{:.3}", r.wall_secs),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("csv: {e}")))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

/// Aligned text table, one row per variant.
pub fn grid_table(title: &str, results: &[GridResult]) -> String {
    let lw = results.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(7);
    let fw = results.iter().map(|r| r.fusion.chars().count()).max().unwrap_or(0).max(6);
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(
        s,
        "{} | {:<9} | GFE | LFE | {} | {:>9} | {:>10} | {:>8}",
        pad("Variant", lw),
        "Backbone",
        pad("Fusion", fw),
        "mIoU (%)",
        "#Params",
        "Time (s)"
    );
    let _ = writeln!(s, "{}", "-".repeat(lw + fw + 64));
    for r in results {
        let _ = writeln!(
            s,
            "{} | {:<9} |  {}  |  {}  | {} | {:>9} | {:>10} | {:>8.1}",
            pad(&r.label, lw),
            r.sharing,
            mark(r.gfe),
            mark(r.lfe),
            pad(&r.fusion, fw),
            r.miou.map_or("undef".into(), |v| format!("{:.2}", 100.0 * v)),
            r.params,
            r.wall_secs
        );
    }
    s
}

/// Exact trainable parameter count of `model`, optionally for one group.
pub fn count_parameters(model: &Segmenter, group: Option<ParamGroup>) -> usize {
    model.count_parameters(group)
}
