//! Confusion-matrix metrics: per-class accuracy, precision, recall, IoU and F-score,
//! their class means, and JSON / text renderings.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[t * k + p]` = pixels with true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one batch. Truth pixels equal to `ignore` are skipped; predictions must all
    /// be valid class ids.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        if let Some(&p) = pred.iter().find(|&&p| p == ignore || p as usize >= self.k) {
            return Err(Error::Contract(format!(
                "prediction contains {p}, not a class id below {}",
                self.k
            )));
        }
        if let Some(&t) = truth.iter().find(|&&t| t != ignore && t as usize >= self.k) {
            return Err(Error::Format(format!("label {t} out of range for {} classes", self.k)));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != ignore {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Element-wise sum; used to combine per-worker matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("merging {}-class into {}-class matrix", other.k, self.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// How classes with a zero denominator enter the means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedPolicy {
    #[default]
    Exclude,
    ScoreZero,
}

/// What `acc` / `mAcc` denote.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AccDefinition {
    /// Per-class TP / (TP + FN); mAcc is its class mean.
    #[default]
    PerClass,
    /// Global correct / total; reported as both per-class placeholder and mAcc.
    Global,
}

impl AccDefinition {
    pub fn describe(self) -> &'static str {
        match self {
            AccDefinition::PerClass => "Acc = per-class TP/(TP+FN) (recall-style); mAcc = mean over classes",
            AccDefinition::Global => "Acc = global pixel accuracy, correct/total",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricOptions {
    pub undefined: UndefinedPolicy,
    pub acc: AccDefinition,
}

/// Per-class values; `None` marks a zero denominator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub pixels: u64,
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub iou: Option<f64>,
    pub fsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanMetrics {
    #[serde(rename = "mAcc")]
    pub m_acc: Option<f64>,
    #[serde(rename = "mPre")]
    pub m_pre: Option<f64>,
    #[serde(rename = "mRec")]
    pub m_rec: Option<f64>,
    #[serde(rename = "mIoU")]
    pub m_iou: Option<f64>,
    #[serde(rename = "mFsc")]
    pub m_fsc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc_definition: &'static str,
    pub undefined_policy: UndefinedPolicy,
    pub pixels: u64,
    pub pixel_acc: f64,
    pub classes: Vec<ClassMetrics>,
    pub means: MeanMetrics,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn mean(values: impl Iterator<Item = Option<f64>>, policy: UndefinedPolicy) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        match (v, policy) {
            (Some(v), _) => {
                sum += v;
                n += 1;
            }
            (None, UndefinedPolicy::ScoreZero) => n += 1,
            (None, UndefinedPolicy::Exclude) => {}
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Metrics with classes named by their index.
pub fn compute_metrics(cm: &ConfusionMatrix, opts: MetricOptions) -> Result<MetricsReport> {
    let names: Vec<String> = (0..cm.k).map(|c| format!("class{c}")).collect();
    compute_metrics_named(cm, &names, opts)
}

pub fn compute_metrics_named(cm: &ConfusionMatrix, names: &[String], opts: MetricOptions) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    if names.len() != cm.k {
        return Err(Error::Shape(format!("{} class names for {} classes", names.len(), cm.k)));
    }
    let correct: u64 = (0..cm.k).map(|c| cm.get(c, c)).sum();
    let pixel_acc = correct as f64 / total as f64;
    let classes: Vec<ClassMetrics> = (0..cm.k)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..cm.k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..cm.k).map(|t| cm.get(t, c)).sum();
            let (fn_, fp) = (row - tp, col - tp);
            let rec = ratio(tp, tp + fn_);
            ClassMetrics {
                name: names[c].clone(),
                pixels: row,
                acc: match opts.acc {
                    AccDefinition::PerClass => rec,
                    AccDefinition::Global => Some(pixel_acc),
                },
                pre: ratio(tp, tp + fp),
                rec,
                iou: ratio(tp, tp + fp + fn_),
                // Equals the harmonic mean of pre and rec whenever that is defined.
                fsc: ratio(2 * tp, 2 * tp + fp + fn_),
            }
        })
        .collect();
    let p = opts.undefined;
    let means = MeanMetrics {
        m_acc: match opts.acc {
            AccDefinition::PerClass => mean(classes.iter().map(|c| c.acc), p),
            AccDefinition::Global => Some(pixel_acc),
        },
        m_pre: mean(classes.iter().map(|c| c.pre), p),
        m_rec: mean(classes.iter().map(|c| c.rec), p),
        m_iou: mean(classes.iter().map(|c| c.iou), p),
        m_fsc: mean(classes.iter().map(|c| c.fsc), p),
    };
    Ok(MetricsReport {
        acc_definition: opts.acc.describe(),
        undefined_policy: p,
        pixels: total,
        pixel_acc,
        classes,
        means,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), |v| format!("{:.2}", 100.0 * v))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    /// Aligned-column table, values in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.acc_definition);
        let _ = writeln!(
            s,
            "# undefined classes: {}; pixels: {}; pixel acc: {:.2}",
            match self.undefined_policy {
                UndefinedPolicy::Exclude => "excluded from means",
                UndefinedPolicy::ScoreZero => "scored as zero",
            },
            self.pixels,
            100.0 * self.pixel_acc
        );
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(
            s,
            "{:<width$} {:>10} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "class", "pixels", "Acc", "Pre", "Rec", "IoU", "Fsc"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<width$} {:>10} {:>7} {:>7} {:>7} {:>7} {:>7}",
                c.name,
                c.pixels,
                cell(c.acc),
                cell(c.pre),
                cell(c.rec),
                cell(c.iou),
                cell(c.fsc)
            );
        }
        let m = &self.means;
        let _ = writeln!(
            s,
            "{:<width$} {:>10} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "mean",
            self.pixels,
            cell(m.m_acc),
            cell(m.m_pre),
            cell(m.m_rec),
            cell(m.m_iou),
            cell(m.m_fsc)
        );
        s
    }
}
