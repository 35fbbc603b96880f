use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{DataSource, TrainConfig};
use super::optim::{lr_at, optimizer_step, AdamState};
use crate::data::{
    augment, collate, generate_synthetic, load_dataset, resize_to_multiple_of_32, Batch, Dataset, GroundTruth,
    SamplePair,
};
use crate::decoder::{argmax, cross_entropy_loss};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, ConfusionMatrix, MetricOptions, MetricsReport};
use crate::model::Segmenter;
use crate::numerics::{Graph, Tensor4};

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Learning rate of the epoch's last step (before the group multiplier).
    pub lr: f64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub val_pixel_acc: f64,
    pub val_class_iou: Vec<Option<f64>>,
}

/// Training and validation sets resolved from a config.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Dataset,
    pub val: Option<Dataset>,
    /// Report for synthetic training data.
    pub ground_truth: Option<GroundTruth>,
}

impl TrainData {
    /// The validation set, or the training set when none is configured.
    pub fn eval_set(&self) -> &Dataset {
        self.val.as_ref().unwrap_or(&self.train)
    }
}

fn source(cfg: &TrainConfig, src: &DataSource, stream: u64) -> Result<(Dataset, Option<GroundTruth>)> {
    let ds = match src {
        DataSource::Dir(p) => return Ok((load_dataset(p)?, None)),
        DataSource::Synthetic(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.synthetic_seed);
            rng.set_stream(stream);
            generate_synthetic(&cfg.data.synthetic, *n, &mut rng)?
        }
    };
    Ok((ds.0, Some(ds.1)))
}

/// Loads or generates the configured data and checks it against the model's class count.
pub fn load_data(cfg: &TrainConfig) -> Result<TrainData> {
    let (train, ground_truth) = source(cfg, &cfg.data.train, 0)?;
    let val = match &cfg.data.val {
        Some(src) => Some(source(cfg, src, 1)?.0),
        None => None,
    };
    for ds in std::iter::once(&train).chain(val.as_ref()) {
        if ds.meta.num_classes != cfg.model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but model.num_classes = {}",
                ds.meta.num_classes, cfg.model.num_classes
            )));
        }
        if ds.is_empty() {
            return Err(Error::Format("dataset is empty".into()));
        }
    }
    Ok(TrainData {
        train,
        val,
        ground_truth,
    })
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `last.ckpt`, `best.ckpt`, `curves.csv` and `metrics.json`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Return after this many completed epochs (as if interrupted).
    pub stop_after_epoch: Option<usize>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Segmenter,
    pub curves: Vec<EpochRecord>,
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub final_metrics: MetricsReport,
    pub steps: u64,
    pub wall: Duration,
}

fn zero_x(batch: &mut Batch) {
    batch.x = Tensor4::zeros(batch.x.shape());
}

/// Confusion matrix and metrics of `model` over `ds` (samples snapped to multiples of 32).
pub fn evaluate(
    model: &Segmenter,
    ds: &Dataset,
    zero_x_input: bool,
    batch_size: usize,
    opts: MetricOptions,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    let k = model.config.num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let prepared: Vec<SamplePair> = ds.pairs.iter().map(resize_to_multiple_of_32).collect();
    let mut i = 0;
    while i < prepared.len() {
        let dims = (prepared[i].rgb.height, prepared[i].rgb.width, prepared[i].x.channels);
        let mut j = i + 1;
        while j < prepared.len()
            && j - i < batch_size.max(1)
            && (prepared[j].rgb.height, prepared[j].rgb.width, prepared[j].x.channels) == dims
        {
            j += 1;
        }
        let refs: Vec<&SamplePair> = prepared[i..j].iter().collect();
        let mut batch = collate(&refs)?;
        if zero_x_input {
            zero_x(&mut batch);
        }
        let pred = argmax(&model.logits(&batch.rgb, &batch.x)?);
        cm.accumulate(&pred, &batch.labels.data, ds.meta.ignore_id)?;
        i = j;
    }
    let report = compute_metrics(&cm, opts)?;
    Ok((cm, report))
}

/// Steps per epoch and the schedule length for `n` training samples.
pub fn schedule(cfg: &TrainConfig, n: usize) -> (u64, u64) {
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    (per_epoch, cfg.max_steps.map_or(total, |m| m.min(total)))
}

fn write_curves(path: &Path, curves: &[EpochRecord], k: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut header: Vec<String> = ["epoch", "steps", "lr", "train_loss", "val_miou", "val_pixel_acc"]
        .map(String::from)
        .to_vec();
    header.extend((0..k).map(|c| format!("iou_class{c}")));
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(fail)?;
    for r in curves {
        let mut row = vec![
            r.epoch.to_string(),
            r.steps.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            opt(r.val_miou),
            r.val_pixel_acc.to_string(),
        ];
        row.extend(r.val_class_iou.iter().map(|&v| opt(v)));
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn sample_rng(epoch_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Runs (or resumes) the configured schedule. Fully determined by the config and data.
pub fn train(cfg: &TrainConfig, data: &TrainData, opts: RunOptions) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let mut model = Segmenter::new(&cfg.model, cfg.seed)?;
    data.train.validate()?;
    if data.train.meta.num_classes != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but model.num_classes = {}",
            data.train.meta.num_classes, cfg.model.num_classes
        )));
    }
    let n = data.train.len();
    if n == 0 {
        return Err(Error::Format("training set is empty".into()));
    }
    let (_, total) = schedule(cfg, n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut state = AdamState::new(&model.params);
    let mut curves = Vec::new();
    let mut best_miou: Option<f64> = None;
    let mut start_epoch = 0;
    if let Some(ck) = &opts.resume {
        if ck.config_hash != cfg.hash() {
            return Err(Error::Config("checkpoint was written with a different configuration".into()));
        }
        let store = ck.param_store(&model.params)?;
        model.load_params(&store)?;
        state = ck.optimizer.clone();
        rng = ck.rng.clone();
        curves = ck.curves.clone();
        best_miou = ck.best_miou;
        start_epoch = ck.epoch;
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut best: Option<Checkpoint> = None;
    let mut last: Option<Checkpoint> = None;
    let mut final_metrics = None;
    let eval_set = data.eval_set();
    for epoch in start_epoch..cfg.epochs {
        if state.step >= total {
            break;
        }
        let epoch_seed: u64 = rng.gen();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

        let (mut loss_sum, mut loss_n, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= total {
                break;
            }
            let samples = chunk
                .iter()
                .map(|&i| {
                    let pair = &data.train.pairs[i];
                    if cfg.data.augment {
                        augment(pair, &mut sample_rng(epoch_seed, i), &cfg.augment)
                    } else {
                        Ok(resize_to_multiple_of_32(pair))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let mut batch = collate(&samples.iter().collect::<Vec<_>>())?;
            if cfg.data.zero_x {
                zero_x(&mut batch);
            }
            let grads = {
                let mut g = Graph::new(&model.params);
                let r = g.input(batch.rgb);
                let x = g.input(batch.x);
                let logits = model.forward(&mut g, r, x)?;
                let loss = cross_entropy_loss(&mut g, logits, &batch.labels)?;
                let lv = g.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::NonFinite("loss".into()));
                }
                loss_sum += lv;
                loss_n += 1;
                g.backward(loss)?;
                g.param_gradients()
            };
            lr = lr_at(state.step, total, cfg.optim.base_lr, cfg.optim.poly_power);
            optimizer_step(&mut model.params, &grads, &mut state, &cfg.optim, lr)?;
        }

        let (_, report) = evaluate(&model, eval_set, cfg.data.zero_x, cfg.batch_size.max(4), cfg.metrics)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            steps: state.step,
            lr,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            val_miou: report.means.m_iou,
            val_pixel_acc: report.pixel_acc,
            val_class_iou: report.classes.iter().map(|c| c.iou).collect(),
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  step {:>6}/{}  lr {:.3e}  loss {:.4}  val mIoU {}  pixel acc {:.4}",
                record.epoch,
                record.steps,
                total,
                record.lr,
                record.train_loss,
                record.val_miou.map_or("undef".into(), |v| format!("{v:.4}")),
                record.val_pixel_acc
            );
        }
        let improved = match (record.val_miou, best_miou) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best_miou = record.val_miou;
        }
        curves.push(record);
        let ck = Checkpoint::capture(cfg, &model.params, &state, epoch + 1, &rng, &curves, best_miou);
        if let Some(dir) = &opts.out_dir {
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
            write_curves(&dir.join("curves.csv"), &curves, cfg.model.num_classes)?;
            let p = dir.join("metrics.json");
            fs::write(&p, report.to_json()).map_err(|e| Error::io(&p, e))?;
        }
        if improved {
            best = Some(ck.clone());
        }
        last = Some(ck);
        final_metrics = Some(report);
        if opts.stop_after_epoch == Some(epoch + 1) {
            break;
        }
    }

    let (last, final_metrics) = match (last, final_metrics) {
        (Some(l), Some(m)) => (l, m),
        // Nothing left to run (resumed at the end): report the restored state.
        _ => (
            Checkpoint::capture(cfg, &model.params, &state, start_epoch, &rng, &curves, best_miou),
            evaluate(&model, eval_set, cfg.data.zero_x, cfg.batch_size.max(4), cfg.metrics)?.1,
        ),
    };
    Ok(TrainOutcome {
        model,
        steps: state.step,
        curves,
        last,
        best,
        final_metrics,
        wall: started.elapsed(),
    })
}
