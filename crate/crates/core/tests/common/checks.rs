//! Whole suites of comparisons, each returning named measurements so both the
//! per-module tests and the acceptance runner can consume them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgbx_core::decoder::{cross_entropy_loss, Decoder, LabelMask, IGNORE_ID};
use rgbx_core::encoder::{GlobalEnhancer, LocalExtractor, Pyramid};
use rgbx_core::eval::{compute_metrics, ConfusionMatrix, MetricOptions};
use rgbx_core::fusion::{AxisConv, FeatureIntegration, FusionConfig, FusionStage, GlobalRecalibration, LocalFusion};
use rgbx_core::numerics::gradcheck::{randomize_params, GradCheck, GradCheckReport};
use rgbx_core::numerics::{ConvSpec, Gradients, ParamKind, Var};
use rgbx_core::train::{lr_at, optimizer_step, AdamState, OptimConfig};
use rgbx_core::{Graph, ModelConfig, ParamGroup, ParamId, ParamStore, Segmenter, Tensor4};

use super::*;

/// Forward pass of `f` on fresh graph inputs.
pub fn run(store: &ParamStore, inputs: &[&Tensor4], f: impl FnOnce(&mut Graph<'_>, &[Var]) -> rgbx_core::Result<Var>) -> Tensor4 {
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.value(out).clone()
}

pub fn run2(
    store: &ParamStore,
    inputs: &[&Tensor4],
    f: impl FnOnce(&mut Graph<'_>, &[Var]) -> rgbx_core::Result<(Var, Var)>,
) -> (Tensor4, Tensor4) {
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let (a, b) = f(&mut g, &vars).expect("forward");
    (g.value(a).clone(), g.value(b).clone())
}

pub fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn set_scalar(store: &mut ParamStore, id: ParamId, v: f64) {
    store.value_mut(id).data_mut()[0] = v;
}

// ---- module oracles ----------------------------------------------------------

pub fn gfe(c: usize, heads: usize) -> (ParamStore, GlobalEnhancer) {
    let (mut store, m) = build(ParamGroup::Gfe, "gfe", |b| GlobalEnhancer::new(b, c, heads));
    randomize_params(&mut store, 0.5, 3);
    (store, m)
}

pub fn gfe_oracle(store: &ParamStore, m: &GlobalEnhancer, f: &Tensor4) -> Tensor4 {
    let q = apply_conv(store, &m.q, f);
    let k = apply_conv(store, &m.k, f);
    let v = apply_conv(store, &m.v, f);
    let d = f.shape()[3] / m.heads;
    let att = attention_loop(&q, &k, &v, m.heads, 1.0 / (d as f64).sqrt());
    apply_norm(store, &m.norm, &add(&att, f))
}

pub fn lfe(c: usize, e: usize) -> (ParamStore, LocalExtractor) {
    let (mut store, m) = build(ParamGroup::Lfe, "lfe", |b| LocalExtractor::new(b, c, e));
    randomize_params(&mut store, 0.5, 4);
    (store, m)
}

pub fn lfe_oracle(store: &ParamStore, m: &LocalExtractor, f: &Tensor4) -> Tensor4 {
    let y = relu(&apply_conv(store, &m.expand, f));
    let y = relu(&apply_conv(store, &m.dw, &y));
    add(&apply_conv(store, &m.project, &y), f)
}

pub fn gfrm(c: usize) -> (ParamStore, GlobalRecalibration) {
    let (mut store, m) = build(ParamGroup::Fusion, "gfrm", |b| GlobalRecalibration::new(b, c));
    randomize_params(&mut store, 0.5, 5);
    set_scalar(&mut store, m.kappa, 0.7);
    set_scalar(&mut store, m.gamma, -0.4);
    (store, m)
}

pub fn cross_attend_oracle(store: &ParamStore, m: &GlobalRecalibration, gr: &Tensor4, gx: &Tensor4) -> (Tensor4, Tensor4) {
    let qr = apply_conv(store, &m.q_rgb, gr);
    let kr = apply_conv(store, &m.k_rgb, gr);
    let vr = apply_conv(store, &m.v_rgb, gr);
    let qx = apply_conv(store, &m.q_x, gx);
    let kx = apply_conv(store, &m.k_x, gx);
    let vx = apply_conv(store, &m.v_x, gx);
    let kappa = store.value(m.kappa).data()[0];
    let gamma = store.value(m.gamma).data()[0];
    let ar = attention_loop(&qr, &kx, &vr, 1, 1.0).map(|v| v * kappa);
    let ax = attention_loop(&qx, &kr, &vx, 1, 1.0).map(|v| v * gamma);
    (add(&ar, gr), add(&ax, gx))
}

pub fn fuse_oracle(store: &ParamStore, m: &GlobalRecalibration, gr: &Tensor4, gx: &Tensor4) -> Tensor4 {
    let cat = concat_channels(gr, gx);
    apply_norm(store, &m.norm, &relu(&apply_conv(store, &m.reduce, &cat)))
}

pub fn channel_attend_oracle(store: &ParamStore, m: &GlobalRecalibration, fc: &Tensor4) -> Tensor4 {
    let z = spatial_mean(fc);
    let gate = apply_conv(store, &m.channel, &z).map(sigmoid_scalar);
    add(&broadcast_mul(fc, &gate), fc)
}

pub fn lffm(c: usize, duplicate: bool) -> (ParamStore, LocalFusion) {
    let (mut store, m) = build(ParamGroup::Fusion, "lffm", |b| LocalFusion::new(b, c, duplicate));
    randomize_params(&mut store, 0.5, 6);
    (store, m)
}

pub fn lffm_oracle(store: &ParamStore, m: &LocalFusion, lr: &Tensor4, lx: &Tensor4) -> Tensor4 {
    let cat = concat_channels(lr, lx);
    let h = match &m.expand {
        Some(conv) => apply_conv(store, conv, &cat),
        None => concat_channels(&cat, &cat),
    };
    let h = apply_conv(store, &m.dw, &h);
    let half = h.shape()[3] / 2;
    let hm = channel_range(&h, 0, half);
    let hn = channel_range(&h, half, half).map(gelu_scalar);
    apply_conv(store, &m.out, &mul(&hm, &hn))
}

pub fn feim(c: usize, interact: bool) -> (ParamStore, FeatureIntegration) {
    let (mut store, m) = build(ParamGroup::Fusion, "feim", |b| FeatureIntegration::new(b, c, interact));
    randomize_params(&mut store, 0.8, 7);
    (store, m)
}

/// Pools rows and columns, runs the 1x1 conv position by position, and rescales.
pub fn feim_oracle(store: &ParamStore, m: &FeatureIntegration, fg: &Tensor4, fl: Option<&Tensor4>) -> Tensor4 {
    let fs = match fl {
        Some(l) => add(fg, l),
        None => fg.clone(),
    };
    let [b, h, w, c] = fs.shape();
    let pw = |wt: &Tensor4, bias: &Tensor4, z: &[f64]| -> Vec<f64> {
        (0..c)
            .map(|o| {
                let mut acc = bias.at(0, 0, 0, o);
                for (ci, zc) in z.iter().enumerate() {
                    acc += wt.at(0, 0, ci, o) * zc;
                }
                sigmoid_scalar(acc)
            })
            .collect()
    };
    let (rows, cols) = match &m.conv {
        AxisConv::Shared(conv) => (conv, conv),
        AxisConv::Separate { rows, cols } => (rows, cols),
    };
    let mut out = Tensor4::zeros([b, h, w, c]);
    for bi in 0..b {
        let mut gh = Vec::new();
        for i in 0..h {
            let z: Vec<f64> = (0..c)
                .map(|k| (0..w).map(|j| fs.at(bi, i, j, k)).sum::<f64>() / w as f64)
                .collect();
            gh.push(pw(store.value(rows.weight), store.value(rows.bias.unwrap()), &z));
        }
        let mut gw = Vec::new();
        for j in 0..w {
            let z: Vec<f64> = (0..c)
                .map(|k| (0..h).map(|i| fs.at(bi, i, j, k)).sum::<f64>() / h as f64)
                .collect();
            gw.push(pw(store.value(cols.weight), store.value(cols.bias.unwrap()), &z));
        }
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out.set(bi, i, j, k, fs.at(bi, i, j, k) * gh[i][k] * gw[j][k]);
                }
            }
        }
    }
    out
}

pub fn decoder(channels: [usize; 4], k: usize) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = Decoder::new(&mut store, &mut rng, channels, k).unwrap();
    randomize_params(&mut store, 0.5, 8);
    (store, d)
}

/// Labels with roughly one in five pixels ignored.
pub fn random_labels(n: usize, k: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| if rng.gen_bool(0.2) { IGNORE_ID } else { rng.gen_range(0..k as u8) })
        .collect()
}

// ---- fidelity suite -------------------------------------------------------------

/// Every oracle comparison on small tensors: (name, normwise relative error).
pub fn fidelity_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    // depthwise conv
    {
        let x = rand_tensor([2, 3, 3, 2], 1);
        let w = rand_tensor([3, 3, 1, 2], 2);
        let b = rand_tensor([1, 1, 1, 2], 3);
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone(), ParamGroup::Backbone, ParamKind::Weight).unwrap();
        let bid = store.add("b", b.clone(), ParamGroup::Backbone, ParamKind::Bias).unwrap();
        let spec = ConvSpec::depthwise(3, 2);
        let y = run(&store, &[&x], |g, v| {
            let (w, b) = (g.param(wid), g.param(bid));
            g.conv2d(v[0], w, Some(b), spec)
        });
        out.push(("conv2d depthwise 3x3", rel_err(&y, &conv_loop(&x, &w, Some(&b), spec))));
    }
    // strided grouped conv at the size limit
    {
        let x = rand_tensor([2, 8, 8, 8], 4);
        let w = rand_tensor([2, 2, 4, 8], 5);
        let spec = ConvSpec { kh: 2, kw: 2, stride: 2, padding: 0, groups: 2 };
        let mut store = ParamStore::new();
        let wid = store.add("w", w.clone(), ParamGroup::Backbone, ParamKind::Weight).unwrap();
        let y = run(&store, &[&x], |g, v| {
            let w = g.param(wid);
            g.conv2d(v[0], w, None, spec)
        });
        out.push(("conv2d grouped stride 2", rel_err(&y, &conv_loop(&x, &w, None, spec))));
    }
    // layer norm
    {
        let x = rand_tensor([1, 2, 2, 4], 6);
        let gamma = rand_tensor([1, 1, 1, 4], 7);
        let beta = rand_tensor([1, 1, 1, 4], 8);
        let y = run(&ParamStore::new(), &[&x, &gamma, &beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6));
        out.push(("layer norm", rel_err(&y, &layer_norm_loop(&x, &gamma, &beta, 1e-6))));
    }
    // gelu(1) against x * Phi(x) by quadrature
    {
        let y = run(&ParamStore::new(), &[&Tensor4::scalar(1.0)], |g, v| Ok(g.gelu(v[0])));
        let reference = normal_cdf_quadrature(1.0, 2000);
        out.push(("gelu(1) vs quadrature", (y.data()[0] - reference).abs() / reference));
    }
    // GFE: two tokens, one head; then a multi-head batch
    {
        let (store, m) = gfe(4, 1);
        let f = rand_tensor([1, 1, 2, 4], 9);
        let y = run(&store, &[&f], |g, v| m.forward(g, v[0]));
        out.push(("GFE attention, 2 tokens", rel_err(&y, &gfe_oracle(&store, &m, &f))));
        let (store, m) = gfe(8, 2);
        let f = rand_tensor([2, 4, 4, 8], 10);
        let y = run(&store, &[&f], |g, v| m.forward(g, v[0]));
        out.push(("GFE attention, 2 heads", rel_err(&y, &gfe_oracle(&store, &m, &f))));
    }
    // LFE composition
    {
        let (store, m) = lfe(4, 4);
        let f = rand_tensor([1, 4, 4, 4], 11);
        let y = run(&store, &[&f], |g, v| m.forward(g, v[0]));
        out.push(("LFE composition", rel_err(&y, &lfe_oracle(&store, &m, &f))));
    }
    // GFRM
    {
        let (store, m) = gfrm(4);
        for (label, shape) in [("GFRM cross-attention, 2 tokens", [1, 1, 2, 4]), ("GFRM cross-attention", [2, 4, 4, 4])] {
            let gr = rand_tensor(shape, 12);
            let gx = rand_tensor(shape, 13);
            let (yr, yx) = run2(&store, &[&gr, &gx], |g, v| m.cross_attend(g, v[0], v[1]));
            let (or, ox) = cross_attend_oracle(&store, &m, &gr, &gx);
            out.push((label, rel_err(&yr, &or).max(rel_err(&yx, &ox))));
        }
        let gr = rand_tensor([2, 4, 4, 4], 14);
        let gx = rand_tensor([2, 4, 4, 4], 15);
        let y = run(&store, &[&gr, &gx], |g, v| m.fuse(g, v[0], v[1]));
        out.push(("GFRM fuse composition", rel_err(&y, &fuse_oracle(&store, &m, &gr, &gx))));
        let fc = rand_tensor([2, 4, 4, 4], 16);
        let y = run(&store, &[&fc], |g, v| m.channel_attend(g, v[0]));
        out.push(("GFRM channel pooling", rel_err(&y, &channel_attend_oracle(&store, &m, &fc))));
        let y = run(&store, &[&gr, &gx], |g, v| m.forward(g, v[0], v[1]));
        let (or, ox) = cross_attend_oracle(&store, &m, &gr, &gx);
        let full = channel_attend_oracle(&store, &m, &fuse_oracle(&store, &m, &or, &ox));
        out.push(("GFRM end to end", rel_err(&y, &full)));
    }
    // LFFM, both variants
    {
        for (label, dup) in [("LFFM composition", false), ("LFFM duplication variant", true)] {
            let (store, m) = lffm(4, dup);
            let lr = rand_tensor([1, 4, 4, 4], 17);
            let lx = rand_tensor([1, 4, 4, 4], 18);
            let y = run(&store, &[&lr, &lx], |g, v| m.forward(g, v[0], v[1]));
            out.push((label, rel_err(&y, &lffm_oracle(&store, &m, &lr, &lx))));
        }
    }
    // FEIM, both variants
    {
        for (label, interact) in [("FEIM pooling/gating", true), ("FEIM separate axes", false)] {
            let (store, m) = feim(2, interact);
            let fg = rand_tensor([1, 3, 5, 2], 19);
            let fl = rand_tensor([1, 3, 5, 2], 20);
            let y = run(&store, &[&fg, &fl], |g, v| m.forward(g, v[0], Some(v[1])));
            out.push((label, rel_err(&y, &feim_oracle(&store, &m, &fg, Some(&fl)))));
        }
    }
    // bilinear upsampling and the loss
    {
        let x = rand_tensor([2, 3, 2, 3], 21);
        let y = run(&ParamStore::new(), &[&x], |g, v| Ok(g.upsample_bilinear(v[0], 4)));
        out.push(("bilinear x4", rel_err(&y, &bilinear_loop(&x, 4))));
        let logits = rand_tensor([2, 4, 4, 3], 22).map(|v| 3.0 * v);
        let labels = random_labels(32, 3, 23);
        let y = run(&ParamStore::new(), &[&logits], |g, v| g.cross_entropy(v[0], &labels, IGNORE_ID));
        let reference = cross_entropy_loop(&logits, &labels, IGNORE_ID);
        out.push(("cross-entropy", (y.data()[0] - reference).abs() / reference.abs()));
    }
    // metrics on random 8x8 masks
    {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let truth = random_labels(64, 3, 25);
        out.push(("metrics vs counting", metrics_mismatch(&pred, &truth, 3)));
    }
    // single optimizer step and the schedule
    {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor4::scalar(0.5), ParamGroup::Decoder, ParamKind::Weight).unwrap();
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Tensor4::scalar(1.0));
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut state = AdamState::new(&store);
        optimizer_step(&mut store, &grads, &mut state, &cfg, 0.1).unwrap();
        let (m, v) = (0.1 * 1.0, 0.001 * 1.0);
        let (mhat, vhat) = (m / (1.0 - 0.9), v / (1.0 - 0.999));
        let expected = 0.5 - 0.1 * mhat / (f64::sqrt(vhat) + 1e-8);
        out.push(("AdamW single step", (store.value(id).data()[0] - expected).abs() / expected.abs()));
        let expected = 0.01 * 0.5f64.powf(0.9);
        out.push(("poly schedule at half", (lr_at(500, 1000, 0.01, 0.9) - expected).abs() / expected));
    }
    out
}

/// Largest disagreement between `compute_metrics` and direct counting; 0 when exact.
pub fn metrics_mismatch(pred: &[u8], truth: &[u8], k: usize) -> f64 {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, truth, IGNORE_ID).unwrap();
    let report = compute_metrics(&cm, MetricOptions::default()).unwrap();
    let counts = count_loop(pred, truth, k, IGNORE_ID);
    let mut worst = 0.0f64;
    let cmp = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
    let mut ious = Vec::new();
    for (c, &(tp, fp, fn_)) in counts.iter().enumerate() {
        for t in 0..k {
            let direct = pred.iter().zip(truth).filter(|&(&p, &tr)| tr as usize == t && p as usize == c).count();
            worst = worst.max((cm.get(t, c) as f64 - direct as f64).abs());
        }
        let m = &report.classes[c];
        let iou = ratio(tp, tp + fp + fn_);
        worst = worst
            .max(cmp(m.iou, iou))
            .max(cmp(m.pre, ratio(tp, tp + fp)))
            .max(cmp(m.rec, ratio(tp, tp + fn_)))
            .max(cmp(m.fsc, ratio(2 * tp, 2 * tp + fp + fn_)));
        ious.extend(iou);
    }
    let miou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    worst.max(cmp(report.means.m_iou, miou))
}

// ---- gradient suite -------------------------------------------------------------

pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    let check = GradCheck::default();
    let mut out = Vec::new();

    let (mut store, m) = gfe(8, 2);
    let ids = all_ids(&store);
    let f = rand_tensor([1, 4, 4, 8], 30);
    out.push(("GFE", check.run(&mut store, &[f], &ids, |g, v| m.forward(g, v[0])).unwrap()));

    let (mut store, m) = lfe(4, 4);
    let ids = all_ids(&store);
    let f = rand_tensor([1, 4, 4, 4], 31);
    out.push(("LFE", check.run(&mut store, &[f], &ids, |g, v| m.forward(g, v[0])).unwrap()));

    let (mut store, m) = gfrm(4);
    let ids = all_ids(&store);
    let inputs = [rand_tensor([1, 4, 4, 4], 32), rand_tensor([1, 4, 4, 4], 33)];
    out.push((
        "GFRM (incl. kappa, gamma)",
        check.run(&mut store, &inputs, &ids, |g, v| m.forward(g, v[0], v[1])).unwrap(),
    ));

    let (mut store, m) = lffm(4, false);
    let ids = all_ids(&store);
    let inputs = [rand_tensor([1, 4, 4, 4], 34), rand_tensor([1, 4, 4, 4], 35)];
    out.push(("LFFM", check.run(&mut store, &inputs, &ids, |g, v| m.forward(g, v[0], v[1])).unwrap()));

    for (label, interact) in [("FEIM", true), ("FEIM separate axes", false)] {
        let (mut store, m) = feim(4, interact);
        let ids = all_ids(&store);
        let inputs = [rand_tensor([1, 3, 5, 4], 36), rand_tensor([1, 3, 5, 4], 37)];
        out.push((label, check.run(&mut store, &inputs, &ids, |g, v| m.forward(g, v[0], Some(v[1]))).unwrap()));
    }

    {
        let (mut store, m) = build(ParamGroup::Fusion, "stage", |b| FusionStage::new(b, 8, &FusionConfig::default()));
        randomize_params(&mut store, 0.5, 38);
        let ids = all_ids(&store);
        let inputs: Vec<Tensor4> = (0..4).map(|i| rand_tensor([1, 4, 4, 8], 40 + i)).collect();
        out.push((
            "MHFF block",
            check.run(&mut store, &inputs, &ids, |g, v| m.forward(g, v[0], v[1], v[2], v[3])).unwrap(),
        ));
    }

    {
        let channels = [4, 6, 8, 10];
        let (mut store, d) = decoder(channels, 3);
        let ids = all_ids(&store);
        let inputs: Vec<Tensor4> = (0..4)
            .map(|i| rand_tensor([1, 8 >> i, 8 >> i, channels[i]], 50 + i as u64))
            .collect();
        let labels = LabelMask::new(1, 32, 32, random_labels(1024, 3, 55)).unwrap();
        out.push((
            "decoder + loss",
            check
                .run(&mut store, &inputs, &ids, |g, v| {
                    let logits = d.forward(g, &Pyramid([v[0], v[1], v[2], v[3]]))?;
                    cross_entropy_loss(g, logits, &labels)
                })
                .unwrap(),
        ));
    }

    {
        let mut model = Segmenter::new(&ModelConfig::default(), 0).unwrap();
        randomize_params(&mut model.params, 0.2, 60);
        let ids = all_ids(&model.params);
        let inputs = [rand_tensor([1, 32, 32, 3], 61), rand_tensor([1, 32, 32, 3], 62)];
        // A 32x32 objective carries ~1e-14 round-off; at h = 1e-5 that alone is ~1e-9 of
        // slope noise against gradients near 1e-6. 3e-5 balances it against truncation.
        let probe = GradCheck { max_per_tensor: Some(4), step: 3e-5, ..GradCheck::default() };
        let net = model.clone();
        out.push((
            "end-to-end toy model",
            probe.run(&mut model.params, &inputs, &ids, |g, v| net.forward(g, v[0], v[1])).unwrap(),
        ));
    }
    out
}

// ---- exact identities -------------------------------------------------------------

/// Degenerate-parameter cases that must hold bit-exactly: (name, max abs deviation).
pub fn identity_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    {
        let (mut store, m) = gfrm(4);
        set_scalar(&mut store, m.kappa, 0.0);
        set_scalar(&mut store, m.gamma, 0.0);
        let gr = rand_tensor([2, 4, 4, 4], 70);
        let gx = rand_tensor([2, 4, 4, 4], 71);
        let (yr, yx) = run2(&store, &[&gr, &gx], |g, v| m.cross_attend(g, v[0], v[1]));
        out.push(("kappa = gamma = 0 => cross-attention is identity", yr.max_abs_diff(&gr).max(yx.max_abs_diff(&gx))));

        zero_params(&mut store, &m.channel.params());
        let fc = rand_tensor([2, 4, 4, 4], 72);
        let y = run(&store, &[&fc], |g, v| m.channel_attend(g, v[0]));
        out.push(("zero channel conv => 1.5x", y.max_abs_diff(&fc.map(|v| 1.5 * v))));
    }
    {
        let (mut store, m) = lfe(4, 4);
        let ids = all_ids(&store);
        zero_params(&mut store, &ids);
        let f = rand_tensor([2, 4, 4, 4], 73);
        let y = run(&store, &[&f], |g, v| m.forward(g, v[0]));
        out.push(("zeroed LFE => identity", y.max_abs_diff(&f)));
    }
    {
        let (mut store, m) = gfe(8, 2);
        for c in [&m.q, &m.k, &m.v] {
            zero_params(&mut store, &c.params());
        }
        let f = rand_tensor([2, 4, 4, 8], 74);
        let y = run(&store, &[&f], |g, v| m.forward(g, v[0]));
        let ln = run(&store, &[&f], |g, v| m.norm.forward(g, v[0]));
        out.push(("zeroed GFE attention => LayerNorm", y.max_abs_diff(&ln)));
    }
    for (label, interact) in [("zeroed FEIM => 0.25 scaling", true), ("zeroed FEIM (separate) => 0.25 scaling", false)] {
        let (mut store, m) = feim(4, interact);
        let ids = all_ids(&store);
        zero_params(&mut store, &ids);
        let fg = rand_tensor([2, 3, 5, 4], 75);
        let fl = rand_tensor([2, 3, 5, 4], 76);
        let y = run(&store, &[&fg, &fl], |g, v| m.forward(g, v[0], Some(v[1])));
        let fs = add(&fg, &fl);
        out.push((label, y.max_abs_diff(&fs.map(|v| 0.25 * v))));
    }
    {
        let (mut store, m) = lffm(4, false);
        let mut zeroed = m.expand.as_ref().unwrap().params();
        zeroed.extend(m.dw.bias);
        zero_params(&mut store, &zeroed);
        let lr = rand_tensor([1, 4, 4, 4], 77);
        let lx = rand_tensor([1, 4, 4, 4], 78);
        let y = run(&store, &[&lr, &lx], |g, v| m.forward(g, v[0], v[1]));
        let bias = store.value(m.out.bias.unwrap());
        let expected = Tensor4::from_fn(y.shape(), |[_, _, _, k]| bias.at(0, 0, 0, k));
        let dev = y.max_abs_diff(&expected);
        out.push(("zeroed LFFM fuse => output bias", dev));
    }
    out
}
