//! Explicit-loop reference implementations shared by the integration tests. Nothing
//! here goes through the tape: every oracle indexes tensors element by element.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgbx_core::numerics::layers::{Builder, Conv2d, LayerNorm};
use rgbx_core::numerics::{ConvSpec, ParamGroup, ParamId, Shape};
use rgbx_core::{ParamStore, Tensor4};

pub fn rand_tensor(shape: Shape, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Normwise relative error `max|a - b| / max|b|`.
pub fn rel_err(a: &Tensor4, b: &Tensor4) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.max_abs_diff(b) / scale
}

/// Builds one module into a fresh store.
pub fn build<T>(
    group: ParamGroup,
    prefix: &str,
    f: impl FnOnce(&mut Builder<'_, ChaCha8Rng>) -> rgbx_core::Result<T>,
) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let module = {
        let mut b = Builder::new(&mut store, &mut rng, group, prefix);
        f(&mut b).expect("module builds")
    };
    (store, module)
}

pub fn zero_params(store: &mut ParamStore, ids: &[ParamId]) {
    for &id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

pub fn conv_params(c: &Conv2d) -> Vec<ParamId> {
    c.params()
}

// ---- primitives ------------------------------------------------------------

pub fn conv_loop(x: &Tensor4, w: &Tensor4, bias: Option<&Tensor4>, spec: ConvSpec) -> Tensor4 {
    let [b, h, wd, cin] = x.shape();
    let [kh, kw, cpg, cout] = w.shape();
    let g = spec.groups;
    assert_eq!(cpg * g, cin);
    let opg = cout / g;
    let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    let mut y = Tensor4::zeros([b, oh, ow, cout]);
    for n in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..cout {
                    let grp = o / opg;
                    let mut acc = bias.map_or(0.0, |t| t.at(0, 0, 0, o));
                    for di in 0..kh {
                        for dj in 0..kw {
                            let yi = (i * spec.stride + di) as isize - spec.padding as isize;
                            let xj = (j * spec.stride + dj) as isize - spec.padding as isize;
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                continue;
                            }
                            for ci in 0..cpg {
                                acc += x.at(n, yi as usize, xj as usize, grp * cpg + ci) * w.at(di, dj, ci, o);
                            }
                        }
                    }
                    y.set(n, i, j, o, acc);
                }
            }
        }
    }
    y
}

pub fn apply_conv(store: &ParamStore, c: &Conv2d, x: &Tensor4) -> Tensor4 {
    conv_loop(x, store.value(c.weight), c.bias.map(|b| store.value(b)), c.spec)
}

pub fn layer_norm_loop(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4, eps: f64) -> Tensor4 {
    let [b, h, w, c] = x.shape();
    let mut y = Tensor4::zeros([b, h, w, c]);
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut mean = 0.0;
                for k in 0..c {
                    mean += x.at(n, i, j, k);
                }
                mean /= c as f64;
                let mut var = 0.0;
                for k in 0..c {
                    var += (x.at(n, i, j, k) - mean).powi(2);
                }
                var /= c as f64;
                for k in 0..c {
                    let v = (x.at(n, i, j, k) - mean) / (var + eps).sqrt();
                    y.set(n, i, j, k, gamma.at(0, 0, 0, k) * v + beta.at(0, 0, 0, k));
                }
            }
        }
    }
    y
}

pub fn apply_norm(store: &ParamStore, ln: &LayerNorm, x: &Tensor4) -> Tensor4 {
    layer_norm_loop(x, store.value(ln.gamma), store.value(ln.beta), ln.eps)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF by composite Simpson integration of the density on `[0, x]`.
pub fn normal_cdf_quadrature(x: f64, intervals: usize) -> f64 {
    let n = intervals + intervals % 2;
    let h = x / n as f64;
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(0.0) + pdf(x);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    0.5 + s * h / 3.0
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    zip(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    zip(a, b, |x, y| x * y)
}

fn zip(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    assert_eq!(a.shape(), b.shape());
    Tensor4::from_fn(a.shape(), |[n, i, j, k]| f(a.at(n, i, j, k), b.at(n, i, j, k)))
}

pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let [n, h, w, ca] = a.shape();
    let cb = b.shape()[3];
    Tensor4::from_fn([n, h, w, ca + cb], |[bi, i, j, k]| {
        if k < ca {
            a.at(bi, i, j, k)
        } else {
            b.at(bi, i, j, k - ca)
        }
    })
}

pub fn channel_range(x: &Tensor4, start: usize, len: usize) -> Tensor4 {
    let [n, h, w, _] = x.shape();
    Tensor4::from_fn([n, h, w, len], |[bi, i, j, k]| x.at(bi, i, j, start + k))
}

/// Multi-head `softmax(q k^T * scale) v` with tokens = spatial positions in row-major
/// order and heads = contiguous channel groups.
pub fn attention_loop(q: &Tensor4, k: &Tensor4, v: &Tensor4, heads: usize, scale: f64) -> Tensor4 {
    let [b, h, w, c] = q.shape();
    let n = h * w;
    let d = c / heads;
    let tok = |t: &Tensor4, bi: usize, p: usize, ch: usize| t.at(bi, p / w, p % w, ch);
    let mut out = Tensor4::zeros([b, h, w, c]);
    for bi in 0..b {
        for hd in 0..heads {
            for i in 0..n {
                let mut s = vec![0.0; n];
                for (j, sj) in s.iter_mut().enumerate() {
                    for e in 0..d {
                        *sj += tok(q, bi, i, hd * d + e) * tok(k, bi, j, hd * d + e);
                    }
                    *sj *= scale;
                }
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for e in 0..d {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += (s[j] - mx).exp() / z * tok(v, bi, j, hd * d + e);
                    }
                    out.set(bi, i / w, i % w, hd * d + e, acc);
                }
            }
        }
    }
    out
}

/// Spatial mean per (batch, channel), shaped `(B, 1, 1, C)`.
pub fn spatial_mean(x: &Tensor4) -> Tensor4 {
    let [b, h, w, c] = x.shape();
    Tensor4::from_fn([b, 1, 1, c], |[bi, _, _, k]| {
        let mut s = 0.0;
        for i in 0..h {
            for j in 0..w {
                s += x.at(bi, i, j, k);
            }
        }
        s / (h * w) as f64
    })
}

pub fn broadcast_mul(x: &Tensor4, gate: &Tensor4) -> Tensor4 {
    let gs = gate.shape();
    Tensor4::from_fn(x.shape(), |[bi, i, j, k]| {
        let gi = if gs[1] == 1 { 0 } else { i };
        let gj = if gs[2] == 1 { 0 } else { j };
        x.at(bi, i, j, k) * gate.at(bi, gi, gj, k)
    })
}

/// Half-pixel bilinear upsampling with edge clamping.
pub fn bilinear_loop(x: &Tensor4, factor: usize) -> Tensor4 {
    let [b, h, w, c] = x.shape();
    let src = |o: usize, len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    Tensor4::from_fn([b, h * factor, w * factor, c], |[bi, i, j, k]| {
        let (y0, y1, fy) = src(i, h);
        let (x0, x1, fx) = src(j, w);
        let v00 = x.at(bi, y0, x0, k);
        let v01 = x.at(bi, y0, x1, k);
        let v10 = x.at(bi, y1, x0, k);
        let v11 = x.at(bi, y1, x1, k);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    })
}

/// Mean negative log-likelihood over non-ignored pixels.
pub fn cross_entropy_loop(logits: &Tensor4, labels: &[u8], ignore: u8) -> f64 {
    let [b, h, w, k] = logits.shape();
    let (mut total, mut count) = (0.0, 0usize);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let lab = labels[(bi * h + i) * w + j];
                if lab == ignore {
                    continue;
                }
                let mut z = 0.0;
                for c in 0..k {
                    z += logits.at(bi, i, j, c).exp();
                }
                total -= (logits.at(bi, i, j, lab as usize).exp() / z).ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Per-class (tp, fp, fn) by scanning pixels directly.
pub fn count_loop(pred: &[u8], truth: &[u8], k: usize, ignore: u8) -> Vec<(u64, u64, u64)> {
    let mut out = vec![(0, 0, 0); k];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == ignore {
            continue;
        }
        if p == t {
            out[t as usize].0 += 1;
        } else {
            out[p as usize].1 += 1;
            out[t as usize].2 += 1;
        }
    }
    out
}
pub mod checks;
