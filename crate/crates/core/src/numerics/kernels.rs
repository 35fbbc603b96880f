//! Raw loops behind the differentiable ops. Everything here works on flat
//! channel-last buffers and is deterministic (fixed summation order).

use super::tensor::Shape;

/// Convolution hyper-parameters. Weights are laid out `[kh, kw, in/groups, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        ConvSpec {
            kh: 1,
            kw: 1,
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }

    /// Square kernel, stride 1, "same" padding.
    pub fn same(k: usize) -> Self {
        ConvSpec {
            kh: k,
            kw: k,
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::same(k)
        }
    }

    /// Non-overlapping `k`x`k` patches (stride `k`, no padding).
    pub fn patchify(k: usize) -> Self {
        ConvSpec {
            kh: k,
            kw: k,
            stride: k,
            padding: 0,
            groups: 1,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }
}

pub(crate) struct ConvGeom {
    pub x: Shape,
    pub y: Shape,
    pub spec: ConvSpec,
    pub cin_g: usize,
    pub cout_g: usize,
}

impl ConvGeom {
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.spec.stride + k) as isize - self.spec.padding as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    fn depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>, y: &mut [f64]) {
    let [bn, oh, ow, cout] = g.y;
    let [_, ih, iw, cin] = g.x;
    let ConvSpec { kh, kw, groups, .. } = g.spec;
    for b in 0..bn {
        for oy in 0..oh {
            for ox in 0..ow {
                let yo = ((b * oh + oy) * ow + ox) * cout;
                let out = &mut y[yo..yo + cout];
                match bias {
                    Some(bv) => out.copy_from_slice(bv),
                    None => out.fill(0.0),
                }
                for ky in 0..kh {
                    let Some(iy) = g.src(oy, ky, ih) else { continue };
                    for kx in 0..kw {
                        let Some(ix) = g.src(ox, kx, iw) else { continue };
                        let xo = ((b * ih + iy) * iw + ix) * cin;
                        let xp = &x[xo..xo + cin];
                        let wk = (ky * kw + kx) * g.cin_g * cout;
                        if g.depthwise() {
                            let wr = &w[wk..wk + cout];
                            for ((o, &xv), &wv) in out.iter_mut().zip(xp).zip(wr) {
                                *o += xv * wv;
                            }
                            continue;
                        }
                        for grp in 0..groups {
                            let o_lo = grp * g.cout_g;
                            let og = &mut out[o_lo..o_lo + g.cout_g];
                            for ci in 0..g.cin_g {
                                let xv = xp[grp * g.cin_g + ci];
                                let wr = &w[wk + ci * cout + o_lo..wk + ci * cout + o_lo + g.cout_g];
                                for (o, &wv) in og.iter_mut().zip(wr) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for upstream gradient `gy`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let [bn, oh, ow, cout] = g.y;
    let [_, ih, iw, cin] = g.x;
    let ConvSpec { kh, kw, groups, .. } = g.spec;
    if let Some(gb) = gb {
        for row in gy.chunks_exact(cout) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    for b in 0..bn {
        for oy in 0..oh {
            for ox in 0..ow {
                let yo = ((b * oh + oy) * ow + ox) * cout;
                let gout = &gy[yo..yo + cout];
                for ky in 0..kh {
                    let Some(iy) = g.src(oy, ky, ih) else { continue };
                    for kx in 0..kw {
                        let Some(ix) = g.src(ox, kx, iw) else { continue };
                        let xo = ((b * ih + iy) * iw + ix) * cin;
                        let wk = (ky * kw + kx) * g.cin_g * cout;
                        if g.depthwise() {
                            if let Some(gx) = gx.as_deref_mut() {
                                let gxp = &mut gx[xo..xo + cin];
                                let wr = &w[wk..wk + cout];
                                for ((a, &gv), &wv) in gxp.iter_mut().zip(gout).zip(wr) {
                                    *a += gv * wv;
                                }
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                let gwr = &mut gw[wk..wk + cout];
                                let xp = &x[xo..xo + cin];
                                for ((a, &gv), &xv) in gwr.iter_mut().zip(gout).zip(xp) {
                                    *a += gv * xv;
                                }
                            }
                            continue;
                        }
                        for grp in 0..groups {
                            let o_lo = grp * g.cout_g;
                            let go = &gout[o_lo..o_lo + g.cout_g];
                            for ci in 0..g.cin_g {
                                let xi = xo + grp * g.cin_g + ci;
                                let wr_lo = wk + ci * cout + o_lo;
                                if let Some(gx) = gx.as_deref_mut() {
                                    let wr = &w[wr_lo..wr_lo + g.cout_g];
                                    let s: f64 = go.iter().zip(wr).map(|(a, b)| a * b).sum();
                                    gx[xi] += s;
                                }
                                if let Some(gw) = gw.as_deref_mut() {
                                    let xv = x[xi];
                                    for (a, &gv) in gw[wr_lo..wr_lo + g.cout_g].iter_mut().zip(go) {
                                        *a += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Strided matrix view: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub rs: usize,
    pub cs: usize,
}

/// `c[m x n] += a[m x k] * b[k x n]`, with `c` dense row-major.
pub(crate) fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], av: MatView, b: &[f64], bv: MatView, c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * av.rs + p * av.cs];
            if aip == 0.0 {
                continue;
            }
            if bv.cs == 1 {
                let brow = &b[p * bv.rs..p * bv.rs + n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            } else {
                for (j, cv) in crow.iter_mut().enumerate() {
                    *cv += aip * b[p * bv.rs + j * bv.cs];
                }
            }
        }
    }
}

/// Source taps for half-pixel bilinear resampling along one axis.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}
