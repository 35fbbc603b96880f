use super::kernels::{self, ConvGeom, ConvSpec, MatView};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{numel, strides, Shape, Tensor4};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
}

/// Floor applied to the layer-norm epsilon so a zero-variance position never divides by zero.
pub const LAYER_NORM_EPS_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Act(Var, Activation),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Reshape(Var),
    Permute(Var, [usize; 4]),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean(Var),
    Sum(Var),
    UpsampleNearest { x: Var, factor: usize },
    UpsampleBilinear(Var),
    CrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

/// Tape of differentiable operations over [`Tensor4`] values.
///
/// Values are computed eagerly as ops are recorded; [`Graph::backward`] walks the tape
/// in reverse. Parameters are pulled from a [`ParamStore`] once per graph, so a layer
/// applied twice (weight sharing) feeds one leaf and its gradient accumulates.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Tensor4>>,
    train: bool,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `s` viewed inside broadcast shape `out` (zero on broadcast axes).
fn bcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = strides(&s);
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if s[i] == 1 && out[i] != 1 { 0 } else { st[i] };
    }
    r
}

fn for_each_bcast(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut i = 0;
    for d0 in 0..out[0] {
        for d1 in 0..out[1] {
            let (a1, b1) = (d0 * sa[0] + d1 * sa[1], d0 * sb[0] + d1 * sb[1]);
            for d2 in 0..out[2] {
                let (a2, b2) = (a1 + d2 * sa[2], b1 + d2 * sb[2]);
                for d3 in 0..out[3] {
                    f(i, a2 + d3 * sa[3], b2 + d3 * sb[3]);
                    i += 1;
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffer for `v`, created zeroed on first use.
fn slot<'a>(grads: &'a mut [Option<Tensor4>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor4::zeros(nodes[v.0].value.shape()))
        .data_mut()
}

impl<'p> Graph<'p> {
    /// Graph that tracks parameter gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grads: Vec::new(),
            train: true,
        }
    }

    /// Graph for evaluation: parameters are constants and no gradients are tracked.
    pub fn inference(params: &'p ParamStore) -> Self {
        Graph {
            train: false,
            ..Self::new(params)
        }
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let rg = self.train && p.trainable;
        let v = self.push(p.value.clone(), Op::Param, rg);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb)?;
        let (ta, tb) = (bcast_strides(sa, out), bcast_strides(sb, out));
        let mut y = vec![0.0; numel(&out)];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            for ((o, &x), &z) in y.iter_mut().zip(av).zip(bv) {
                *o = if mul { x * z } else { x + z };
            }
        } else {
            for_each_bcast(out, ta, tb, |i, ia, ib| {
                y[i] = if mul { av[ia] * bv[ib] } else { av[ia] + bv[ib] };
            });
        }
        let rg = self.rg(a) || self.rg(b);
        let op = if mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        Ok(self.push(Tensor4::from_vec(out, y)?, op, rg))
    }

    /// Elementwise sum with broadcasting over unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise (Hadamard) product with broadcasting over unit dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, factor), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Batched matrix product over the last two axes; the first two must agree.
    /// `ta`/`tb` transpose the respective operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] || sa[1] != sb[1] {
            return shape_err(format!("matmul batch mismatch {sa:?} vs {sb:?}"));
        }
        let (m, ka) = if ta { (sa[3], sa[2]) } else { (sa[2], sa[3]) };
        let (kb, n) = if tb { (sb[3], sb[2]) } else { (sb[2], sb[3]) };
        if ka != kb {
            return shape_err(format!("matmul inner mismatch {sa:?} vs {sb:?} (ta={ta}, tb={tb})"));
        }
        let out = [sa[0], sa[1], m, n];
        let mut y = vec![0.0; numel(&out)];
        let av = view(sa, ta);
        let bv = view(sb, tb);
        let (asz, bsz, csz) = (sa[2] * sa[3], sb[2] * sb[3], m * n);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..sa[0] * sa[1] {
            kernels::gemm_acc(
                m,
                n,
                ka,
                &ad[bi * asz..(bi + 1) * asz],
                av,
                &bd[bi * bsz..(bi + 1) * bsz],
                bv,
                &mut y[bi * csz..(bi + 1) * csz],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor4::from_vec(out, y)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let y = match kind {
            Activation::Relu => xv.map(|v| v.max(0.0)),
            Activation::Gelu => xv.map(gelu),
            Activation::Sigmoid => xv.map(sigmoid),
            Activation::Softmax => {
                let c = xv.shape()[3];
                let mut y = xv.clone();
                for row in y.data_mut().chunks_exact_mut(c) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                y
            }
        };
        let rg = self.rg(x);
        self.push(y, Op::Act(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softmax)
    }

    /// Normalizes over the channel axis at each (b, h, w) position, then applies the
    /// per-channel affine `gamma`, `beta` (both shaped `[1, 1, 1, C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let c = sx[3];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [1, 1, 1, c] {
                return shape_err(format!("layer_norm {name} {:?} for {c} channels", self.shape(v)));
            }
        }
        let eps = eps.max(LAYER_NORM_EPS_FLOOR);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let positions = numel(&sx) / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; positions];
        let mut y = vec![0.0; xv.len()];
        for p in 0..positions {
            let row = &xv[p * c..(p + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[p] = r;
            for j in 0..c {
                let xh = (row[j] - mean) * r;
                xhat[p * c + j] = xh;
                y[p * c + j] = gv[j] * xh + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor4::from_vec(sx, y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = self.conv_geom(x, w, b, spec)?;
        let mut y = vec![0.0; numel(&geom.y)];
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut y,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor4::from_vec(geom.y, y)?, Op::Conv2d { x, w, b, spec }, rg))
    }

    fn conv_geom(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<ConvGeom> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let cin = sx[3];
        let cout = sw[3];
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv groups {} must divide in ({cin}) and out ({cout}) channels",
                spec.groups
            )));
        }
        let cin_g = cin / spec.groups;
        if sw[0] != spec.kh || sw[1] != spec.kw || sw[2] != cin_g {
            return Err(Error::Config(format!(
                "conv weight {sw:?} does not match kernel {}x{}, {cin_g} in-channels per group",
                spec.kh, spec.kw
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, 1, 1, cout] {
                return Err(Error::Config(format!("conv bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let (oh, ow) = spec
            .out_dims(sx[1], sx[2])
            .ok_or_else(|| Error::Shape(format!("input {sx:?} too small for {spec:?}")))?;
        Ok(ConvGeom {
            x: sx,
            y: [sx[0], oh, ow, cout],
            spec,
            cin_g,
            cout_g: cout / spec.groups,
        })
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let y = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape(x), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return shape_err(format!("invalid permutation {perm:?}"));
            }
            seen[p] = true;
        }
        let sx = self.shape(x);
        let out: Shape = [sx[perm[0]], sx[perm[1]], sx[perm[2]], sx[perm[3]]];
        let st = strides(&sx);
        let ps = [st[perm[0]], st[perm[1]], st[perm[2]], st[perm[3]]];
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for_each_bcast(out, ps, [0; 4], |i, ia, _| y[i] = xv[ia]);
        let rg = self.rg(x);
        Ok(self.push(Tensor4::from_vec(out, y)?, Op::Permute(x, perm), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 3 {
            return shape_err("concat needs at least one part and axis < 4".into());
        }
        let s0 = self.shape(parts[0]);
        let mut out = s0;
        out[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            for i in 0..4 {
                if i != axis && s[i] != s0[i] {
                    return shape_err(format!("concat axis {axis}: {s:?} vs {s0:?}"));
                }
            }
            out[axis] += s[axis];
        }
        let outer: usize = out[..axis].iter().product();
        let inner: usize = out[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                y.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor4::from_vec(out, y)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis > 3 || len == 0 || start + len > sx[axis] {
            return shape_err(format!("slice axis {axis} [{start}, {}) of {sx:?}", start + len));
        }
        let mut out = sx;
        out[axis] = len;
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            let base = (o * sx[axis] + start) * inner;
            y.extend_from_slice(&xv[base..base + len * inner]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor4::from_vec(out, y)?, Op::Slice { x, axis, start }, rg))
    }

    /// Mean over the flagged axes, keeping them as unit dimensions.
    pub fn mean(&mut self, x: Var, axes: [bool; 4]) -> Var {
        let sx = self.shape(x);
        let mut out = sx;
        for i in 0..4 {
            if axes[i] {
                out[i] = 1;
            }
        }
        let count = (numel(&sx) / numel(&out)) as f64;
        let xv = self.value(x).data();
        let mut y = vec![0.0; numel(&out)];
        let ys = bcast_strides(out, sx);
        for_each_bcast(sx, strides(&sx), ys, |_, ix, iy| y[iy] += xv[ix]);
        for v in &mut y {
            *v /= count;
        }
        let rg = self.rg(x);
        self.push(Tensor4::from_vec(out, y).expect("mean shape"), Op::Mean(x), rg)
    }

    /// Sum of all elements as a `[1, 1, 1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor4::scalar(s), Op::Sum(x), rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let [b, h, w, c] = self.shape(x);
        let out = [b, h * factor, w * factor, c];
        let xv = self.value(x);
        let y = Tensor4::from_fn(out, |[bi, y, xx, ci]| xv.at(bi, y / factor, xx / factor, ci));
        let rg = self.rg(x);
        self.push(y, Op::UpsampleNearest { x, factor }, rg)
    }

    /// Bilinear resampling by an integer factor with half-pixel centers and edge clamping.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let [b, h, w, c] = self.shape(x);
        let out = [b, h * factor, w * factor, c];
        let ty = kernels::bilinear_taps(h, out[1]);
        let tx = kernels::bilinear_taps(w, out[2]);
        let xv = self.value(x);
        let mut y = Tensor4::zeros(out);
        let yd = y.data_mut();
        let mut o = 0;
        for bi in 0..b {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    for ci in 0..c {
                        let top = xv.at(bi, y0, x0, ci) * (1.0 - fx) + xv.at(bi, y0, x1, ci) * fx;
                        let bot = xv.at(bi, y1, x0, ci) * (1.0 - fx) + xv.at(bi, y1, x1, ci) * fx;
                        yd[o] = top * (1.0 - fy) + bot * fy;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(y, Op::UpsampleBilinear(x), rg)
    }

    /// Mean negative log-softmax over pixels whose label is not `ignore`.
    /// `labels` is indexed (b, h, w) and must match the logits' leading dimensions.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let s = self.shape(logits);
        let k = s[3];
        if labels.len() * k != numel(&s) {
            return shape_err(format!("{} labels for logits {s:?}", labels.len()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (p, &lab) in labels.iter().enumerate() {
            let row = &lv[p * k..(p + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[p * k + j] = (row[j] - mx).exp() / z;
            }
            if lab == ignore {
                continue;
            }
            if lab as usize >= k {
                return Err(Error::Contract(format!("label {lab} out of range for {k} classes")));
            }
            total += mx + z.ln() - row[lab as usize];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("cross entropy: every pixel is ignored".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor4::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor4::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor4> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter touched by this graph, after [`Graph::backward`].
    pub fn param_gradients(&self) -> Gradients {
        let mut out = Gradients::new(self.params.len());
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| self.grad(v)) {
                out.accumulate(ParamId(i), g);
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        let nodes = &self.nodes;
        let gd = g.data();
        let want = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::Add(a, b) | &Op::Mul(a, b) => {
                let mul = matches!(nodes[i].op, Op::Mul(..));
                let out = nodes[i].value.shape();
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (ta, tb) = (bcast_strides(sa, out), bcast_strides(sb, out));
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                for (v, other, sv, so) in [(a, bv, ta, tb), (b, av, tb, ta)] {
                    if !want(v) {
                        continue;
                    }
                    let ga = slot(grads, nodes, v);
                    for_each_bcast(out, sv, so, |k, iv, io| {
                        ga[iv] += if mul { gd[k] * other[io] } else { gd[k] };
                    });
                }
            }
            &Op::Scale(a, f) => {
                for (o, &gv) in slot(grads, nodes, a).iter_mut().zip(gd) {
                    *o += gv * f;
                }
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let sc = nodes[i].value.shape();
                let (m, n) = (sc[2], sc[3]);
                let k = if ta { sa[2] } else { sa[3] };
                let (asz, bsz, csz) = (sa[2] * sa[3], sb[2] * sb[3], m * n);
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let gc = MatView { rs: n, cs: 1 };
                if want(a) {
                    // dA_eff[m x k] = dC · B_eff^T, written back in A's storage layout.
                    let ga = slot(grads, nodes, a);
                    let bt = view_t(sb, tb);
                    for bi in 0..sa[0] * sa[1] {
                        let mut tmp = vec![0.0; m * k];
                        kernels::gemm_acc(m, k, n, &gd[bi * csz..], gc, &bd[bi * bsz..], bt, &mut tmp);
                        scatter(&mut ga[bi * asz..(bi + 1) * asz], &tmp, m, k, ta);
                    }
                }
                if want(b) {
                    // dB_eff[k x n] = A_eff^T · dC.
                    let gb = slot(grads, nodes, b);
                    let at = view_t(sa, ta);
                    for bi in 0..sa[0] * sa[1] {
                        let mut tmp = vec![0.0; k * n];
                        kernels::gemm_acc(k, n, m, &ad[bi * asz..], at, &gd[bi * csz..], gc, &mut tmp);
                        scatter(&mut gb[bi * bsz..(bi + 1) * bsz], &tmp, k, n, tb);
                    }
                }
            }
            &Op::Act(x, kind) => {
                let y = nodes[i].value.data();
                let xv = nodes[x.0].value.data();
                let gx = slot(grads, nodes, x);
                match kind {
                    Activation::Relu => {
                        for ((o, &gv), &xv) in gx.iter_mut().zip(gd).zip(xv) {
                            if xv > 0.0 {
                                *o += gv;
                            }
                        }
                    }
                    Activation::Gelu => {
                        for ((o, &gv), &xv) in gx.iter_mut().zip(gd).zip(xv) {
                            *o += gv * gelu_grad(xv);
                        }
                    }
                    Activation::Sigmoid => {
                        for ((o, &gv), &yv) in gx.iter_mut().zip(gd).zip(y) {
                            *o += gv * yv * (1.0 - yv);
                        }
                    }
                    Activation::Softmax => {
                        let c = nodes[i].value.shape()[3];
                        for ((go, gr), yr) in gx.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(y.chunks_exact(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                go[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[x.0].value.shape()[3];
                let gam = nodes[gamma.0].value.data();
                if want(*gamma) {
                    let gg = slot(grads, nodes, *gamma);
                    for (gr, xr) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if want(*beta) {
                    let gb = slot(grads, nodes, *beta);
                    for gr in gd.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] += gr[j];
                        }
                    }
                }
                if want(*x) {
                    let gx = slot(grads, nodes, *x);
                    let mut dxh = vec![0.0; c];
                    for (p, &r) in rstd.iter().enumerate() {
                        let gr = &gd[p * c..(p + 1) * c];
                        let xr = &xhat[p * c..(p + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gam[j];
                        }
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[p * c + j] += r * (dxh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            &Op::Conv2d { x, w, b, spec } => {
                let geom = self.conv_geom(x, w, b, spec).expect("validated at forward");
                let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                // Take the three buffers out so they can be borrowed mutably together.
                let mut gx = want(x).then(|| take(grads, nodes, x));
                let mut gw = want(w).then(|| take(grads, nodes, w));
                let mut gb = b.filter(|&b| want(b)).map(|b| take(grads, nodes, b));
                kernels::conv2d_backward(
                    &geom,
                    xv,
                    wv,
                    gd,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(Some(x), gx), (Some(w), gw), (b, gb)] {
                    if let (Some(v), Some(t)) = (v, t) {
                        grads[v.0] = Some(t);
                    }
                }
            }
            &Op::Reshape(x) => {
                for (o, &gv) in slot(grads, nodes, x).iter_mut().zip(gd) {
                    *o += gv;
                }
            }
            &Op::Permute(x, perm) => {
                let sx = nodes[x.0].value.shape();
                let out = nodes[i].value.shape();
                let st = strides(&sx);
                let ps = [st[perm[0]], st[perm[1]], st[perm[2]], st[perm[3]]];
                let gx = slot(grads, nodes, x);
                for_each_bcast(out, ps, [0; 4], |k, ix, _| gx[ix] += gd[k]);
            }
            Op::Concat { parts, axis } => {
                let out = nodes[i].value.shape();
                let outer: usize = out[..*axis].iter().product();
                let inner: usize = out[axis + 1..].iter().product();
                let mut off = 0;
                for o in 0..outer {
                    for &p in parts {
                        let len = nodes[p.0].value.shape()[*axis] * inner;
                        if want(p) {
                            let gp = slot(grads, nodes, p);
                            for (a, &gv) in gp[o * len..(o + 1) * len].iter_mut().zip(&gd[off..off + len]) {
                                *a += gv;
                            }
                        }
                        off += len;
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let sx = nodes[x.0].value.shape();
                let len = nodes[i].value.shape()[axis];
                let outer: usize = sx[..axis].iter().product();
                let inner: usize = sx[axis + 1..].iter().product();
                let gx = slot(grads, nodes, x);
                for o in 0..outer {
                    let base = (o * sx[axis] + start) * inner;
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    for (a, &gv) in gx[base..base + len * inner].iter_mut().zip(src) {
                        *a += gv;
                    }
                }
            }
            &Op::Mean(x) => {
                let sx = nodes[x.0].value.shape();
                let out = nodes[i].value.shape();
                let count = (numel(&sx) / numel(&out)) as f64;
                let ys = bcast_strides(out, sx);
                let gx = slot(grads, nodes, x);
                for_each_bcast(sx, strides(&sx), ys, |_, ix, iy| gx[ix] += gd[iy] / count);
            }
            &Op::Sum(x) => {
                for o in slot(grads, nodes, x).iter_mut() {
                    *o += gd[0];
                }
            }
            &Op::UpsampleNearest { x, factor } => {
                let out = nodes[i].value.shape();
                let sx = nodes[x.0].value.shape();
                let gx = slot(grads, nodes, x);
                let mut k = 0;
                for b in 0..out[0] {
                    for y in 0..out[1] {
                        for xx in 0..out[2] {
                            let base = ((b * sx[1] + y / factor) * sx[2] + xx / factor) * sx[3];
                            for c in 0..out[3] {
                                gx[base + c] += gd[k];
                                k += 1;
                            }
                        }
                    }
                }
            }
            &Op::UpsampleBilinear(x) => {
                let out = nodes[i].value.shape();
                let sx = nodes[x.0].value.shape();
                let ty = kernels::bilinear_taps(sx[1], out[1]);
                let tx = kernels::bilinear_taps(sx[2], out[2]);
                let gx = slot(grads, nodes, x);
                let idx = |b: usize, y: usize, xx: usize| ((b * sx[1] + y) * sx[2] + xx) * sx[3];
                let mut k = 0;
                for b in 0..out[0] {
                    for &(y0, y1, fy) in &ty {
                        for &(x0, x1, fx) in &tx {
                            let taps = [
                                (idx(b, y0, x0), (1.0 - fy) * (1.0 - fx)),
                                (idx(b, y0, x1), (1.0 - fy) * fx),
                                (idx(b, y1, x0), fy * (1.0 - fx)),
                                (idx(b, y1, x1), fy * fx),
                            ];
                            for c in 0..out[3] {
                                for &(base, wt) in &taps {
                                    gx[base + c] += gd[k] * wt;
                                }
                                k += 1;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                let k = nodes[logits.0].value.shape()[3];
                let scale = gd[0] / *count as f64;
                let gl = slot(grads, nodes, *logits);
                for (p, &lab) in labels.iter().enumerate() {
                    if lab == *ignore {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == lab as usize { 1.0 } else { 0.0 };
                        gl[p * k + j] += scale * (probs[p * k + j] - onehot);
                    }
                }
            }
        }
    }
}

fn take(grads: &mut [Option<Tensor4>], nodes: &[Node], v: Var) -> Tensor4 {
    grads[v.0]
        .take()
        .unwrap_or_else(|| Tensor4::zeros(nodes[v.0].value.shape()))
}

/// View of a stored `[.., r, c]` matrix as its effective (possibly transposed) operand.
fn view(s: Shape, t: bool) -> MatView {
    if t {
        MatView { rs: 1, cs: s[3] }
    } else {
        MatView { rs: s[3], cs: 1 }
    }
}

/// View of the transpose of the effective operand.
fn view_t(s: Shape, t: bool) -> MatView {
    view(s, !t)
}

/// Adds an effective-layout gradient `tmp[r x c]` into storage, transposing if needed.
fn scatter(dst: &mut [f64], tmp: &[f64], r: usize, c: usize, transposed: bool) {
    if !transposed {
        for (d, &v) in dst.iter_mut().zip(tmp) {
            *d += v;
        }
    } else {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] += tmp[i * c + j];
            }
        }
    }
}
