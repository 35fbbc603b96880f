//! Parameterized building blocks shared by the encoder, fusion and decoder.

use rand::Rng;

use super::graph::{Graph, Var};
use super::kernels::ConvSpec;
use super::params::{Init, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal initializer for projection weights.
pub const INIT_STD: f64 = 0.02;

/// Default layer-norm epsilon.
pub const NORM_EPS: f64 = 1e-6;

/// Helper that names and registers parameters under a common prefix and group.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub group: ParamGroup,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, group: ParamGroup, prefix: impl Into<String>) -> Self {
        Builder {
            store,
            rng,
            group,
            prefix: prefix.into(),
        }
    }

    /// Child builder whose names are `prefix.name`.
    pub fn scope(&mut self, name: impl AsRef<str>) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            group: self.group,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: [usize; 4], init: Init, kind: ParamKind) -> Result<ParamId> {
        let value = init.build(shape, self.rng);
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value, self.group, kind)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, spec: ConvSpec, bias: bool) -> Result<Conv2d> {
        let mut s = self.scope(name);
        Conv2d::new(&mut s, cin, cout, spec, bias)
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<LayerNorm> {
        let mut s = self.scope(name);
        LayerNorm::new(&mut s, channels)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cin: usize, cout: usize, spec: ConvSpec, bias: bool) -> Result<Self> {
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv groups {} must divide {cin} -> {cout}",
                spec.groups
            )));
        }
        let weight = b.param(
            "weight",
            [spec.kh, spec.kw, cin / spec.groups, cout],
            Init::TruncNormal(INIT_STD),
            ParamKind::Weight,
        )?;
        let bias = if bias {
            Some(b.param("bias", [1, 1, 1, cout], Init::Zeros, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, spec })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Channel-axis layer normalization.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: b.param("gamma", [1, 1, 1, channels], Init::Ones, ParamKind::Norm)?,
            beta: b.param("beta", [1, 1, 1, channels], Init::Zeros, ParamKind::Norm)?,
            eps: NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Flattens `(B, h, w, C)` into the token matrix `(B, 1, h*w, C)`.
pub fn tokens(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let [b, h, w, c] = g.shape(x);
    g.reshape(x, [b, 1, h * w, c])
}

/// Scaled dot-product attention on token matrices.
///
/// `q`, `k`, `v` are `(B, h, w, C)` maps; tokens are spatial positions. The channel axis
/// is split into `heads` groups. Returns the attended values in the input layout.
pub fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<Var> {
    let [b, h, w, c] = g.shape(q);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let n = h * w;
    let d = c / heads;
    let split = |g: &mut Graph<'_>, x: Var| -> Result<Var> {
        let r = g.reshape(x, [b, n, heads, d])?;
        g.permute(r, [0, 2, 1, 3])
    };
    let (qh, kh, vh) = if heads == 1 {
        (tokens(g, q)?, tokens(g, k)?, tokens(g, v)?)
    } else {
        (split(g, q)?, split(g, k)?, split(g, v)?)
    };
    let mut scores = g.matmul(qh, kh, false, true)?;
    if scale != 1.0 {
        scores = g.scale(scores, scale);
    }
    let attn = g.softmax(scores);
    let out = g.matmul(attn, vh, false, false)?;
    let out = if heads == 1 {
        out
    } else {
        g.permute(out, [0, 2, 1, 3])?
    };
    g.reshape(out, [b, h, w, c])
}
