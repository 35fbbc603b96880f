//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor4;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Below this analytic magnitude the error is measured absolutely.
    pub abs_threshold: f64,
    /// Cap on probed elements per tensor; `None` probes every element.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            abs_threshold: 1e-8,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, threshold: f64, what: impl FnOnce() -> String) {
        let diff = (analytic - numeric).abs();
        let err = if analytic.abs() < threshold {
            diff
        } else {
            diff / analytic.abs().max(numeric.abs())
        };
        self.checked += 1;
        if err > self.max_error || self.worst.is_empty() {
            self.max_error = self.max_error.max(err);
            self.worst = format!("{} (analytic {analytic:e}, numeric {numeric:e})", what());
        }
    }
}

/// Scalar objective `sum(out * proj)` around a user-supplied forward function.
fn objective<F>(store: &ParamStore, inputs: &[Tensor4], proj: &Tensor4, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g
        .value(out)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(a, b)| a * b)
        .sum())
}

fn probe_indices(n: usize, cap: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match cap {
        Some(c) if c < n => {
            let mut v = sample(rng, n, c).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

impl GradCheck {
    /// Compares analytic gradients of `sum(build(inputs) * R)` (R a fixed random
    /// projection) against central differences, for every input tensor and the
    /// listed parameters. The store is restored after each probe.
    pub fn run<F>(
        &self,
        store: &mut ParamStore,
        inputs: &[Tensor4],
        params: &[ParamId],
        build: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (input_grads, param_grads, proj) = {
            let mut g = Graph::new(store);
            let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            let proj = Tensor4::from_fn(g.shape(out), |_| rng.gen_range(-1.0..1.0));
            let pv = g.input(proj.clone());
            let prod = g.mul(out, pv)?;
            let loss = g.sum(prod);
            g.backward(loss)?;
            let ig: Vec<Tensor4> = vars
                .iter()
                .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor4::zeros(g.shape(v))))
                .collect();
            (ig, g.param_gradients(), proj)
        };

        let h = self.step;
        let mut report = GradCheckReport::default();
        let mut probe_inputs = inputs.to_vec();
        for (ti, grad) in input_grads.iter().enumerate() {
            for j in probe_indices(grad.numel(), self.max_per_tensor, &mut rng) {
                let orig = probe_inputs[ti].data()[j];
                probe_inputs[ti].data_mut()[j] = orig + h;
                let fp = objective(store, &probe_inputs, &proj, &build)?;
                probe_inputs[ti].data_mut()[j] = orig - h;
                let fm = objective(store, &probe_inputs, &proj, &build)?;
                probe_inputs[ti].data_mut()[j] = orig;
                report.record(grad.data()[j], (fp - fm) / (2.0 * h), self.abs_threshold, || {
                    format!("input {ti}[{j}]")
                });
            }
        }
        for &id in params {
            let n = store.get(id).numel();
            let zeros = Tensor4::zeros(store.get(id).value.shape());
            let grad = param_grads.get(id).unwrap_or(&zeros).clone();
            for j in probe_indices(n, self.max_per_tensor, &mut rng) {
                let orig = store.value(id).data()[j];
                store.value_mut(id).data_mut()[j] = orig + h;
                let fp = objective(store, inputs, &proj, &build)?;
                store.value_mut(id).data_mut()[j] = orig - h;
                let fm = objective(store, inputs, &proj, &build)?;
                store.value_mut(id).data_mut()[j] = orig;
                report.record(grad.data()[j], (fp - fm) / (2.0 * h), self.abs_threshold, || {
                    format!("{}[{j}]", store.get(id).name)
                });
            }
        }
        Ok(report)
    }
}

/// Re-draws every parameter uniformly from `[-scale, scale]` (norm scales from
/// `1 ± scale`) so gates, attention projections and biases all carry non-trivial
/// gradients during a check.
pub fn randomize_params(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        let center = if p.kind == ParamKind::Norm && p.name.ends_with("gamma") {
            1.0
        } else {
            0.0
        };
        for v in store.value_mut(id).data_mut() {
            *v = center + rng.gen_range(-scale..scale);
        }
    }
}
