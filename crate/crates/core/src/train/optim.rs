use serde::{Deserialize, Serialize};

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamGroup, ParamStore};

/// Polynomial decay: `base_lr * (1 - step / total_steps)^power`, clamped to `[0, total]`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, power: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * (1.0 - t).powf(power)
}

/// First and second moment buffers, one flat vector per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Learning-rate multiplier applied to a parameter group.
pub fn group_multiplier(group: ParamGroup, cfg: &OptimConfig) -> f64 {
    match group {
        ParamGroup::Backbone => cfg.backbone_lr_multiplier,
        _ => 1.0,
    }
}

/// One decoupled-weight-decay Adam step at learning rate `lr`.
///
/// Parameters without a gradient (unused in the forward pass) are left untouched, as
/// are non-trainable ones. Decay applies only to weight tensors. Any non-finite
/// gradient aborts before anything is modified.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} tensors for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFinite(params.get(id).name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let p = params.get_mut(id);
        if !p.trainable {
            continue;
        }
        let plr = lr * group_multiplier(p.group, cfg);
        let shrink = if p.decays() { 1.0 - plr * cfg.weight_decay } else { 1.0 };
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w *= shrink;
            *w -= plr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
