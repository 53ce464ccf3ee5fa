//! Sophia with a squared-gradient curvature EMA, its row-masked variant, and
//! Adam as the first-order baseline.
//!
//! All steps take one gradient slot per parameter tensor in canonical
//! order. `None` marks a frozen tensor: neither it nor its state is touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::NeuronMask;
use crate::model::{Checkpoint, ModelParams, ParamGroup};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SophiaConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for SophiaConfig {
    fn default() -> Self {
        SophiaConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            gamma: 0.01,
            eps: 1e-12,
            weight_decay: 0.0,
        }
    }
}

fn unit_interval(field: &str, v: f64, closed_high: bool) -> Result<()> {
    let ok = v.is_finite() && v >= 0.0 && if closed_high { v <= 1.0 } else { v < 1.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::Config { field: field.into(), reason: format!("{v} out of range") })
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config { field: field.into(), reason: format!("{v} must be positive and finite") })
    }
}

impl SophiaConfig {
    /// `β1, β2` may sit on the closed unit interval so that degenerate
    /// settings (no averaging, frozen curvature) stay expressible.
    pub fn validate(&self) -> Result<()> {
        positive("lr", self.lr)?;
        unit_interval("beta1", self.beta1, true)?;
        unit_interval("beta2", self.beta2, true)?;
        positive("gamma", self.gamma)?;
        positive("eps", self.eps)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config { field: "weight_decay".into(), reason: "must be >= 0".into() });
        }
        Ok(())
    }
}

/// First-moment and curvature EMAs, zero-initialized, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SophiaState {
    pub m: Vec<Tensor>,
    pub h: Vec<Tensor>,
    pub step: u64,
}

impl SophiaState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        SophiaState { m: zeros.clone(), h: zeros, step: 0 }
    }

    pub fn store(&self, ckpt: &mut Checkpoint) {
        store_pair(ckpt, "sophia.m", &self.m, "sophia.h", &self.h, self.step);
    }

    pub fn restore(ckpt: &Checkpoint) -> Result<Self> {
        let (m, h, step) = restore_pair(ckpt, "sophia.m", "sophia.h")?;
        Ok(SophiaState { m, h, step })
    }
}

pub fn clip1(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

fn check_grads(params: &ModelParams, grads: &[Option<Tensor>]) -> Result<()> {
    let tensors = params.tensors();
    if grads.len() != tensors.len() {
        return Err(Error::contract(format!("{} gradient slots for {} parameters", grads.len(), tensors.len())));
    }
    let infos = params.infos();
    for ((g, t), info) in grads.iter().zip(&tensors).zip(&infos) {
        if let Some(g) = g {
            if g.shape() != t.shape() {
                return Err(Error::shape("optimizer step", t.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", info.name)));
            }
        }
    }
    Ok(())
}

/// Per-element selection for each parameter; `None` means every element
/// takes the new value.
fn mask_selectors(params: &ModelParams, mask: Option<&NeuronMask>) -> Result<Vec<Option<Vec<bool>>>> {
    let Some(mask) = mask else {
        return Ok(vec![None; params.tensors().len()]);
    };
    mask.check_dims(params.config.n_layers, params.config.d_model)?;
    Ok(params
        .infos()
        .iter()
        .zip(params.tensors())
        .map(|(info, t)| {
            (info.group == ParamGroup::MlpDown).then(|| {
                let rows = mask.layer(info.layer.expect("layer param"));
                let per_row = t.len() / rows.len();
                (0..t.len()).map(|i| rows[i / per_row]).collect()
            })
        })
        .collect())
}

fn sophia_apply(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut SophiaState,
    cfg: &SophiaConfig,
    selectors: &[Option<Vec<bool>>],
) -> Result<()> {
    cfg.validate()?;
    check_grads(params, grads)?;
    if state.m.len() != grads.len() || state.h.len() != grads.len() {
        return Err(Error::contract("optimizer state does not match the parameters"));
    }
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, theta) in params.tensors_mut().into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let sel = selectors[i].as_deref();
        let (m, h) = (state.m[i].data_mut(), state.h[i].data_mut());
        for (j, (th, &gj)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
            let m_new = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            let h_new = cfg.beta2 * h[j] + (1.0 - cfg.beta2) * gj * gj;
            let decayed = *th * decay;
            let th_new = decayed - cfg.lr * clip1(m_new / (cfg.gamma * h_new).max(cfg.eps));
            if sel.map_or(true, |s| s[j]) {
                m[j] = m_new;
                h[j] = h_new;
                *th = th_new;
            }
        }
    }
    state.step += 1;
    Ok(())
}

/// `θ ← θ(1 − η·wd) − η·clip(m/max(γH, ε), 1)` after updating
/// `m ← β1·m + (1−β1)g` and `H ← β2·H + (1−β2)g²`.
pub fn sophia_step(params: &mut ModelParams, grads: &[Option<Tensor>], state: &mut SophiaState, cfg: &SophiaConfig) -> Result<()> {
    let sel = mask_selectors(params, None)?;
    sophia_apply(params, grads, state, cfg, &sel)
}

/// Sophia step where down-projection rows (and bias elements) whose mask
/// bit is 0 keep their previous `θ`, `m` and `H` exactly. Other trainable
/// tensors take the ordinary step.
pub fn masked_sophia_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut SophiaState,
    cfg: &SophiaConfig,
    mask: &NeuronMask,
) -> Result<()> {
    let sel = mask_selectors(params, Some(mask))?;
    sophia_apply(params, grads, state, cfg, &sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        positive("lr", self.lr)?;
        unit_interval("beta1", self.beta1, false)?;
        unit_interval("beta2", self.beta2, false)?;
        positive("eps", self.eps)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config { field: "weight_decay".into(), reason: "must be >= 0".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn store(&self, ckpt: &mut Checkpoint) {
        store_pair(ckpt, "adam.m", &self.m, "adam.v", &self.v, self.step);
    }

    pub fn restore(ckpt: &Checkpoint) -> Result<Self> {
        let (m, v, step) = restore_pair(ckpt, "adam.m", "adam.v")?;
        Ok(AdamState { m, v, step })
    }
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step(params: &mut ModelParams, grads: &[Option<Tensor>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    check_grads(params, grads)?;
    if state.m.len() != grads.len() || state.v.len() != grads.len() {
        return Err(Error::contract("optimizer state does not match the parameters"));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, theta) in params.tensors_mut().into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (th, &gj)) in theta.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *th = *th * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    state.step = t;
    Ok(())
}

fn store_pair(ckpt: &mut Checkpoint, a: &str, xs: &[Tensor], b: &str, ys: &[Tensor], step: u64) {
    let names: Vec<String> = ckpt.params.infos().into_iter().map(|i| i.name).collect();
    ckpt.extras.retain(|(n, _)| !n.starts_with(&format!("{a}.")) && !n.starts_with(&format!("{b}.")));
    for (name, t) in names.iter().zip(xs) {
        ckpt.extras.push((format!("{a}.{name}"), t.clone()));
    }
    for (name, t) in names.iter().zip(ys) {
        ckpt.extras.push((format!("{b}.{name}"), t.clone()));
    }
    ckpt.extras.push((format!("{a}.step"), Tensor::scalar(step as f64)));
}

fn restore_pair(ckpt: &Checkpoint, a: &str, b: &str) -> Result<(Vec<Tensor>, Vec<Tensor>, u64)> {
    let infos = ckpt.params.infos();
    let fetch = |prefix: &str| -> Result<Vec<Tensor>> {
        infos
            .iter()
            .zip(ckpt.params.tensors())
            .map(|(info, p)| {
                let key = format!("{prefix}.{}", info.name);
                let t = ckpt.extra(&key).ok_or_else(|| Error::contract(format!("checkpoint lacks {key}")))?;
                if t.shape() != p.shape() {
                    return Err(Error::shape("optimizer state", p.shape(), t.shape()));
                }
                Ok(t.clone())
            })
            .collect()
    };
    let step = ckpt
        .extra(&format!("{a}.step"))
        .ok_or_else(|| Error::contract(format!("checkpoint lacks {a}.step")))?
        .data()[0] as u64;
    Ok((fetch(a)?, fetch(b)?, step))
}
