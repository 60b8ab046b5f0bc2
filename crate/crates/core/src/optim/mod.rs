//! AdamW with decoupled weight decay, linear warmup and cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 5e-4,
            min_lr: 1e-6,
            warmup_steps: 20,
            total_steps: 400,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip_norm: None,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("base_lr", self.base_lr),
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
            ("epsilon", self.epsilon),
        ];
        for (field, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, format!("must be finite and ≥ 0, got {v}")));
            }
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(
                "warmup_steps",
                format!(
                    "need 0 ≤ warmup_steps ({}) < total_steps ({})",
                    self.warmup_steps, self.total_steps
                ),
            ));
        }
        if self.min_lr > self.base_lr {
            return Err(Error::config("min_lr", "must not exceed base_lr"));
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {b}")));
            }
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear ramp from 0 to `base_lr`, then a half
/// cosine down to `min_lr` at `total_steps`.
pub fn lr_at(step: u64, s: &Schedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::Invalid(format!(
            "step {step} beyond total_steps {}",
            s.total_steps
        )));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let t = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// First and second moments keyed like the parameters, plus the number of
/// updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub step: u64,
}

impl<T: Element> Default for OptState<T> {
    fn default() -> Self {
        OptState {
            m: ParamSet::new(),
            v: ParamSet::new(),
            step: 0,
        }
    }
}

impl<T: Element> OptState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cast<U: Element>(&self) -> OptState<U> {
        OptState {
            m: self.m.cast(),
            v: self.v.cast(),
            step: self.step,
        }
    }
}

/// Whether decoupled weight decay applies: weight matrices only, never
/// norm gains, biases, tokens or positional embeddings.
pub fn decays(name: &str, t: &Tensor<impl Element>) -> bool {
    t.ndim() >= 2 && name.ends_with("weight")
}

/// Scales every gradient by `max_norm / ‖g‖` when the global L2 norm
/// exceeds `max_norm`.
///
/// # Panics
/// If `max_norm` is not positive.
pub fn clip_global_norm<T: Element>(grads: &GradMap<T>, max_norm: f64) -> GradMap<T> {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.global_norm();
    let mut out = grads.clone();
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for (_, g) in out.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * c);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One AdamW update at `state.step`, then increments the step.
/// Parameters without a gradient entry are left untouched. With
/// `check_finite` a non-finite gradient aborts before anything changes.
pub fn adamw_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &GradMap<T>,
    state: &mut OptState<T>,
    s: &Schedule,
    check_finite: bool,
) -> Result<StepInfo> {
    if check_finite && !grads.all_finite() {
        return Err(Error::NonFinite { op: "adamw_step" });
    }
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", &[p.shape(), g.shape()], name.to_string()));
        }
    }
    let lr = lr_at(state.step, s)?;
    let grad_norm = grads.global_norm();
    let clipped_grads;
    let (grads, clipped) = match s.grad_clip_norm {
        Some(c) if grad_norm > c => {
            clipped_grads = clip_global_norm(grads, c);
            (&clipped_grads, true)
        }
        _ => (grads, false),
    };
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - s.beta1.powi(t);
    let bc2 = 1.0 - s.beta2.powi(t);
    for (name, g) in grads.iter() {
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name)?.data_mut();
        let v = state.v.get_mut(name)?.data_mut();
        let p = params.get_mut(name)?;
        let decay = if decays(name, p) { lr * s.weight_decay } else { 0.0 };
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gf = g.f64();
            let mf = s.beta1 * m.f64() + (1.0 - s.beta1) * gf;
            let vf = s.beta2 * v.f64() + (1.0 - s.beta2) * gf * gf;
            *m = T::of(mf);
            *v = T::of(vf);
            let mut x = p.f64();
            if decay != 0.0 {
                x *= 1.0 - decay;
            }
            if lr != 0.0 {
                x -= lr * (mf / bc1) / ((vf / bc2).sqrt() + s.epsilon);
            }
            *p = T::of(x);
        }
    }
    state.step += 1;
    Ok(StepInfo {
        lr,
        grad_norm,
        clipped,
    })
}
