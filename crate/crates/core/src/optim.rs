//! SGD with momentum, coupled weight decay, global-norm clipping and cosine
//! annealing, plus the two-step sharpness-aware (SAM) update.
//!
//! One step applies, in order: `g ← g + wd·θ`, clip `g` to `clip_norm` by its
//! global L2 norm, `v ← μ·v + g`, `θ ← θ − lr·v`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Objective, ParameterVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine annealing from `lr0` to `lr_min` over `t_max` steps. `t_max`
    /// absent means "the whole training run".
    Cosine {
        #[serde(default)]
        t_max: Option<u64>,
        #[serde(default)]
        lr_min: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig { rho: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub sam: Option<SamConfig>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.025,
            momentum: 0.9,
            weight_decay: 3e-4,
            clip_norm: Some(5.0),
            batch_size: 96,
            schedule: Schedule::Cosine {
                t_max: None,
                lr_min: 0.0,
            },
            sam: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Schedule::Cosine { t_max, lr_min } = self.schedule {
            if t_max == Some(0) {
                return bad("cosine t_max must be >= 1".into());
            }
            if !(lr_min >= 0.0 && lr_min <= self.lr0) {
                return bad(format!("lr_min must be in [0, lr0], got {lr_min}"));
            }
        }
        if let Some(sam) = self.sam {
            if !(sam.rho > 0.0 && sam.rho.is_finite()) {
                return bad(format!("SAM rho must be > 0, got {}", sam.rho));
            }
        }
        Ok(())
    }

    /// Learning rate at step `t` of a run lasting `total_steps` steps.
    pub fn lr_at(&self, t: u64, total_steps: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr0,
            Schedule::Cosine { t_max, lr_min } => {
                cosine_lr(t, self.lr0, lr_min, t_max.unwrap_or(total_steps.max(1)))
            }
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π t / T_max))`, clamped to `lr_min`
/// for `t > T_max`.
pub fn cosine_lr(t: u64, lr0: f64, lr_min: f64, t_max: u64) -> f64 {
    if t >= t_max {
        return lr_min;
    }
    if t == 0 {
        return lr0;
    }
    let c = (std::f64::consts::PI * t as f64 / t_max as f64).cos();
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub velocity: ParameterVector,
    pub step_count: u64,
}

impl OptimState {
    pub fn new(params: &ParameterVector) -> Self {
        OptimState {
            velocity: params.zeros_like(),
            step_count: 0,
        }
    }
}

/// What a step actually did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Norm of the gradient after weight decay and clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Norm of the SAM ascent perturbation (0 for plain SGD).
    pub perturbation_norm: f64,
}

/// Applies one SGD update in place.
pub fn sgd_step(
    params: &mut ParameterVector,
    grad: &ParameterVector,
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<StepInfo> {
    params.check_layout(grad)?;
    params.check_layout(&state.velocity)?;
    if let Some(seg) = grad.first_non_finite_segment() {
        return Err(Error::NonFiniteGradient {
            segment: seg.to_string(),
        });
    }
    let mut g = grad.clone();
    if cfg.weight_decay != 0.0 {
        g.axpy(cfg.weight_decay, params);
    }
    let mut norm = g.norm();
    let mut clipped = false;
    if let Some(c) = cfg.clip_norm {
        if norm > c {
            let s = c / norm;
            g.values_mut().iter_mut().for_each(|x| *x *= s);
            norm = g.norm();
            clipped = true;
        }
    }
    let mu = cfg.momentum;
    for ((v, gi), p) in state
        .velocity
        .values_mut()
        .iter_mut()
        .zip(g.flatten())
        .zip(params.values_mut())
    {
        *v = mu * *v + gi;
        *p -= lr * *v;
    }
    state.step_count += 1;
    Ok(StepInfo {
        grad_norm: norm,
        clipped,
        perturbation_norm: 0.0,
    })
}

/// Sharpness-aware step: ascend to `θ + ρ·∇L/‖∇L‖`, take the gradient there,
/// and apply it at `θ` through the [`sgd_step`] rule. The perturbed point is
/// never written back.
pub fn sam_step<O: Objective>(
    params: &mut ParameterVector,
    loss: &O,
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<(f64, StepInfo)> {
    let rho = cfg
        .sam
        .ok_or_else(|| Error::contract("sam_step called without a SAM config"))?
        .rho;
    if !(rho > 0.0) {
        return Err(Error::contract(format!("SAM rho must be > 0, got {rho}")));
    }
    let (l0, g0) = diffcore::value_and_grad(loss, params)?;
    let gnorm = g0.norm();
    let (g_final, pnorm) = if gnorm == 0.0 || !gnorm.is_finite() {
        if !gnorm.is_finite() {
            return Err(Error::NonFiniteGradient {
                segment: g0.first_non_finite_segment().unwrap_or("loss").to_string(),
            });
        }
        (g0, 0.0)
    } else {
        let eps = g0.scaled(rho / gnorm);
        let mut perturbed = params.clone();
        perturbed.axpy(1.0, &eps);
        (diffcore::grad(loss, &perturbed)?, eps.norm())
    };
    let mut info = sgd_step(params, &g_final, state, cfg, lr)?;
    info.perturbation_norm = pnorm;
    Ok((l0, info))
}
