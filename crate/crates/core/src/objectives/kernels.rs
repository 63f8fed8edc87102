//! Per-sample loss kernels, generic over the scalar so the tape can run them
//! on dual numbers. Gradients are closed-form in the logits.

use crate::diffcore::Scalar;

/// Floor applied to teacher probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `out = log σ(z/τ)`, stabilized by subtracting the max logit.
pub fn log_softmax<S: Scalar>(z: &[S], tau: f64, out: &mut [S]) {
    let inv = 1.0 / tau;
    let m = S::from_f64(z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max));
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).scale(inv);
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o = *o - lse;
    }
}

pub fn softmax<S: Scalar>(z: &[S], tau: f64, out: &mut [S]) {
    log_softmax(z, tau, out);
    for o in out.iter_mut() {
        *o = o.exp();
    }
}

pub fn cross_entropy<S: Scalar>(z: &[S], label: usize, scratch: &mut [S]) -> S {
    log_softmax(z, 1.0, scratch);
    -scratch[label]
}

/// `τ² Σ_j p_j (log p_j − log q_j)` with `p = σ(z_t/τ)`, `q = σ(z_s/τ)`.
/// The teacher enters as plain `f64`; it is a constant of the loss.
pub fn kd_kl<S: Scalar>(zs: &[S], zt: &[f64], tau: f64, s1: &mut [S], s2: &mut [S]) -> S {
    let k = zs.len();
    let mut logp = vec![0.0; k];
    log_softmax(zt, tau, &mut logp);
    log_softmax(zs, tau, &mut s1[..k]);
    let floor = PROB_FLOOR.ln();
    let mut acc = S::zero();
    for j in 0..k {
        let p = logp[j].exp();
        s2[j] = S::from_f64(p) * (S::from_f64(logp[j].max(floor)) - s1[j]);
        acc += s2[j];
    }
    // KL is non-negative; only roundoff can push the sum below zero.
    if acc.re() < 0.0 {
        acc = S::zero();
    }
    acc.scale(tau * tau)
}

pub fn kd_loss<S: Scalar>(
    zs: &[S],
    zt: &[f64],
    label: usize,
    alpha: f64,
    tau: f64,
    s1: &mut [S],
    s2: &mut [S],
) -> S {
    if alpha == 1.0 {
        return cross_entropy(zs, label, s1);
    }
    let kl = kd_kl(zs, zt, tau, s1, s2);
    if alpha == 0.0 {
        return kl;
    }
    let ce = cross_entropy(zs, label, s1);
    ce.scale(alpha) + kl.scale(1.0 - alpha)
}

/// `out += scale · (σ(z) − e_label)`
pub fn cross_entropy_grad<S: Scalar>(z: &[S], label: usize, scale: S, out: &mut [S]) {
    let mut p = vec![S::zero(); z.len()];
    softmax(z, 1.0, &mut p);
    for (j, (o, &pj)) in out.iter_mut().zip(&p).enumerate() {
        let d = if j == label { pj - S::one() } else { pj };
        *o += scale * d;
    }
}

/// `out += scale · [α(σ(z_s) − e_y) + (1−α)·τ·(σ(z_s/τ) − σ(z_t/τ))]`
#[allow(clippy::too_many_arguments)]
pub fn kd_loss_grad<S: Scalar>(
    zs: &[S],
    zt: &[f64],
    label: usize,
    alpha: f64,
    tau: f64,
    scale: S,
    scratch: &mut [S],
    out: &mut [S],
) {
    if alpha != 0.0 {
        cross_entropy_grad(zs, label, scale.scale(alpha), out);
    }
    if alpha == 1.0 {
        return;
    }
    let k = zs.len();
    let mut p = vec![0.0; k];
    softmax(zt, tau, &mut p);
    softmax(zs, tau, &mut scratch[..k]);
    let w = scale.scale((1.0 - alpha) * tau);
    for j in 0..k {
        out[j] += w * (scratch[j] - S::from_f64(p[j]));
    }
}
