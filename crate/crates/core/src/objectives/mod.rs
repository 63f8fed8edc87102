//! Training and analysis objectives: tempered softmax, cross-entropy, the
//! temperature-scaled KL distillation term, their convex mix, and the mean
//! squared logit gap between two models.
//!
//! Batch losses are means over samples. Teacher logits are constants: the
//! tape's distillation node has no gradient edge to them.

pub(crate) mod kernels;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::Model;

pub use kernels::PROB_FLOOR;

/// A probability vector over `k` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("soft label must be non-empty"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("soft label entries must lie in [0, 1]"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("soft label sums to {s}, not 1")));
        }
        Ok(SoftLabel(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Mixing weight `alpha` between cross-entropy and the distillation term, and
/// the softmax temperature `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDWeights {
    pub alpha: f64,
    pub tau: f64,
}

impl KDWeights {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        let w = KDWeights { alpha, tau };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::contract(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        check_tau(self.tau)
    }
}

impl Default for KDWeights {
    fn default() -> Self {
        KDWeights {
            alpha: 0.5,
            tau: 4.0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "temperature must be > 0, got {tau}"
        )))
    }
}

fn check_logits(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::contract("empty logit vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("logits".into()));
    }
    Ok(())
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(label: usize, k: usize) -> Result<Vec<f64>> {
    if label >= k {
        return Err(Error::contract(format!(
            "label {label} out of range for k={k}"
        )));
    }
    let mut v = vec![0.0; k];
    v[label] = 1.0;
    Ok(v)
}

/// Index of the hot entry of a one-hot vector.
pub fn hot_index(y: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::contract("label is not one-hot"));
        }
    }
    hot.ok_or_else(|| Error::contract("label is not one-hot"))
}

/// `σ(z/τ)`.
pub fn softmax(z: &[f64], tau: f64) -> Result<SoftLabel> {
    check_tau(tau)?;
    check_logits(z)?;
    let mut out = vec![0.0; z.len()];
    kernels::softmax(z, tau, &mut out);
    Ok(SoftLabel(out))
}

/// `−Σ_j y_j log σ_j(z)` for a one-hot `y`.
pub fn cross_entropy(z: &[f64], y: &[f64]) -> Result<f64> {
    check_logits(z)?;
    if y.len() != z.len() {
        return Err(Error::Dimension {
            expected: z.len(),
            got: y.len(),
        });
    }
    let label = hot_index(y)?;
    let mut scratch = vec![0.0; z.len()];
    Ok(kernels::cross_entropy(z, label, &mut scratch))
}

/// `τ²·KL(σ(z_t/τ) ‖ σ(z_s/τ))`.
pub fn kd_kl(zs: &[f64], zt: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_logits(zs)?;
    check_logits(zt)?;
    if zs.len() != zt.len() {
        return Err(Error::Dimension {
            expected: zs.len(),
            got: zt.len(),
        });
    }
    let k = zs.len();
    let (mut s1, mut s2) = (vec![0.0; k], vec![0.0; k]);
    Ok(kernels::kd_kl(zs, zt, tau, &mut s1, &mut s2))
}

/// `α·CE(z_s, y) + (1−α)·τ²·KL(σ(z_t/τ) ‖ σ(z_s/τ))`.
pub fn kd_loss(zs: &[f64], y: &[f64], zt: &[f64], w: KDWeights) -> Result<f64> {
    w.validate()?;
    check_logits(zs)?;
    check_logits(zt)?;
    if zs.len() != zt.len() || y.len() != zs.len() {
        return Err(Error::shape(
            "kd_loss: student, teacher and label lengths differ",
        ));
    }
    let label = hot_index(y)?;
    let k = zs.len();
    let (mut s1, mut s2) = (vec![0.0; k], vec![0.0; k]);
    Ok(kernels::kd_loss(
        zs, zt, label, w.alpha, w.tau, &mut s1, &mut s2,
    ))
}

/// Batch-mean cross-entropy of `logits[n, k]` against class indices.
pub fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("mean_cross_entropy: logits/labels disagree"));
    }
    let k = logits.shape()[1];
    let mut scratch = vec![0.0; k];
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range for k={k}")));
        }
        acc += kernels::cross_entropy(logits.row(i), y, &mut scratch);
    }
    Ok(acc / labels.len() as f64)
}

/// `(1/n) Σ_i ‖f_student(x_i) − f_teacher(x_i)‖²`.
pub fn logit_discrepancy(student: &Model, teacher: &Model, inputs: &Tensor) -> Result<f64> {
    if student.classes() != teacher.classes() {
        return Err(Error::contract(format!(
            "logit_discrepancy: k differs ({} vs {})",
            student.classes(),
            teacher.classes()
        )));
    }
    let zs = student.forward(inputs)?;
    let zt = teacher.forward(inputs)?;
    mean_squared_gap(&zs, &zt)
}

/// Mean over rows of the squared Euclidean distance between two logit batches.
pub fn mean_squared_gap(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::contract("logit_discrepancy on an empty dataset"));
    }
    let total: f64 = (0..n)
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}
