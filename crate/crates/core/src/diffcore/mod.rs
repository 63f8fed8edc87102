//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! Losses are described by the [`Objective`] trait: given a [`Tape`] and one
//! leaf per parameter segment, record the scalar loss. The driver functions
//! then run that recording on `f64` (for [`value`] and [`grad`]) or on
//! [`Dual`] numbers (for [`hvp`]). The Hessian-vector product is the
//! directional derivative of the reverse-mode gradient along `v`, so it is
//! matrix-free and costs a small constant multiple of one gradient.

mod params;
mod scalar;
mod tape;
mod tensor;

pub use params::{ParameterVector, SegmentSpec};
pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// A scalar loss of a [`ParameterVector`].
pub trait Objective: Sync {
    /// Records the loss on `tape`. `params[i]` is the leaf for segment `i` of
    /// the parameter vector, in layout order.
    fn record<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var]) -> Result<Var>;
}

fn check_finite(theta: &ParameterVector) -> Result<()> {
    match theta.first_non_finite_segment() {
        Some(seg) => Err(Error::NonFiniteInput(seg.to_string())),
        None => Ok(()),
    }
}

fn leaves<S: Scalar>(
    tape: &mut Tape<S>,
    theta: &ParameterVector,
    lift: impl Fn(usize, f64) -> S,
) -> Result<Vec<Var>> {
    let mut offset = 0;
    let mut out = Vec::with_capacity(theta.num_segments());
    for (i, spec) in theta.segments().iter().enumerate() {
        let vals = theta
            .segment(i)
            .iter()
            .enumerate()
            .map(|(j, &x)| lift(offset + j, x))
            .collect();
        out.push(tape.param(spec.shape.clone(), vals)?);
        offset += spec.size();
    }
    Ok(out)
}

fn collect_segments<S: Scalar>(
    theta: &ParameterVector,
    grads: &Gradients<S>,
    vars: &[Var],
    part: impl Fn(S) -> f64,
) -> ParameterVector {
    let mut out = Vec::with_capacity(theta.total_dim());
    for (i, &v) in vars.iter().enumerate() {
        let len = theta.segment(i).len();
        match grads.get(v) {
            Some(g) => out.extend(g.iter().map(|&x| part(x))),
            None => out.extend(std::iter::repeat_n(0.0, len)),
        }
    }
    theta
        .with_values(out)
        .expect("gradient layout mirrors parameter layout")
}

/// Names the segment to blame for a non-finite loss: the first segment whose
/// gradient is non-finite, else the segment holding the largest-magnitude
/// weight.
fn overflow_segment(theta: &ParameterVector, grad: &ParameterVector) -> String {
    if let Some(seg) = grad.first_non_finite_segment() {
        return seg.to_string();
    }
    let largest = (0..theta.num_segments())
        .map(|i| {
            let m = theta.segment(i).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            (i, m)
        })
        .fold((0, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    theta.segments()[largest.0].name.clone()
}

pub fn value<O: Objective>(obj: &O, theta: &ParameterVector) -> Result<f64> {
    check_finite(theta)?;
    let mut tape: Tape<f64> = Tape::new();
    let vars = leaves(&mut tape, theta, |_, x| x)?;
    let root = obj.record(&mut tape, &vars)?;
    let l = tape.value(root)[0];
    if !l.is_finite() {
        let g = tape.backward(root)?;
        let grad = collect_segments(theta, &g, &vars, |x| x);
        return Err(Error::NumericOverflow {
            segment: overflow_segment(theta, &grad),
        });
    }
    Ok(l)
}

/// Loss and its gradient at `theta`.
pub fn value_and_grad<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
) -> Result<(f64, ParameterVector)> {
    check_finite(theta)?;
    let mut tape: Tape<f64> = Tape::new();
    let vars = leaves(&mut tape, theta, |_, x| x)?;
    let root = obj.record(&mut tape, &vars)?;
    let l = tape.value(root)[0];
    let g = tape.backward(root)?;
    let grad = collect_segments(theta, &g, &vars, |x| x);
    if !l.is_finite() {
        return Err(Error::NumericOverflow {
            segment: overflow_segment(theta, &grad),
        });
    }
    Ok((l, grad))
}

pub fn grad<O: Objective>(obj: &O, theta: &ParameterVector) -> Result<ParameterVector> {
    value_and_grad(obj, theta).map(|(_, g)| g)
}

/// `H(θ)·v` without forming `H`.
pub fn hvp<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    v: &ParameterVector,
) -> Result<ParameterVector> {
    if v.total_dim() != theta.total_dim() {
        return Err(Error::Dimension {
            expected: theta.total_dim(),
            got: v.total_dim(),
        });
    }
    check_finite(theta)?;
    let dir = v.flatten();
    let mut tape: Tape<Dual> = Tape::new();
    let vars = leaves(&mut tape, theta, |j, x| Dual::new(x, dir[j]))?;
    let root = obj.record(&mut tape, &vars)?;
    let l = tape.value(root)[0];
    let g = tape.backward(root)?;
    if !l.re.is_finite() {
        let grad = collect_segments(theta, &g, &vars, |x| x.re);
        return Err(Error::NumericOverflow {
            segment: overflow_segment(theta, &grad),
        });
    }
    Ok(collect_segments(theta, &g, &vars, |x| x.du))
}

/// `L(θ) = ½ θᵀ A θ + bᵀ θ` over a single-segment parameter vector.
///
/// Used as a known-Hessian test objective and by the oracle suites.
#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    a: Tensor,
    b: Option<Tensor>,
}

impl Quadratic {
    /// Dense symmetric `A` given row-major.
    pub fn dense(dim: usize, a: Vec<f64>) -> Result<Self> {
        let a = Tensor::new(vec![dim, dim], a)?;
        Ok(Quadratic { dim, a, b: None })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let d = diag.len();
        let mut a = vec![0.0; d * d];
        for (i, &x) in diag.iter().enumerate() {
            a[i * d + i] = x;
        }
        Self::dense(d, a)
    }

    pub fn with_linear(mut self, b: Vec<f64>) -> Result<Self> {
        if b.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: b.len(),
            });
        }
        self.b = Some(Tensor::new(vec![self.dim], b)?);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// A parameter vector with this objective's layout.
    pub fn point(&self, values: Vec<f64>) -> Result<ParameterVector> {
        ParameterVector::from_flat(vec![SegmentSpec::new("theta", vec![self.dim])], values)
    }
}

impl Objective for Quadratic {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var]) -> Result<Var> {
        let theta = params[0];
        let row = tape.reshape(theta, vec![1, self.dim])?;
        let a = tape.constant(&self.a);
        let at = tape.linear(row, a, None)?;
        let at = tape.reshape(at, vec![self.dim])?;
        let prod = tape.mul(at, theta)?;
        let s = tape.sum(prod);
        let mut loss = tape.scale(s, 0.5);
        if let Some(b) = &self.b {
            let b = tape.constant(b);
            let bt = tape.mul(b, theta)?;
            let bt = tape.sum(bt);
            loss = tape.add(loss, bt)?;
        }
        Ok(loss)
    }
}
