//! Matrix-free curvature of a loss at a checkpoint: Hutchinson trace, power
//! iteration for the top eigenvalue, stochastic Lanczos quadrature for the
//! spectral density, and filter-normalized 2-D loss slices.
//!
//! Every estimator only touches the Hessian through [`diffcore::hvp`].
//! Probe `i` draws from its own RNG stream derived from `(seed, i)`, so the
//! results do not depend on how probes are scheduled across threads.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::diffcore::{self, Objective, ParameterVector, Tensor};
use crate::error::{Error, Result};
use crate::models::{Model, ModelLoss, ModelSpec};
use crate::seeds::derive_seed;

const MAX_RESTARTS: usize = 3;
const LANCZOS_BREAKDOWN: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn apply<O: Objective>(obj: &O, theta: &ParameterVector, v: Vec<f64>) -> Result<Vec<f64>> {
    Ok(diffcore::hvp(obj, theta, &theta.with_values(v)?)?.into_flat())
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub estimate: f64,
    /// Sample standard deviation over `√m`; infinite for a single probe.
    pub stderr: f64,
    pub probes: usize,
}

/// `(1/m) Σ vᵢᵀ H vᵢ` over Rademacher probes.
pub fn hutchinson_trace<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    m: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if m == 0 {
        return Err(Error::contract("hutchinson_trace needs at least one probe"));
    }
    let d = theta.total_dim();
    let samples = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let v: Vec<f64> = (0..d)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let hv = apply(obj, theta, v.clone())?;
            Ok(dot(&v, &hv))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = samples.iter().sum::<f64>() / m as f64;
    let stderr = if m == 1 {
        f64::INFINITY
    } else {
        let var = samples.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (m - 1) as f64;
        (var / m as f64).sqrt()
    };
    Ok(TraceEstimate {
        estimate: mean,
        stderr,
        probes: m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub lambda: f64,
    /// Hessian-vector products spent in the successful attempt.
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
}

/// Power iteration on `H`. Stops when successive Rayleigh quotients differ
/// by less than `tol` relatively; otherwise returns the last quotient with
/// `converged = false`. This is the eigenvalue of largest magnitude, which
/// for a loss near a minimum is the largest one.
pub fn top_eigenvalue<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<EigenEstimate> {
    if max_iters == 0 || !(tol > 0.0) {
        return Err(Error::contract(
            "top_eigenvalue needs max_iters >= 1 and tol > 0",
        ));
    }
    let d = theta.total_dim();
    for restart in 0..=MAX_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, restart as u64));
        let mut v = gaussian(d, &mut rng);
        let n0 = norm(&v);
        v.iter_mut().for_each(|x| *x /= n0);
        let mut w = apply(obj, theta, v.clone())?;
        if norm(&w) == 0.0 {
            continue;
        }
        let mut lambda = dot(&v, &w);
        for it in 1..=max_iters {
            let nw = norm(&w);
            if nw == 0.0 {
                return Ok(EigenEstimate {
                    lambda: 0.0,
                    iterations: it,
                    converged: true,
                    restarts: restart,
                });
            }
            v = w.iter().map(|x| x / nw).collect();
            w = apply(obj, theta, v.clone())?;
            let next = dot(&v, &w);
            let done = (next - lambda).abs() <= tol * next.abs();
            lambda = next;
            if done {
                return Ok(EigenEstimate {
                    lambda,
                    iterations: it + 1,
                    converged: true,
                    restarts: restart,
                });
            }
        }
        return Ok(EigenEstimate {
            lambda,
            iterations: max_iters + 1,
            converged: false,
            restarts: restart,
        });
    }
    Err(Error::DegenerateOperator {
        restarts: MAX_RESTARTS,
    })
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `diag` and
/// off-diagonal `off`, with the first component of each unit eigenvector.
/// Implicit QL with Wilkinson shifts; only the first row of the eigenvector
/// matrix is tracked since rotations act on each row independently.
pub fn tridiagonal_eigen(diag: &[f64], off: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::shape(
            "tridiagonal_eigen: need off.len() == diag.len() - 1",
        ));
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(Error::contract("tridiagonal QL failed to converge"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut out: Vec<(f64, f64)> = d.into_iter().zip(z).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Lanczos with full reorthogonalization from unit vector `q0`. Returns the
/// tridiagonal coefficients; stops early on breakdown.
fn lanczos<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    q0: Vec<f64>,
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut basis = vec![q0];
    let mut alpha = Vec::with_capacity(k);
    let mut beta: Vec<f64> = Vec::with_capacity(k);
    let mut scale = 0.0f64;
    for j in 0..k {
        let q = &basis[j];
        let mut w = apply(obj, theta, q.clone())?;
        let a = dot(&w, q);
        w.iter_mut().zip(q).for_each(|(x, y)| *x -= a * y);
        if j > 0 {
            let b = beta[j - 1];
            w.iter_mut()
                .zip(&basis[j - 1])
                .for_each(|(x, y)| *x -= b * y);
        }
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        alpha.push(a);
        let b = norm(&w);
        scale = scale.max(a.abs()).max(b);
        if j + 1 == k || b <= LANCZOS_BREAKDOWN * scale {
            break;
        }
        beta.push(b);
        basis.push(w.into_iter().map(|x| x / b).collect());
    }
    Ok((alpha, beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumNode {
    pub node: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Ritz values with quadrature weights, ascending; weights sum to 1.
    pub nodes: Vec<SpectrumNode>,
    pub probes: usize,
    /// Longest Lanczos recursion over all probes.
    pub lanczos_steps: usize,
}

impl Spectrum {
    /// `Σ wᵢ λᵢ`, which estimates `tr(H) / dim`.
    pub fn first_moment(&self) -> f64 {
        self.nodes.iter().map(|n| n.weight * n.node).sum()
    }

    pub fn max_node(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.node)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Gaussian-smoothed density `Σ wᵢ N(x; λᵢ, σ²)` at each `x`.
    pub fn density(&self, xs: &[f64], sigma: f64) -> Vec<f64> {
        let c = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        xs.iter()
            .map(|&x| {
                self.nodes
                    .iter()
                    .map(|n| n.weight * c * (-0.5 * ((x - n.node) / sigma).powi(2)).exp())
                    .sum()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,weight\n");
        for n in &self.nodes {
            let _ = writeln!(s, "{},{}", n.node, n.weight);
        }
        s
    }
}

/// Stochastic Lanczos quadrature over `m` Gaussian probes of `k` steps.
pub fn slq_spectrum<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Spectrum> {
    if k < 2 || m == 0 {
        return Err(Error::contract("slq_spectrum needs k >= 2 and m >= 1"));
    }
    let d = theta.total_dim();
    let per_probe = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut v = gaussian(d, &mut rng);
            let n0 = norm(&v);
            v.iter_mut().for_each(|x| *x /= n0);
            let (a, b) = lanczos(obj, theta, v, k)?;
            Ok((a.len(), tridiagonal_eigen(&a, &b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let steps = per_probe.iter().map(|p| p.0).max().unwrap_or(0);
    let mut nodes: Vec<SpectrumNode> = per_probe
        .into_iter()
        .flat_map(|(_, pairs)| {
            pairs.into_iter().map(move |(node, z0)| SpectrumNode {
                node,
                weight: z0 * z0 / m as f64,
            })
        })
        .collect();
    let total: f64 = nodes.iter().map(|n| n.weight).sum();
    nodes.iter_mut().for_each(|n| n.weight /= total);
    nodes.sort_by(|a, b| a.node.total_cmp(&b.node));
    Ok(Spectrum {
        nodes,
        probes: m,
        lanczos_steps: steps,
    })
}

/// Loss values on the plane `θ + a·d1 + b·d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGrid {
    pub d1: ParameterVector,
    pub d2: ParameterVector,
    pub extent: f64,
    pub resolution: usize,
    /// Shared coordinates of both axes, from `-extent` to `extent`.
    pub coords: Vec<f64>,
    /// `values[i * resolution + j]` is the loss at `(coords[i], coords[j])`.
    pub values: Vec<f64>,
}

impl SliceGrid {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.resolution + j]
    }

    pub fn origin_value(&self) -> f64 {
        let c = self.resolution / 2;
        self.value(c, c)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("a,b,loss\n");
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                let _ = writeln!(s, "{a},{b},{}", self.value(i, j));
            }
        }
        s
    }
}

/// Rescales every filter of `dir` to the norm of the matching filter of
/// `theta`. A filter is a slice along the first axis of a segment with two
/// or more axes; a one-axis segment is a single filter.
pub fn filter_normalize(dir: &mut ParameterVector, theta: &ParameterVector) -> Result<()> {
    if !dir.same_layout(theta) {
        return Err(Error::contract("direction and parameters differ in layout"));
    }
    for s in 0..theta.num_segments() {
        let shape = &theta.segments()[s].shape;
        let flen = if shape.len() >= 2 {
            shape[1..].iter().product()
        } else {
            shape.iter().product::<usize>().max(1)
        };
        let t = theta.segment(s).to_vec();
        let dseg = dir.segment_mut(s);
        for (dchunk, tchunk) in dseg.chunks_mut(flen).zip(t.chunks(flen)) {
            let tn = norm(tchunk);
            let dn = norm(dchunk);
            let f = if tn == 0.0 || dn == 0.0 { 0.0 } else { tn / dn };
            dchunk.iter_mut().for_each(|x| *x *= f);
        }
    }
    Ok(())
}

/// Evaluates the loss on a `resolution × resolution` grid over
/// `[-extent, extent]²` spanned by two filter-normalized Gaussian
/// directions. The resolution must be odd so the grid contains the origin.
pub fn loss_slice_2d<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    resolution: usize,
    extent: f64,
    seed: u64,
) -> Result<SliceGrid> {
    if resolution < 3 || resolution.is_multiple_of(2) {
        return Err(Error::contract(format!(
            "slice resolution must be odd and >= 3, got {resolution}"
        )));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::contract("slice extent must be > 0"));
    }
    let d = theta.total_dim();
    let mut dirs = [1u64, 2].map(|s| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s));
        theta
            .with_values(gaussian(d, &mut rng))
            .expect("same length")
    });
    for dir in &mut dirs {
        filter_normalize(dir, theta)?;
    }
    let [d1, d2] = dirs;
    let half = (resolution - 1) as f64;
    let coords: Vec<f64> = (0..resolution)
        .map(|i| extent * (2.0 * i as f64 - half) / half)
        .collect();
    let nodes: Vec<(f64, f64)> = coords
        .iter()
        .flat_map(|&a| coords.iter().map(move |&b| (a, b)))
        .collect();
    let values = nodes
        .par_iter()
        .map(|&(a, b)| {
            let vals: Vec<f64> = theta
                .flatten()
                .iter()
                .zip(d1.flatten())
                .zip(d2.flatten())
                .map(|((t, x), y)| t + a * x + b * y)
                .collect();
            diffcore::value(obj, &theta.with_values(vals)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SliceGrid {
        d1,
        d2,
        extent,
        resolution,
        coords,
        values,
    })
}

/// Which loss and data a curvature measurement refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossContext {
    pub loss: String,
    pub split: String,
    pub samples: usize,
    pub split_size: usize,
    pub subsample_seed: u64,
}

/// Plain cross-entropy of one architecture on a fixed data subsample.
#[derive(Debug, Clone)]
pub struct CurvatureProblem {
    spec: ModelSpec,
    inputs: Tensor,
    labels: Vec<usize>,
    context: LossContext,
}

impl CurvatureProblem {
    /// Uses `subsample` samples of `data` chosen by `seed` (all of them if
    /// `subsample >= len`), kept in dataset order.
    pub fn cross_entropy(
        spec: &ModelSpec,
        data: &LabeledDataset,
        split: &str,
        subsample: usize,
        seed: u64,
    ) -> Result<Self> {
        let n = data.len();
        if subsample == 0 || n == 0 {
            return Err(Error::contract("curvature subsample must be non-empty"));
        }
        let mut idx: Vec<usize> = if subsample >= n {
            (0..n).collect()
        } else {
            sample(&mut ChaCha8Rng::seed_from_u64(seed), n, subsample).into_vec()
        };
        idx.sort_unstable();
        let sub = data.select(&idx);
        Ok(CurvatureProblem {
            spec: spec.clone(),
            context: LossContext {
                loss: "cross-entropy".into(),
                split: split.into(),
                samples: idx.len(),
                split_size: n,
                subsample_seed: seed,
            },
            inputs: sub.inputs().clone(),
            labels: sub.labels().to_vec(),
        })
    }

    pub fn loss(&self) -> ModelLoss<'_> {
        ModelLoss::cross_entropy(&self.spec, &self.inputs, &self.labels)
    }

    pub fn context(&self) -> &LossContext {
        &self.context
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SliceConfig {
    pub resolution: usize,
    pub extent: f64,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            resolution: 21,
            extent: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvatureConfig {
    pub trace_probes: usize,
    pub lanczos_steps: usize,
    pub slq_probes: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    pub subsample: usize,
    pub seed: u64,
    pub slice: Option<SliceConfig>,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            trace_probes: 100,
            lanczos_steps: 64,
            slq_probes: 10,
            power_iters: 100,
            power_tol: 1e-4,
            subsample: 512,
            seed: 0,
            slice: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub trace_estimate: f64,
    pub trace_stderr: f64,
    pub lambda_max: f64,
    pub lambda_converged: bool,
    pub power_iterations: usize,
    pub spectrum: Vec<SpectrumNode>,
    pub probes_used: usize,
    pub lanczos_steps: usize,
    pub loss_context: LossContext,
}

/// Trace, top eigenvalue and spectrum of the problem's loss at `model`.
pub fn analyze(
    model: &Model,
    problem: &CurvatureProblem,
    cfg: &CurvatureConfig,
) -> Result<CurvatureReport> {
    let loss = problem.loss();
    let theta = model.params();
    let trace = hutchinson_trace(&loss, theta, cfg.trace_probes, derive_seed(cfg.seed, 11))?;
    let top = top_eigenvalue(
        &loss,
        theta,
        cfg.power_iters,
        cfg.power_tol,
        derive_seed(cfg.seed, 12),
    )?;
    let spectrum = slq_spectrum(
        &loss,
        theta,
        cfg.lanczos_steps,
        cfg.slq_probes,
        derive_seed(cfg.seed, 13),
    )?;
    Ok(CurvatureReport {
        trace_estimate: trace.estimate,
        trace_stderr: trace.stderr,
        lambda_max: top.lambda,
        lambda_converged: top.converged,
        power_iterations: top.iterations,
        spectrum: spectrum.nodes,
        probes_used: trace.probes,
        lanczos_steps: spectrum.lanczos_steps,
        loss_context: problem.context().clone(),
    })
}

pub fn slice_model(
    model: &Model,
    problem: &CurvatureProblem,
    cfg: &CurvatureConfig,
) -> Result<Option<SliceGrid>> {
    cfg.slice
        .as_ref()
        .map(|s| {
            loss_slice_2d(
                &problem.loss(),
                model.params(),
                s.resolution,
                s.extent,
                derive_seed(cfg.seed, 14),
            )
        })
        .transpose()
}
