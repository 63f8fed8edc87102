//! Brute-force references for the differentiation and curvature code:
//! finite differences, explicit Hessians and dense eigendecomposition.
//! Only practical for small parameter counts.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::curvature;
use crate::diffcore::{self, Objective, ParameterVector, Tensor};
use crate::error::{Error, Result};
use crate::models::{Model, ModelLoss, ModelSpec, Target};
use crate::objectives::KDWeights;
use crate::optim::{sgd_step, OptimConfig, OptimState, Schedule};

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of the loss along each coordinate.
pub fn fd_gradient<O: Objective>(obj: &O, theta: &ParameterVector, h: f64) -> Result<Vec<f64>> {
    let base = theta.flatten().to_vec();
    let mut out = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = diffcore::value(obj, &theta.with_values(probe.clone())?)?;
        probe[i] = base[i] - h;
        let down = diffcore::value(obj, &theta.with_values(probe.clone())?)?;
        probe[i] = base[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central differences of the gradient along `v`.
pub fn fd_hvp<O: Objective>(
    obj: &O,
    theta: &ParameterVector,
    v: &ParameterVector,
    h: f64,
) -> Result<Vec<f64>> {
    let mut up = theta.clone();
    up.axpy(h, v);
    let mut down = theta.clone();
    down.axpy(-h, v);
    let gu = diffcore::grad(obj, &up)?.into_flat();
    let gd = diffcore::grad(obj, &down)?.into_flat();
    Ok(gu
        .iter()
        .zip(&gd)
        .map(|(a, b)| (a - b) / (2.0 * h))
        .collect())
}

/// `H` assembled column by column from Hessian-vector products on the
/// standard basis.
pub fn dense_hessian<O: Objective>(obj: &O, theta: &ParameterVector) -> Result<DMatrix<f64>> {
    let d = theta.total_dim();
    let mut h = DMatrix::zeros(d, d);
    let mut e = vec![0.0; d];
    for j in 0..d {
        e[j] = 1.0;
        let col = diffcore::hvp(obj, theta, &theta.with_values(e.clone())?)?;
        for (i, v) in col.flatten().iter().enumerate() {
            h[(i, j)] = *v;
        }
        e[j] = 0.0;
    }
    Ok(h)
}

/// Largest `|H_ij − H_ji|` relative to the largest `|H_ij|`.
pub fn asymmetry(h: &DMatrix<f64>) -> f64 {
    let scale = h.amax();
    if scale == 0.0 {
        return 0.0;
    }
    (&(h - h.transpose())).amax() / scale
}

/// Ascending eigenvalues of the symmetric part of `h`.
pub fn symmetric_eigenvalues(h: &DMatrix<f64>) -> Vec<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn gaussian_like(theta: &ParameterVector, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals = (0..theta.total_dim())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    theta.with_values(vals).expect("same length")
}

/// Worst-case agreement between the analytic and finite-difference routes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeCheck {
    pub trials: usize,
    /// Draws discarded because finite differences at two step sizes
    /// disagreed, i.e. the difference stencil straddled a ReLU kink.
    pub nonsmooth_skipped: usize,
    pub max_grad_rel_err: f64,
    pub max_hvp_rel_err: f64,
}

const FD_STEP: f64 = 1e-5;
const SMOOTHNESS_TOL: f64 = 1e-6;

/// Compares gradients and HVPs of `obj` against central differences at
/// `trials` random `(θ, v)` pairs drawn around `center`. A draw is replaced
/// when the finite differences themselves are inconsistent across step
/// sizes, since they do not estimate a derivative there.
pub fn check_derivatives<O: Objective>(
    obj: &O,
    center: &ParameterVector,
    trials: usize,
    seed: u64,
) -> Result<DerivativeCheck> {
    let mut out = DerivativeCheck {
        trials,
        nonsmooth_skipped: 0,
        max_grad_rel_err: 0.0,
        max_hvp_rel_err: 0.0,
    };
    let mut accepted = 0;
    let mut draw = 0u64;
    while accepted < trials {
        if draw as usize >= 10 * trials.max(1) {
            return Err(Error::contract(
                "too many non-smooth draws in derivative check",
            ));
        }
        let mut theta = center.clone();
        theta.axpy(
            0.3,
            &gaussian_like(center, crate::seeds::derive_seed(seed, 2 * draw)),
        );
        let v = gaussian_like(center, crate::seeds::derive_seed(seed, 2 * draw + 1));
        draw += 1;
        let g_fd = fd_gradient(obj, &theta, FD_STEP)?;
        let hv_fd = fd_hvp(obj, &theta, &v, FD_STEP)?;
        let smooth = relative_error(&g_fd, &fd_gradient(obj, &theta, FD_STEP / 4.0)?)
            < SMOOTHNESS_TOL
            && relative_error(&hv_fd, &fd_hvp(obj, &theta, &v, FD_STEP / 4.0)?) < SMOOTHNESS_TOL;
        if !smooth {
            out.nonsmooth_skipped += 1;
            continue;
        }
        let g = diffcore::grad(obj, &theta)?.into_flat();
        let hv = diffcore::hvp(obj, &theta, &v)?.into_flat();
        out.max_grad_rel_err = out.max_grad_rel_err.max(relative_error(&g, &g_fd));
        out.max_hvp_rel_err = out.max_hvp_rel_err.max(relative_error(&hv, &hv_fd));
        accepted += 1;
    }
    Ok(out)
}

/// Small architectures of every family, each under 200 parameters.
pub fn tiny_model_specs() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("mlp", ModelSpec::mlp(6, vec![8, 5], 3)),
        ("small-cnn", ModelSpec::small_cnn([1, 5, 5], vec![3], 3)),
        (
            "small-cnn-affine",
            ModelSpec {
                channel_affine: true,
                ..ModelSpec::small_cnn([2, 4, 4], vec![2, 3], 2)
            },
        ),
        (
            "plain-resnet",
            ModelSpec::plain_resnet([1, 4, 4], vec![1, 2], 1, 2, true),
        ),
        (
            "plain-resnet-noskip",
            ModelSpec::plain_resnet([1, 4, 4], vec![2], 2, 2, false),
        ),
    ]
}

/// A fixed random batch for `spec` with labels and teacher logits.
pub fn synthetic_batch(
    spec: &ModelSpec,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(&spec.input_shape);
    let len: usize = shape.iter().product();
    let x = Tensor::new(
        shape,
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    let labels = (0..n).map(|i| i % spec.classes).collect();
    let zt_vals = (0..n * spec.classes)
        .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let zt = Tensor::new(vec![n, spec.classes], zt_vals)?;
    Ok((x, labels, zt))
}

/// Result of the derivative oracle on one model family.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyCheck {
    pub family: String,
    pub params: usize,
    pub cross_entropy: DerivativeCheck,
    pub distillation: DerivativeCheck,
}

/// Runs [`check_derivatives`] for every tiny family under both the
/// cross-entropy and the distillation loss.
pub fn check_model_families(trials: usize, seed: u64) -> Result<Vec<FamilyCheck>> {
    let weights = KDWeights::new(0.5, 4.0)?;
    tiny_model_specs()
        .into_iter()
        .map(|(name, spec)| {
            if spec.param_count() > 200 {
                return Err(Error::contract(format!(
                    "{name} exceeds the oracle size limit"
                )));
            }
            let model = Model::init(&spec, seed)?;
            let (x, y, zt) = synthetic_batch(&spec, 6, seed)?;
            let ce = ModelLoss::cross_entropy(&spec, &x, &y);
            let kd = ModelLoss {
                spec: &spec,
                inputs: &x,
                labels: &y,
                target: Target::Distill {
                    teacher_logits: &zt,
                    weights,
                },
            };
            Ok(FamilyCheck {
                family: name.to_string(),
                params: spec.param_count(),
                cross_entropy: check_derivatives(&ce, model.params(), trials, seed)?,
                distillation: check_derivatives(&kd, model.params(), trials, seed ^ 0x5EED)?,
            })
        })
        .collect()
}

/// A tiny model trained briefly (full-batch SGD) on its synthetic batch, so
/// the curvature checks run near a minimum rather than at initialization.
pub fn tiny_checkpoint(spec: &ModelSpec, seed: u64) -> Result<(Model, Tensor, Vec<usize>)> {
    let mut model = Model::init(spec, seed)?;
    let (x, y, _) = synthetic_batch(spec, 24, seed)?;
    let cfg = OptimConfig {
        lr0: 0.05,
        schedule: Schedule::Constant,
        ..OptimConfig::default()
    };
    let mut state = OptimState::new(model.params());
    let loss = ModelLoss::cross_entropy(spec, &x, &y);
    for _ in 0..60 {
        let g = diffcore::grad(&loss, model.params())?;
        sgd_step(model.params_mut(), &g, &mut state, &cfg, cfg.lr0)?;
    }
    Ok((model, x, y))
}

/// Matrix-free estimators against the explicit Hessian of one checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct CurvatureCheck {
    pub family: String,
    pub params: usize,
    pub asymmetry: f64,
    pub exact_trace: f64,
    pub trace_estimate: f64,
    pub trace_stderr: f64,
    pub exact_lambda_max: f64,
    pub lambda_max: f64,
    pub lambda_rel_err: f64,
    /// Largest distance from a full-length Lanczos Ritz node to the nearest
    /// exact eigenvalue, relative to the spectral radius.
    pub ritz_rel_err: f64,
}

impl CurvatureCheck {
    pub fn trace_z_score(&self) -> f64 {
        (self.trace_estimate - self.exact_trace).abs() / self.trace_stderr
    }
}

pub fn check_curvature(
    family: &str,
    spec: &ModelSpec,
    trace_probes: usize,
    seed: u64,
) -> Result<CurvatureCheck> {
    let (model, x, y) = tiny_checkpoint(spec, seed)?;
    let loss = ModelLoss::cross_entropy(spec, &x, &y);
    let theta = model.params();
    let h = dense_hessian(&loss, theta)?;
    let exact = symmetric_eigenvalues(&h);
    let radius = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let exact_lambda_max = *exact.last().expect("non-empty");
    let trace = curvature::hutchinson_trace(&loss, theta, trace_probes, seed)?;
    let top = curvature::top_eigenvalue(&loss, theta, 20_000, 1e-12, seed)?;
    let spectrum = curvature::slq_spectrum(&loss, theta, theta.total_dim(), 1, seed)?;
    let ritz_rel_err = spectrum
        .nodes
        .iter()
        .map(|n| {
            exact
                .iter()
                .map(|e| (n.node - e).abs())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0f64, f64::max)
        / radius;
    Ok(CurvatureCheck {
        family: family.to_string(),
        params: spec.param_count(),
        asymmetry: asymmetry(&h),
        exact_trace: h.trace(),
        trace_estimate: trace.estimate,
        trace_stderr: trace.stderr,
        exact_lambda_max,
        lambda_max: top.lambda,
        lambda_rel_err: (top.lambda - exact_lambda_max).abs() / exact_lambda_max.abs(),
        ritz_rel_err,
    })
}

/// [`check_curvature`] over every tiny family.
pub fn check_curvature_families(trace_probes: usize, seed: u64) -> Result<Vec<CurvatureCheck>> {
    tiny_model_specs()
        .into_iter()
        .map(|(name, spec)| check_curvature(name, &spec, trace_probes, seed))
        .collect()
}
