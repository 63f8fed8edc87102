//! Named derivative and curvature checks against independent oracles.

use std::fmt;

use sdlab::oracle::{check_curvature_families, check_model_families};

/// Relative error allowed between analytic and finite-difference values.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Hutchinson estimate must lie within this many standard errors.
pub const TRACE_Z: f64 = 3.0;
pub const LAMBDA_TOLERANCE: f64 = 1e-3;
pub const RITZ_TOLERANCE: f64 = 1e-8;
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    GradFd,
    HvpFd,
    DenseHessian,
    All,
}

impl Check {
    pub const NAMES: [&'static str; 4] = ["grad-fd", "hvp-fd", "dense-hessian", "all"];

    pub fn parse(name: &str) -> Option<Check> {
        match name {
            "grad-fd" => Some(Check::GradFd),
            "hvp-fd" => Some(Check::HvpFd),
            "dense-hessian" => Some(Check::DenseHessian),
            "all" => Some(Check::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub check: &'static str,
    pub subject: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {} {}: {}",
            self.check, self.subject, self.detail
        )
    }
}

pub fn run_check(
    check: Check,
    trials: usize,
    trace_probes: usize,
    seed: u64,
) -> sdlab::Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    let wants = |c: Check| check == c || check == Check::All;
    if wants(Check::GradFd) || wants(Check::HvpFd) {
        for fam in check_model_families(trials, seed)? {
            for (loss, d) in [
                ("cross-entropy", &fam.cross_entropy),
                ("distillation", &fam.distillation),
            ] {
                let subject = format!("{}/{loss} ({} params)", fam.family, fam.params);
                if wants(Check::GradFd) {
                    lines.push(CheckLine {
                        check: "grad-fd",
                        subject: subject.clone(),
                        passed: d.max_grad_rel_err < FD_TOLERANCE,
                        detail: format!(
                            "max rel err {:.2e} over {} trials ({} kink draws skipped)",
                            d.max_grad_rel_err, d.trials, d.nonsmooth_skipped
                        ),
                    });
                }
                if wants(Check::HvpFd) {
                    lines.push(CheckLine {
                        check: "hvp-fd",
                        subject,
                        passed: d.max_hvp_rel_err < FD_TOLERANCE,
                        detail: format!(
                            "max rel err {:.2e} over {} trials ({} kink draws skipped)",
                            d.max_hvp_rel_err, d.trials, d.nonsmooth_skipped
                        ),
                    });
                }
            }
        }
    }
    if wants(Check::DenseHessian) {
        for c in check_curvature_families(trace_probes, seed)? {
            let z = c.trace_z_score();
            lines.push(CheckLine {
                check: "dense-hessian",
                subject: format!("{} ({} params)", c.family, c.params),
                passed: c.asymmetry < SYMMETRY_TOLERANCE
                    && z <= TRACE_Z
                    && c.lambda_rel_err < LAMBDA_TOLERANCE
                    && c.ritz_rel_err < RITZ_TOLERANCE,
                detail: format!(
                    "asymmetry {:.1e}, trace {:.4} vs {:.4} (z {z:.2}), lambda_max rel err {:.1e}, Ritz rel err {:.1e}",
                    c.asymmetry, c.trace_estimate, c.exact_trace, c.lambda_rel_err, c.ritz_rel_err
                ),
            });
        }
    }
    Ok(lines)
}
