use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Synthetic data in which every class owns several independent "views".
///
/// The input is `views_per_class` coordinate blocks of `feature_dim` entries.
/// Block `j` of a class-`c` sample carries that class's `j`-th template (a
/// unit vector, scaled by `signal`) plus Gaussian noise. Templates of
/// different classes inside one block are mutually orthogonal. A fraction
/// `single_view_fraction` of samples carries exactly one of its class's
/// views; the other blocks hold noise only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiViewSpec {
    pub classes: usize,
    pub views_per_class: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Template scale; `None` means `5 × noise_std` (or 1 when noise is 0).
    pub signal: Option<f64>,
    pub single_view_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for MultiViewSpec {
    fn default() -> Self {
        MultiViewSpec {
            classes: 4,
            views_per_class: 2,
            feature_dim: 16,
            noise_std: 1.0,
            signal: None,
            single_view_fraction: 0.1,
            n_train: 4000,
            n_test: 2000,
            seed: 0,
        }
    }
}

impl MultiViewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("multi-view data needs at least 2 classes"));
        }
        if self.views_per_class < 2 {
            return Err(Error::contract("views_per_class must be >= 2"));
        }
        if self.feature_dim < self.classes {
            return Err(Error::contract(format!(
                "feature_dim {} cannot hold {} orthogonal templates per view block",
                self.feature_dim, self.classes
            )));
        }
        if !(0.0..=1.0).contains(&self.single_view_fraction) {
            return Err(Error::contract(format!(
                "single_view_fraction must be in [0,1], got {}",
                self.single_view_fraction
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::contract("noise_std must be >= 0"));
        }
        if let Some(s) = self.signal {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::contract("signal must be > 0"));
            }
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::contract("n_train and n_test must be positive"));
        }
        Ok(())
    }

    pub fn signal_strength(&self) -> f64 {
        self.signal.unwrap_or(if self.noise_std > 0.0 {
            5.0 * self.noise_std
        } else {
            1.0
        })
    }

    pub fn input_dim(&self) -> usize {
        self.views_per_class * self.feature_dim
    }
}

/// `templates[view][class]`: orthonormal within each view block.
fn templates(spec: &MultiViewSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let d = spec.feature_dim;
    (0..spec.views_per_class)
        .map(|_| {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
            while basis.len() < spec.classes {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= n);
                    basis.push(v);
                }
            }
            basis
        })
        .collect()
}

fn draw(
    spec: &MultiViewSpec,
    tpl: &[Vec<Vec<f64>>],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let (v, d) = (spec.views_per_class, spec.feature_dim);
    let dim = v * d;
    let signal = spec.signal_strength();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::contract(e.to_string()))?;
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n * v);
    for _ in 0..n {
        let c = rng.random_range(0..spec.classes);
        let present: Vec<bool> = if rng.random::<f64>() < spec.single_view_fraction {
            let keep = rng.random_range(0..v);
            (0..v).map(|j| j == keep).collect()
        } else {
            vec![true; v]
        };
        for (j, &on) in present.iter().enumerate() {
            for t in 0..d {
                let base = if on { signal * tpl[j][c][t] } else { 0.0 };
                let eps = if spec.noise_std > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                x.push(base + eps);
            }
        }
        labels.push(c);
        mask.extend(present);
    }
    let inputs = Tensor::new(vec![n, dim], x)?;
    Ok(LabeledDataset::new(inputs, labels, spec.classes)?.with_view_mask(v, mask))
}

/// Draws independent train and test sets from one seeded stream.
pub fn multiview_generate(spec: &MultiViewSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tpl = templates(spec, &mut rng);
    let train = draw(spec, &tpl, spec.n_train, &mut rng)?;
    let test = draw(spec, &tpl, spec.n_test, &mut rng)?;
    Ok((train, test))
}
