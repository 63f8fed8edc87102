//! Datasets: a synthetic multi-view generator, CSV and IDX loaders, and a
//! simple augmentation pipeline (flip, shift, Cutout).

mod augment;
mod io;
mod multiview;

pub use augment::{cutout, cutout_at, cutout_seeded, Augmentation};
pub use io::{
    load_csv, load_idx, read_csv, read_idx, write_csv, write_idx_images, write_idx_labels,
};
pub use multiview::{multiview_generate, MultiViewSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Inputs with class labels. Labels are stored as class indices; the one-hot
/// view is available through [`LabeledDataset::one_hot`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    /// Per-sample, per-view presence flags (synthetic data only), row-major
    /// `[n, views]`.
    view_mask: Option<(usize, Vec<bool>)>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if classes < 2 {
            return Err(Error::contract(
                "a labeled dataset needs at least 2 classes",
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract(format!(
                "label {y} out of range for k={classes}"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
            view_mask: None,
        })
    }

    pub(crate) fn with_view_mask(mut self, views: usize, mask: Vec<bool>) -> Self {
        debug_assert_eq!(mask.len(), views * self.labels.len());
        self.view_mask = Some((views, mask));
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample input shape (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Reinterprets every sample as `shape` (same element count).
    pub fn with_sample_shape(&self, shape: &[usize]) -> Result<LabeledDataset> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(LabeledDataset {
            inputs: self.inputs.clone().reshape(full)?,
            ..self.clone()
        })
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.labels[i]] = 1.0;
        v
    }

    /// View presence flags of sample `i`, if recorded.
    pub fn views_of(&self, i: usize) -> Option<&[bool]> {
        self.view_mask.as_ref().map(|(v, m)| &m[i * v..(i + 1) * v])
    }

    /// Number of samples carrying exactly one view.
    pub fn single_view_count(&self) -> Option<usize> {
        self.view_mask.as_ref().map(|(v, m)| {
            m.chunks(*v)
                .filter(|row| row.iter().filter(|&&b| b).count() == 1)
                .count()
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        let view_mask = self.view_mask.as_ref().map(|(v, m)| {
            let mut out = Vec::with_capacity(idx.len() * v);
            for &i in idx {
                out.extend_from_slice(&m[i * v..(i + 1) * v]);
            }
            (*v, out)
        });
        LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            view_mask,
        }
    }

    /// Splits off a seeded random `fraction` as a held-out set; returns
    /// `(rest, heldout)`. Both keep the original relative order.
    pub fn split_heldout(
        &self,
        fraction: f64,
        seed: u64,
    ) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::contract(format!(
                "held-out fraction must be in (0,1), got {fraction}"
            )));
        }
        let n = self.len();
        let n_held = ((n as f64) * fraction).round() as usize;
        if n_held == 0 || n_held == n {
            return Err(Error::contract(format!(
                "held-out split of {n} samples at {fraction} leaves an empty side"
            )));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = perm[..n_held].to_vec();
        let mut rest = perm[n_held..].to_vec();
        held.sort_unstable();
        rest.sort_unstable();
        Ok((self.select(&rest), self.select(&held)))
    }
}

/// Train / held-out (checkpoint selection) / test splits for one experiment.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: LabeledDataset,
    pub heldout: LabeledDataset,
    pub test: LabeledDataset,
}

impl DataSplits {
    /// Carves the held-out selection set out of `train`; `test` is untouched.
    pub fn carve(
        train: &LabeledDataset,
        test: LabeledDataset,
        heldout_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if train.classes() != test.classes() || train.sample_shape() != test.sample_shape() {
            return Err(Error::contract(
                "train and test sets disagree on classes or input shape",
            ));
        }
        let (train, heldout) = train.split_heldout(heldout_fraction, seed)?;
        Ok(DataSplits {
            train,
            heldout,
            test,
        })
    }

    pub fn classes(&self) -> usize {
        self.train.classes()
    }
}
