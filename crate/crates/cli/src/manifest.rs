//! Experiment manifest: a TOML file describing one experiment grid cell.
//!
//! ```toml
//! kind = "self-distill"
//! seeds = [0, 1, 2]
//! output_dir = "runs/mlp-multiview"
//!
//! [model]
//! kind = "mlp"
//! widths = [32]
//!
//! [data]
//! source = "multiview"
//! classes = 4
//!
//! [distill]
//! alpha = 0.5
//! rounds = 3
//! epochs = 20
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sdlab::curvature::CurvatureConfig;
use sdlab::data::{
    load_csv, load_idx, multiview_generate, Augmentation, DataSplits, LabeledDataset, MultiViewSpec,
};
use sdlab::distill::{CheckpointPolicy, DistillConfig};
use sdlab::models::{ModelKind, ModelSpec};
use sdlab::objectives::KDWeights;
use sdlab::optim::{OptimConfig, SamConfig};

use crate::error::CliError;

/// Environment variable holding the root that relative `output_dir`s are
/// resolved against. Unset means the current directory.
pub const OUTPUT_ROOT_ENV: &str = "SDLAB_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Scratch,
    SelfDistill,
    EnsembleTeacher,
    Ban,
    Sam,
    CurvatureSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    /// Taken from the data when absent.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    /// Taken from the data when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "yes")]
    pub skip_connections: bool,
    #[serde(default = "one")]
    pub blocks_per_stage: usize,
    #[serde(default)]
    pub channel_affine: bool,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// Synthetic multi-view data. Run seed `s` generates with `seed + s`.
    Multiview(MultiViewSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
        /// Reinterpret each flat row as `[c, h, w]`.
        #[serde(default)]
        image_shape: Option<Vec<usize>>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub alpha: f64,
    pub tau: f64,
    /// Models in a self-distillation chain, the scratch teacher included.
    pub rounds: usize,
    pub epochs: usize,
    pub checkpoint: CheckpointPolicy,
    pub augmentation: Option<Augmentation>,
}

impl Default for DistillSection {
    fn default() -> Self {
        let w = KDWeights::default();
        DistillSection {
            alpha: w.alpha,
            tau: w.tau,
            rounds: 2,
            epochs: 10,
            checkpoint: CheckpointPolicy::BestHeldout,
            augmentation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub sizes: Vec<usize>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            sizes: vec![1, 2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamSection {
    pub rho: f64,
    /// Also train a SAM model next to a self-distillation chain.
    pub baseline: bool,
}

impl Default for SamSection {
    fn default() -> Self {
        SamSection {
            rho: SamConfig::default().rho,
            baseline: false,
        }
    }
}

fn default_heldout() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    pub model: ModelSection,
    pub data: DataSource,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub curvature: Option<CurvatureConfig>,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub sam: SamSection,
    /// Directory relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Manifest, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut m = Self::parse(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    /// Number of models in the self-distillation chain this kind trains.
    pub fn chain_length(&self) -> usize {
        match self.kind {
            ExperimentKind::Scratch | ExperimentKind::Sam | ExperimentKind::EnsembleTeacher => 1,
            _ => self.distill.rounds,
        }
    }

    pub fn trains_sam(&self) -> bool {
        self.kind == ExperimentKind::Sam || self.sam.baseline
    }

    /// Every problem found, in a stable order. Empty means valid.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        let mut check = |r: sdlab::Result<()>, ctx: &str| {
            if let Err(e) = r {
                issues.push(format!("{ctx}: {e}"));
            }
        };
        if self.seeds.is_empty() {
            check(
                Err(sdlab::Error::Contract(
                    "at least one seed is required".into(),
                )),
                "seeds",
            );
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            check(
                Err(sdlab::Error::Contract("seeds must be distinct".into())),
                "seeds",
            );
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            check(
                Err(sdlab::Error::Contract(format!(
                    "must be in (0,1), got {}",
                    self.heldout_fraction
                ))),
                "heldout_fraction",
            );
        }
        if self.output_dir.as_os_str().is_empty() {
            check(
                Err(sdlab::Error::Contract("must not be empty".into())),
                "output_dir",
            );
        }

        match &self.data {
            DataSource::Multiview(spec) => check(spec.validate(), "data"),
            DataSource::Csv {
                train,
                test,
                image_shape,
                ..
            } => {
                for p in [train, test] {
                    if !self.resolve(p).is_file() {
                        check(
                            Err(sdlab::Error::Contract(format!(
                                "{} not found",
                                self.resolve(p).display()
                            ))),
                            "data",
                        );
                    }
                }
                if image_shape.as_ref().is_some_and(|s| s.len() != 3) {
                    check(
                        Err(sdlab::Error::Contract("image_shape must be [c,h,w]".into())),
                        "data",
                    );
                }
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !self.resolve(p).is_file() {
                        check(
                            Err(sdlab::Error::Contract(format!(
                                "{} not found",
                                self.resolve(p).display()
                            ))),
                            "data",
                        );
                    }
                }
            }
        }

        if let Some(spec) = self.static_model_spec() {
            check(spec.validate(), "model");
        }
        if let (DataSource::Multiview(d), Some(k)) = (&self.data, self.model.classes) {
            if k != d.classes {
                check(
                    Err(sdlab::Error::Contract(format!(
                        "model.classes {k} but data has {}",
                        d.classes
                    ))),
                    "model",
                );
            }
        }

        let weights = KDWeights {
            alpha: self.distill.alpha,
            tau: self.distill.tau,
        };
        check(weights.validate(), "distill");
        if self.distill.epochs == 0 {
            check(
                Err(sdlab::Error::Contract("epochs must be >= 1".into())),
                "distill",
            );
        }
        if self.chain_length() == 0 {
            check(
                Err(sdlab::Error::Contract("rounds must be >= 1".into())),
                "distill",
            );
        }
        if let Some(a) = &self.distill.augmentation {
            let image = self
                .static_model_spec()
                .map(|s| s.input_shape.len() == 3)
                .unwrap_or(self.model.kind != ModelKind::Mlp);
            if !image && !a.is_identity() {
                check(
                    Err(sdlab::Error::Contract(
                        "augmentation needs image inputs [c,h,w]".into(),
                    )),
                    "distill",
                );
            }
        }

        check(self.optim.validate(), "optim");
        if self.optim.sam.is_some() {
            check(
                Err(sdlab::Error::Contract(
                    "optim.sam is not allowed; SAM models are configured in [sam]".into(),
                )),
                "optim",
            );
        }
        if !(self.sam.rho > 0.0 && self.sam.rho.is_finite()) {
            check(Err(sdlab::Error::Contract("rho must be > 0".into())), "sam");
        }

        if self.kind == ExperimentKind::EnsembleTeacher
            && (self.ensemble.sizes.is_empty() || self.ensemble.sizes.contains(&0))
        {
            check(
                Err(sdlab::Error::Contract(
                    "sizes must be a non-empty list of positive sizes".into(),
                )),
                "ensemble",
            );
        }
        if self.kind == ExperimentKind::CurvatureSweep && self.curvature.is_none() {
            check(
                Err(sdlab::Error::Contract(
                    "curvature-sweep needs a [curvature] section".into(),
                )),
                "curvature",
            );
        }
        if let Some(c) = &self.curvature {
            let bad = |m: &str| Err(sdlab::Error::Contract(m.into()));
            if c.trace_probes == 0 || c.slq_probes == 0 {
                check(bad("probe counts must be >= 1"), "curvature");
            }
            if c.lanczos_steps < 2 {
                check(bad("lanczos_steps must be >= 2"), "curvature");
            }
            if c.power_iters == 0 || !(c.power_tol > 0.0) {
                check(
                    bad("power_iters must be >= 1 and power_tol > 0"),
                    "curvature",
                );
            }
            if c.subsample == 0 {
                check(bad("subsample must be >= 1"), "curvature");
            }
            if let Some(s) = &c.slice {
                if s.resolution < 3 || s.resolution.is_multiple_of(2) || !(s.extent > 0.0) {
                    check(
                        bad("slice needs an odd resolution >= 3 and extent > 0"),
                        "curvature",
                    );
                }
            }
        }
        issues
    }

    /// The model spec when it can be known without reading data files.
    fn static_model_spec(&self) -> Option<ModelSpec> {
        let (shape, k) = match &self.data {
            DataSource::Multiview(d) => (
                self.model
                    .input_shape
                    .clone()
                    .unwrap_or(vec![d.input_dim()]),
                self.model.classes.unwrap_or(d.classes),
            ),
            _ => (self.model.input_shape.clone()?, self.model.classes?),
        };
        Some(self.spec_for(shape, k))
    }

    fn spec_for(&self, input_shape: Vec<usize>, classes: usize) -> ModelSpec {
        ModelSpec {
            kind: self.model.kind,
            input_shape,
            widths: self.model.widths.clone(),
            classes,
            skip_connections: self.model.skip_connections,
            blocks_per_stage: self.model.blocks_per_stage,
            channel_affine: self.model.channel_affine,
            init_seed: 0,
        }
    }

    fn load_sets(&self, run_seed: u64) -> sdlab::Result<(LabeledDataset, LabeledDataset)> {
        match &self.data {
            DataSource::Multiview(spec) => multiview_generate(&MultiViewSpec {
                seed: spec.seed.wrapping_add(run_seed),
                ..spec.clone()
            }),
            DataSource::Csv {
                train,
                test,
                classes,
                image_shape,
            } => {
                let mut tr = load_csv(&self.resolve(train), *classes)?;
                let mut te = load_csv(&self.resolve(test), Some(tr.classes()))?;
                if let Some(shape) = image_shape {
                    tr = tr.with_sample_shape(shape)?;
                    te = te.with_sample_shape(shape)?;
                }
                Ok((tr, te))
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => {
                let tr = load_idx(
                    &self.resolve(train_images),
                    &self.resolve(train_labels),
                    *classes,
                )?;
                let te = load_idx(
                    &self.resolve(test_images),
                    &self.resolve(test_labels),
                    Some(tr.classes()),
                )?;
                Ok((tr, te))
            }
        }
    }

    /// Data splits and the student architecture for one run seed.
    pub fn prepare(&self, run_seed: u64) -> sdlab::Result<(DataSplits, ModelSpec)> {
        let (train, test) = self.load_sets(run_seed)?;
        let splits = DataSplits::carve(&train, test, self.heldout_fraction, run_seed)?;
        let shape = self
            .model
            .input_shape
            .clone()
            .unwrap_or_else(|| splits.train.sample_shape().to_vec());
        let k = self.model.classes.unwrap_or(splits.classes());
        let spec = self.spec_for(shape, k);
        spec.validate()?;
        Ok((splits, spec))
    }

    pub fn distill_config(&self, spec: ModelSpec, run_seed: u64) -> DistillConfig {
        DistillConfig {
            model: spec,
            weights: KDWeights {
                alpha: self.distill.alpha,
                tau: self.distill.tau,
            },
            rounds: self.chain_length(),
            epochs: self.distill.epochs,
            optim: self.optim.clone(),
            seed: run_seed,
            augmentation: self.distill.augmentation.clone(),
            checkpoint: self.distill.checkpoint,
        }
    }

    /// One-line description used as the row label of the accuracy table.
    pub fn describe(&self) -> String {
        let data = match &self.data {
            DataSource::Multiview(_) => "multiview",
            DataSource::Csv { .. } => "csv",
            DataSource::Idx { .. } => "idx",
        };
        let aug = match &self.distill.augmentation {
            Some(a) if !a.is_identity() => "aug",
            _ => "no-aug",
        };
        let model = serde_json::to_value(self.model.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        format!("{model} / {data} / {aug} / alpha={}", self.distill.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
kind = "self-distill"
seeds = [0, 1]
output_dir = "out"

[model]
kind = "mlp"
widths = [8]

[data]
source = "multiview"
classes = 3
feature_dim = 4
n_train = 100
n_test = 50
"#;

    #[test]
    fn minimal_manifest_is_valid() {
        let m = Manifest::parse(MINIMAL).unwrap();
        assert!(m.validate().is_empty(), "{:?}", m.validate());
        assert_eq!(m.distill.rounds, 2);
        assert_eq!(m.optim, OptimConfig::default());
    }

    #[test]
    fn zero_seeds_is_a_validation_error() {
        let m = Manifest::parse(&MINIMAL.replace("seeds = [0, 1]", "seeds = []")).unwrap();
        let issues = m.validate();
        assert_eq!(issues.len(), 1);
        assert!(issues[0].starts_with("seeds"));
    }

    #[test]
    fn unknown_keys_and_bad_sections_are_reported() {
        assert!(Manifest::parse(&format!("{MINIMAL}\n[distill]\nalpah = 0.3\n")).is_err());
        let m =
            Manifest::parse(&format!("{MINIMAL}\n[distill]\nalpha = 1.5\nepochs = 0\n")).unwrap();
        assert_eq!(m.validate().len(), 2);
        let m = Manifest::parse(&MINIMAL.replace("self-distill", "curvature-sweep")).unwrap();
        assert_eq!(m.validate().len(), 1);
    }

    #[test]
    fn prepare_fills_shape_and_classes_from_data() {
        let m = Manifest::parse(MINIMAL).unwrap();
        let (splits, spec) = m.prepare(3).unwrap();
        assert_eq!(spec.input_shape, vec![8]);
        assert_eq!(spec.classes, 3);
        assert_eq!(splits.train.len() + splits.heldout.len(), 100);
    }
}
