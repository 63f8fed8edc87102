//! Training procedures: scratch training, multi-round self-distillation,
//! ensembles, ensemble-as-teacher distillation and Born-Again averaging.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Augmentation, DataSplits, LabeledDataset};
use crate::diffcore::{self, Tensor};
use crate::error::{Error, Result};
use crate::models::{Model, ModelLoss, ModelSpec, Target};
use crate::objectives::{argmax, mean_cross_entropy, mean_squared_gap, KDWeights};
use crate::optim::{sam_step, sgd_step, OptimConfig, OptimState};
use crate::seeds::derive_seed;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_MEMBER: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointPolicy {
    /// Keep the epoch with the highest held-out accuracy (earliest on ties).
    BestHeldout,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub weights: KDWeights,
    /// Number of models in a self-distillation chain, scratch model included.
    pub rounds: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    /// Image augmentation; only valid for `[c,h,w]` inputs.
    #[serde(default)]
    pub augmentation: Option<Augmentation>,
    #[serde(default = "default_policy")]
    pub checkpoint: CheckpointPolicy,
}

fn default_policy() -> CheckpointPolicy {
    CheckpointPolicy::BestHeldout
}

impl DistillConfig {
    pub fn new(model: ModelSpec) -> Self {
        DistillConfig {
            model,
            weights: KDWeights::default(),
            rounds: 1,
            epochs: 10,
            optim: OptimConfig::default(),
            seed: 0,
            augmentation: None,
            checkpoint: CheckpointPolicy::BestHeldout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be >= 1"));
        }
        if let Some(a) = &self.augmentation {
            if self.model.input_shape.len() != 3 && !a.is_identity() {
                return Err(Error::contract("augmentation needs image inputs [c,h,w]"));
            }
        }
        Ok(())
    }

    fn check_data(&self, data: &DataSplits) -> Result<()> {
        if data.classes() != self.model.classes {
            return Err(Error::contract(format!(
                "data has k={} but the model has k={}",
                data.classes(),
                self.model.classes
            )));
        }
        if data.train.sample_shape() != self.model.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "data samples are {:?}, model expects {:?}",
                data.train.sample_shape(),
                self.model.input_shape
            )));
        }
        Ok(())
    }
}

/// Anything that produces frozen logits: a model or an ensemble.
pub trait Teacher: Sync {
    fn classes(&self) -> usize;
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Teacher for Model {
    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<Model>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let k = members
            .first()
            .ok_or_else(|| Error::contract("an ensemble needs at least one member"))?
            .classes();
        if members.iter().any(|m| m.classes() != k) {
            return Err(Error::contract("ensemble members disagree on k"));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Teacher for Ensemble {
    fn classes(&self) -> usize {
        self.members[0].classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        ensemble_logits(self, x)
    }
}

/// Elementwise mean of per-model logits, summed in member order.
fn mean_logits<'a>(models: impl ExactSizeIterator<Item = &'a Model>, x: &Tensor) -> Result<Tensor> {
    let m = models.len();
    let mut acc: Option<Tensor> = None;
    for model in models {
        let z = model.forward(x)?;
        match acc.as_mut() {
            None => acc = Some(z),
            Some(a) => {
                if a.shape() != z.shape() {
                    return Err(Error::shape("members produce differently shaped logits"));
                }
                a.data_mut()
                    .iter_mut()
                    .zip(z.data())
                    .for_each(|(s, v)| *s += v);
            }
        }
    }
    let mut out = acc.ok_or_else(|| Error::contract("mean of zero models"))?;
    let inv = m as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= inv);
    Ok(out)
}

pub fn ensemble_logits(ens: &Ensemble, x: &Tensor) -> Result<Tensor> {
    mean_logits(ens.members.iter(), x)
}

/// Born-Again prediction: mean logits of every round's checkpoint.
pub fn ban_predict(records: &[RoundRecord], x: &Tensor) -> Result<Tensor> {
    if records.is_empty() {
        return Err(Error::contract("ban_predict needs at least one round"));
    }
    mean_logits(records.iter().map(|r| &r.model), x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train: SplitMetrics,
    pub heldout: SplitMetrics,
    pub test: SplitMetrics,
}

/// Accuracy and mean cross-entropy of logits against labels.
pub fn score(logits: &Tensor, labels: &[usize]) -> Result<SplitMetrics> {
    let loss = mean_cross_entropy(logits, labels)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    Ok(SplitMetrics {
        accuracy: hits as f64 / labels.len() as f64,
        loss,
    })
}

pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<SplitMetrics> {
    score(&model.forward(data.inputs())?, data.labels())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    /// The checkpoint selected by the configured policy, in eval mode.
    pub model: Model,
    pub history: Vec<EpochMetrics>,
    /// Epoch (1-based) the checkpoint was taken at.
    pub checkpoint_epoch: usize,
    /// Mean squared logit gap to the teacher on the held-out split.
    pub discrepancy: Option<f64>,
}

impl RoundRecord {
    pub fn checkpoint_metrics(&self) -> &EpochMetrics {
        &self.history[self.checkpoint_epoch - 1]
    }
}

/// A round that stopped early; `history` holds the completed epochs.
#[derive(Debug)]
pub struct RoundFailure {
    pub round: usize,
    pub history: Vec<EpochMetrics>,
    pub error: Error,
}

impl fmt::Display for RoundFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round {} failed after {} epochs: {}",
            self.round,
            self.history.len(),
            self.error
        )
    }
}

impl std::error::Error for RoundFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl RoundFailure {
    fn before_start(round: usize, error: Error) -> Self {
        RoundFailure {
            round,
            history: Vec::new(),
            error,
        }
    }
}

/// Completed rounds of a chain plus the failure that stopped it.
#[derive(Debug)]
pub struct ChainFailure {
    pub completed: Vec<RoundRecord>,
    pub failure: RoundFailure,
}

impl fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} rounds completed)",
            self.failure,
            self.completed.len()
        )
    }
}

impl std::error::Error for ChainFailure {}

fn batch_size(cfg: &OptimConfig, n: usize) -> usize {
    cfg.batch_size.min(n)
}

/// Trains a fresh student. With a teacher the loss is the distillation
/// loss against its logits on the same (augmented) batch, otherwise plain
/// cross-entropy. The teacher is only read.
pub fn train_round(
    teacher: Option<&dyn Teacher>,
    cfg: &DistillConfig,
    data: &DataSplits,
) -> std::result::Result<RoundRecord, RoundFailure> {
    let round = usize::from(teacher.is_some());
    let fail = |e| RoundFailure::before_start(round, e);
    cfg.validate().map_err(fail)?;
    cfg.check_data(data).map_err(fail)?;
    if let Some(t) = teacher {
        if t.classes() != cfg.model.classes {
            return Err(fail(Error::contract("teacher and student disagree on k")));
        }
    }
    let teacher = teacher.filter(|_| cfg.weights.alpha < 1.0);

    let mut student = Model::init(&cfg.model, derive_seed(cfg.seed, STREAM_INIT)).map_err(fail)?;
    let mut state = OptimState::new(student.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AUGMENT));
    let augment = cfg.augmentation.as_ref().filter(|a| !a.is_identity());

    let n = data.train.len();
    let bs = batch_size(&cfg.optim, n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.epochs {
        let outcome = (|| -> Result<()> {
            order.shuffle(&mut shuffle_rng);
            for idx in order.chunks(bs) {
                let mut xb = data.train.inputs().select_rows(idx);
                if let Some(a) = augment {
                    xb = a.apply(&xb, &mut aug_rng)?;
                }
                let yb: Vec<usize> = idx.iter().map(|&i| data.train.labels()[i]).collect();
                let zt = match teacher {
                    Some(t) => Some(t.logits(&xb)?),
                    None => None,
                };
                let target = match &zt {
                    Some(z) => Target::Distill {
                        teacher_logits: z,
                        weights: cfg.weights,
                    },
                    None => Target::Labels,
                };
                let loss = ModelLoss {
                    spec: &cfg.model,
                    inputs: &xb,
                    labels: &yb,
                    target,
                };
                let lr = cfg.optim.lr_at(state.step_count, total_steps);
                if cfg.optim.sam.is_some() {
                    sam_step(student.params_mut(), &loss, &mut state, &cfg.optim, lr)?;
                } else {
                    let (_, g) = diffcore::value_and_grad(&loss, student.params())?;
                    sgd_step(student.params_mut(), &g, &mut state, &cfg.optim, lr)?;
                }
            }
            let metrics = EpochMetrics {
                epoch,
                train: evaluate(&student, &data.train)?,
                heldout: evaluate(&student, &data.heldout)?,
                test: evaluate(&student, &data.test)?,
            };
            if !(metrics.train.loss.is_finite() && metrics.heldout.loss.is_finite()) {
                return Err(Error::NumericOverflow {
                    segment: "logits".into(),
                });
            }
            history.push(metrics);
            Ok(())
        })();
        if let Err(error) = outcome {
            return Err(RoundFailure {
                round,
                history,
                error,
            });
        }
        let acc = history[epoch - 1].heldout.accuracy;
        let keep = match cfg.checkpoint {
            CheckpointPolicy::Last => epoch == cfg.epochs,
            CheckpointPolicy::BestHeldout => best.as_ref().is_none_or(|b| acc > b.0),
        };
        if keep {
            best = Some((acc, epoch, student.clone().eval()));
        }
    }

    let (_, checkpoint_epoch, model) = best.expect("at least one epoch ran");
    let discrepancy = match teacher {
        Some(t) => {
            let zs = model.forward(data.heldout.inputs());
            let zt = t.logits(data.heldout.inputs());
            Some(
                zs.and_then(|zs| mean_squared_gap(&zs, &zt?))
                    .map_err(|e| RoundFailure {
                        round,
                        history: history.clone(),
                        error: e,
                    })?,
            )
        }
        None => None,
    };
    Ok(RoundRecord {
        round,
        model,
        history,
        checkpoint_epoch,
        discrepancy,
    })
}

/// Round 0 trains from scratch; round `n` distills from round `n-1`'s
/// checkpoint. Produces `cfg.rounds` records.
pub fn self_distill(
    cfg: &DistillConfig,
    data: &DataSplits,
) -> std::result::Result<Vec<RoundRecord>, ChainFailure> {
    self_distill_with(cfg, data, |_| Ok(()))
}

/// [`self_distill`] with a hook called after each completed round (for
/// persisting records as they finish). A hook error stops the chain.
pub fn self_distill_with(
    cfg: &DistillConfig,
    data: &DataSplits,
    mut on_round: impl FnMut(&RoundRecord) -> Result<()>,
) -> std::result::Result<Vec<RoundRecord>, ChainFailure> {
    if cfg.rounds == 0 {
        return Err(ChainFailure {
            completed: Vec::new(),
            failure: RoundFailure::before_start(
                0,
                Error::contract("self_distill needs rounds >= 1"),
            ),
        });
    }
    let mut records: Vec<RoundRecord> = Vec::with_capacity(cfg.rounds);
    for n in 0..cfg.rounds {
        let teacher = records.last().map(|r| &r.model as &dyn Teacher);
        let outcome = train_round(teacher, cfg, data).and_then(|mut r| {
            r.round = n;
            on_round(&r).map_err(|e| RoundFailure {
                round: n,
                history: r.history.clone(),
                error: e,
            })?;
            Ok(r)
        });
        match outcome {
            Ok(r) => records.push(r),
            Err(mut failure) => {
                failure.round = n;
                return Err(ChainFailure {
                    completed: records,
                    failure,
                });
            }
        }
    }
    Ok(records)
}

pub fn distill_from_ensemble(
    teacher: &Ensemble,
    cfg: &DistillConfig,
    data: &DataSplits,
) -> std::result::Result<RoundRecord, RoundFailure> {
    train_round(Some(teacher), cfg, data)
}

/// Seed used for ensemble member `i` under base seed `seed`.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    derive_seed(seed, STREAM_MEMBER + i as u64)
}

/// Trains `m` scratch models concurrently, member `i` with
/// [`member_seed`]`(cfg.seed, i)`. The result is ordered by member index.
pub fn train_ensemble(
    cfg: &DistillConfig,
    data: &DataSplits,
    m: usize,
) -> std::result::Result<Vec<RoundRecord>, RoundFailure> {
    if m == 0 {
        return Err(RoundFailure::before_start(
            0,
            Error::contract("ensemble size must be >= 1"),
        ));
    }
    (0..m)
        .into_par_iter()
        .map(|i| {
            let member_cfg = DistillConfig {
                seed: member_seed(cfg.seed, i),
                ..cfg.clone()
            };
            train_round(None, &member_cfg, data)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{multiview_generate, MultiViewSpec};
    use crate::optim::Schedule;

    fn small_data(seed: u64) -> DataSplits {
        let spec = MultiViewSpec {
            classes: 3,
            views_per_class: 2,
            feature_dim: 4,
            n_train: 240,
            n_test: 60,
            seed,
            ..Default::default()
        };
        let (train, test) = multiview_generate(&spec).unwrap();
        DataSplits::carve(&train, test, 0.25, seed).unwrap()
    }

    fn small_cfg() -> DistillConfig {
        DistillConfig {
            epochs: 3,
            optim: OptimConfig {
                lr0: 0.05,
                batch_size: 32,
                schedule: Schedule::Constant,
                ..OptimConfig::default()
            },
            ..DistillConfig::new(ModelSpec::mlp(8, vec![6], 3))
        }
    }

    #[test]
    fn single_round_is_one_scratch_record() {
        let data = small_data(1);
        let recs = self_distill(&small_cfg(), &data).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].round, 0);
        assert!(recs[0].discrepancy.is_none());
        assert_eq!(recs[0].history.len(), 3);
    }

    #[test]
    fn chain_links_each_round_to_its_predecessor() {
        let data = small_data(2);
        let cfg = DistillConfig {
            rounds: 3,
            ..small_cfg()
        };
        let recs = self_distill(&cfg, &data).unwrap();
        assert_eq!(
            recs.iter().map(|r| r.round).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(recs[1..].iter().all(|r| r.discrepancy.is_some()));
    }

    #[test]
    fn alpha_one_rounds_are_bit_identical() {
        let data = small_data(3);
        let cfg = DistillConfig {
            rounds: 3,
            weights: KDWeights::new(1.0, 4.0).unwrap(),
            ..small_cfg()
        };
        let recs = self_distill(&cfg, &data).unwrap();
        let bits = |m: &Model| {
            m.params()
                .flatten()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&recs[0].model), bits(&recs[1].model));
        assert_eq!(bits(&recs[1].model), bits(&recs[2].model));
        assert_eq!(recs[0].history, recs[2].history);
    }

    #[test]
    fn best_heldout_checkpoint_matches_history_max() {
        let data = small_data(4);
        let rec = train_round(None, &small_cfg(), &data).unwrap();
        let best = rec
            .history
            .iter()
            .map(|e| e.heldout.accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rec.checkpoint_metrics().heldout.accuracy, best);
        assert_eq!(evaluate(&rec.model, &data.heldout).unwrap().accuracy, best);
    }

    #[test]
    fn teacher_is_untouched_and_ensemble_of_one_matches() {
        let data = small_data(5);
        let cfg = small_cfg();
        let t = train_round(None, &cfg, &data).unwrap().model;
        let sum = t.params().checksum();
        let a = train_round(Some(&t), &cfg, &data).unwrap();
        assert_eq!(t.params().checksum(), sum);
        let ens = Ensemble::new(vec![t.clone()]).unwrap();
        let b = distill_from_ensemble(&ens, &cfg, &data).unwrap();
        assert_eq!(a, b);
        let ens2 = Ensemble::new(vec![t.clone(), t]).unwrap();
        assert_eq!(distill_from_ensemble(&ens2, &cfg, &data).unwrap(), a);
    }

    #[test]
    fn divergence_keeps_partial_history() {
        let data = small_data(6);
        let cfg = DistillConfig {
            epochs: 4,
            optim: OptimConfig {
                lr0: 1e200,
                clip_norm: None,
                momentum: 0.0,
                weight_decay: 0.0,
                ..small_cfg().optim
            },
            ..small_cfg()
        };
        let err = train_round(None, &cfg, &data).unwrap_err();
        assert!(err.history.len() < 4);
        assert!(matches!(
            err.error,
            Error::NumericOverflow { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NonFiniteInput(_)
        ));
    }

    #[test]
    fn ensemble_members_are_order_independent() {
        let data = small_data(7);
        let cfg = small_cfg();
        let ens = train_ensemble(&cfg, &data, 3).unwrap();
        let solo = train_round(
            None,
            &DistillConfig {
                seed: member_seed(cfg.seed, 2),
                ..cfg.clone()
            },
            &data,
        )
        .unwrap();
        assert_eq!(ens[2], solo);
        assert_ne!(ens[0].model, ens[1].model);
    }

    #[test]
    fn ensemble_of_opposites_is_zero() {
        let spec = ModelSpec::mlp(2, vec![3], 2);
        let a = Model::init(&spec, 1).unwrap();
        let mut b = a.clone();
        // negate the head so logits flip sign
        for name in ["head.weight", "head.bias"] {
            let i = b.params().segment_index(name).unwrap();
            b.params_mut()
                .segment_mut(i)
                .iter_mut()
                .for_each(|v| *v = -*v);
        }
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let z = ensemble_logits(&Ensemble::new(vec![a, b]).unwrap(), &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
