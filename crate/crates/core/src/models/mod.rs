//! Desk-scale classifiers: a ReLU MLP, a small CNN and a plain ResNet whose
//! identity shortcuts can be switched off. All of them end in a linear layer
//! producing raw logits; softmax is applied downstream by the objectives.
//!
//! There is no batch normalization. An optional per-channel affine scale and
//! shift (`channel_affine`) stands in for it so that the loss stays a
//! function of the parameters alone.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Objective, ParameterVector, Scalar, SegmentSpec, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::objectives::KDWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    SmallCnn,
    PlainResnet,
}

fn default_blocks() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Architecture descriptor. The parameter layout is a pure function of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-sample input shape: `[d]` (or any shape, flattened) for the MLP,
    /// `[channels, height, width]` for the convolutional kinds.
    pub input_shape: Vec<usize>,
    /// Hidden widths (MLP) or per-stage channel counts (CNN / ResNet).
    pub widths: Vec<usize>,
    pub classes: usize,
    /// Identity shortcuts in residual blocks (plain-resnet only).
    #[serde(default = "default_true")]
    pub skip_connections: bool,
    /// Residual blocks per stage (plain-resnet only).
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default)]
    pub channel_affine: bool,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape: vec![input_dim],
            widths: hidden,
            classes,
            skip_connections: true,
            blocks_per_stage: 1,
            channel_affine: false,
            init_seed: 0,
        }
    }

    pub fn small_cnn(input_shape: [usize; 3], channels: Vec<usize>, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SmallCnn,
            input_shape: input_shape.to_vec(),
            widths: channels,
            ..Self::mlp(1, vec![], classes)
        }
    }

    pub fn plain_resnet(
        input_shape: [usize; 3],
        stage_channels: Vec<usize>,
        blocks_per_stage: usize,
        classes: usize,
        skip_connections: bool,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::PlainResnet,
            input_shape: input_shape.to_vec(),
            widths: stage_channels,
            blocks_per_stage,
            skip_connections,
            ..Self::mlp(1, vec![], classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract(format!(
                "need k >= 2 classes, got {}",
                self.classes
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::contract("all widths must be positive"));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "input shape must be non-empty and positive, got {:?}",
                self.input_shape
            )));
        }
        match self.kind {
            ModelKind::Mlp => Ok(()),
            ModelKind::SmallCnn | ModelKind::PlainResnet => {
                if self.input_shape.len() != 3 {
                    return Err(Error::contract(format!(
                        "{:?} expects [channels, height, width] inputs, got {:?}",
                        self.kind, self.input_shape
                    )));
                }
                if self.widths.is_empty() {
                    return Err(Error::contract(
                        "convolutional models need at least one stage",
                    ));
                }
                if self.kind == ModelKind::PlainResnet && self.blocks_per_stage == 0 {
                    return Err(Error::contract("blocks_per_stage must be positive"));
                }
                Ok(())
            }
        }
    }

    fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Ordered parameter segments.
    pub fn layout(&self) -> Vec<SegmentSpec> {
        let mut segs = Vec::new();
        let lin = |segs: &mut Vec<SegmentSpec>, name: &str, din: usize, dout: usize| {
            segs.push(SegmentSpec::new(format!("{name}.weight"), vec![dout, din]));
            segs.push(SegmentSpec::new(format!("{name}.bias"), vec![dout]));
        };
        let conv =
            |segs: &mut Vec<SegmentSpec>, name: &str, cin: usize, cout: usize, affine: bool| {
                segs.push(SegmentSpec::new(
                    format!("{name}.weight"),
                    vec![cout, cin, 3, 3],
                ));
                segs.push(SegmentSpec::new(format!("{name}.bias"), vec![cout]));
                if affine {
                    segs.push(SegmentSpec::new(format!("{name}.gamma"), vec![cout]));
                    segs.push(SegmentSpec::new(format!("{name}.beta"), vec![cout]));
                }
            };
        match self.kind {
            ModelKind::Mlp => {
                let mut din = self.input_dim();
                for (i, &w) in self.widths.iter().enumerate() {
                    let name = format!("fc{i}");
                    lin(&mut segs, &name, din, w);
                    if self.channel_affine {
                        segs.push(SegmentSpec::new(format!("{name}.gamma"), vec![w]));
                        segs.push(SegmentSpec::new(format!("{name}.beta"), vec![w]));
                    }
                    din = w;
                }
                lin(&mut segs, "head", din, self.classes);
            }
            ModelKind::SmallCnn => {
                let mut cin = self.input_shape[0];
                for (i, &w) in self.widths.iter().enumerate() {
                    conv(&mut segs, &format!("conv{i}"), cin, w, self.channel_affine);
                    cin = w;
                }
                lin(&mut segs, "head", cin, self.classes);
            }
            ModelKind::PlainResnet => {
                let a = self.channel_affine;
                conv(&mut segs, "stem", self.input_shape[0], self.widths[0], a);
                for (s, &w) in self.widths.iter().enumerate() {
                    if s > 0 {
                        conv(
                            &mut segs,
                            &format!("stage{s}.down"),
                            self.widths[s - 1],
                            w,
                            a,
                        );
                    }
                    for b in 0..self.blocks_per_stage {
                        conv(&mut segs, &format!("stage{s}.block{b}.conv1"), w, w, a);
                        conv(&mut segs, &format!("stage{s}.block{b}.conv2"), w, w, a);
                    }
                }
                lin(
                    &mut segs,
                    "head",
                    *self.widths.last().unwrap(),
                    self.classes,
                );
            }
        }
        segs
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(SegmentSpec::size).sum()
    }

    /// Records `logits[n, k]` for an input node of shape `[n, ..input_shape]`.
    pub fn record_logits<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        x: Var,
    ) -> Result<Var> {
        let mut p = params.iter().copied();
        let mut next = || {
            p.next()
                .ok_or_else(|| Error::contract("parameter list shorter than model layout"))
        };
        let out = match self.kind {
            ModelKind::Mlp => {
                let mut h = tape.flatten_rows(x)?;
                for _ in &self.widths {
                    let (w, b) = (next()?, next()?);
                    h = tape.linear(h, w, Some(b))?;
                    if self.channel_affine {
                        let (g, bt) = (next()?, next()?);
                        h = tape.channel_affine(h, g, bt)?;
                    }
                    h = tape.relu(h);
                }
                let (w, b) = (next()?, next()?);
                tape.linear(h, w, Some(b))?
            }
            ModelKind::SmallCnn => {
                let mut h = x;
                for _ in &self.widths {
                    h = conv_unit(tape, &mut next, h, 1, self.channel_affine)?;
                    h = tape.relu(h);
                    let s = tape.shape(h);
                    if s[2] >= 2 && s[3] >= 2 {
                        h = tape.avg_pool2(h)?;
                    }
                }
                let h = tape.global_avg_pool(h)?;
                let (w, b) = (next()?, next()?);
                tape.linear(h, w, Some(b))?
            }
            ModelKind::PlainResnet => {
                let a = self.channel_affine;
                let mut h = conv_unit(tape, &mut next, x, 1, a)?;
                h = tape.relu(h);
                for s in 0..self.widths.len() {
                    if s > 0 {
                        h = conv_unit(tape, &mut next, h, 2, a)?;
                        h = tape.relu(h);
                    }
                    for _ in 0..self.blocks_per_stage {
                        let r = conv_unit(tape, &mut next, h, 1, a)?;
                        let r = tape.relu(r);
                        let r = conv_unit(tape, &mut next, r, 1, a)?;
                        h = if self.skip_connections {
                            let sum = tape.add(r, h)?;
                            tape.relu(sum)
                        } else {
                            tape.relu(r)
                        };
                    }
                }
                let h = tape.global_avg_pool(h)?;
                let (w, b) = (next()?, next()?);
                tape.linear(h, w, Some(b))?
            }
        };
        if p.next().is_some() {
            return Err(Error::contract("parameter list longer than model layout"));
        }
        Ok(out)
    }

    /// Checks a batch tensor against the input shape; returns the batch size.
    pub fn check_input(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        let ok = match self.kind {
            ModelKind::Mlp => s.len() >= 2 && s[1..].iter().product::<usize>() == self.input_dim(),
            _ => s.len() == 4 && s[1..] == self.input_shape[..],
        };
        if !ok {
            return Err(Error::shape(format!(
                "input batch {:?} does not match model input {:?}",
                s, self.input_shape
            )));
        }
        Ok(s[0])
    }
}

/// 3×3 convolution (padding 1) plus optional per-channel affine.
fn conv_unit<S: Scalar>(
    tape: &mut Tape<S>,
    next: &mut impl FnMut() -> Result<Var>,
    x: Var,
    stride: usize,
    affine: bool,
) -> Result<Var> {
    let (w, b) = (next()?, next()?);
    let mut h = tape.conv2d(x, w, Some(b), stride, 1)?;
    if affine {
        let (g, bt) = (next()?, next()?);
        h = tape.channel_affine(h, g, bt)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParameterVector,
    mode: Mode,
}

const EVAL_CHUNK: usize = 512;

impl Model {
    /// Fan-in scaled normal weights (`N(0, 2/fan_in)`), zero biases, unit
    /// affine scales. Reproducible per `(spec, seed)`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.iter().map(SegmentSpec::size).sum());
        for seg in &layout {
            let n = seg.size();
            if seg.name.ends_with(".weight") {
                let fan_in: usize = seg.shape[1..].iter().product();
                let normal =
                    Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("fan-in is positive");
                values.extend((0..n).map(|_| normal.sample(&mut rng)));
            } else if seg.name.ends_with(".gamma") {
                values.extend(std::iter::repeat_n(1.0, n));
            } else {
                values.extend(std::iter::repeat_n(0.0, n));
            }
        }
        let params = ParameterVector::from_flat(layout, values)?;
        Ok(Model {
            spec: spec.clone(),
            params,
            mode: Mode::Train,
        })
    }

    /// Initialization from the spec's own `init_seed`.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        Self::init(spec, spec.init_seed)
    }

    pub fn from_parts(spec: ModelSpec, params: ParameterVector) -> Result<Self> {
        spec.validate()?;
        if params.segments() != spec.layout().as_slice() {
            return Err(Error::contract(
                "parameter layout does not match model spec",
            ));
        }
        Ok(Model {
            spec,
            params,
            mode: Mode::Eval,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParameterVector) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::contract(
                "replacement parameters have a different layout",
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn eval(mut self) -> Self {
        self.mode = Mode::Eval;
        self
    }

    /// Logits for a batch, shape `[n, k]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        forward_with(&self.spec, &self.params, x)
    }
}

/// Logits of the architecture `spec` at parameters `params`.
pub fn forward_with(spec: &ModelSpec, params: &ParameterVector, x: &Tensor) -> Result<Tensor> {
    let n = spec.check_input(x)?;
    let k = spec.classes;
    let mut out = Vec::with_capacity(n * k);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let chunk = if start == 0 && end == n {
            x.clone()
        } else {
            x.select_rows(&idx)
        };
        let mut tape: Tape<f64> = Tape::new();
        let vars = param_leaves(&mut tape, params)?;
        let xin = tape.constant(&chunk);
        let z = spec.record_logits(&mut tape, &vars, xin)?;
        out.extend_from_slice(tape.value(z));
        start = end;
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

fn param_leaves(tape: &mut Tape<f64>, params: &ParameterVector) -> Result<Vec<Var>> {
    (0..params.num_segments())
        .map(|i| {
            tape.param(
                params.segments()[i].shape.clone(),
                params.segment(i).to_vec(),
            )
        })
        .collect()
}

/// Supervision for a [`ModelLoss`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Plain cross-entropy against the labels.
    Labels,
    /// Distillation against fixed teacher logits `[n, k]`.
    Distill {
        teacher_logits: &'a Tensor,
        weights: KDWeights,
    },
}

/// Batch-mean training loss of a model architecture on a fixed batch.
#[derive(Debug, Clone, Copy)]
pub struct ModelLoss<'a> {
    pub spec: &'a ModelSpec,
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
    pub target: Target<'a>,
}

impl<'a> ModelLoss<'a> {
    pub fn cross_entropy(spec: &'a ModelSpec, inputs: &'a Tensor, labels: &'a [usize]) -> Self {
        ModelLoss {
            spec,
            inputs,
            labels,
            target: Target::Labels,
        }
    }
}

impl Objective for ModelLoss<'_> {
    fn record<S: Scalar>(&self, tape: &mut Tape<S>, params: &[Var]) -> Result<Var> {
        let x = tape.constant(self.inputs);
        let z = self.spec.record_logits(tape, params, x)?;
        match self.target {
            Target::Labels => tape.cross_entropy(z, self.labels),
            Target::Distill {
                teacher_logits,
                weights,
            } if weights.alpha == 1.0 => {
                // the teacher never enters an alpha = 1 loss
                let _ = teacher_logits;
                tape.cross_entropy(z, self.labels)
            }
            Target::Distill {
                teacher_logits,
                weights,
            } => {
                let t = tape.constant(teacher_logits);
                tape.kd_loss(z, t, self.labels, weights.alpha, weights.tau)
            }
        }
    }
}
