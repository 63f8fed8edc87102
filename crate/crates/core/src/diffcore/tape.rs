//! Wengert tape over dense tensors.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. The walk is a fixed sequential loop, so two
//! reverse passes over the same tape produce bit-identical gradients.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::objectives::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    /// `x[n, in] · w[out, in]ᵀ + b[out]`
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// Per-channel `gamma[c] * x + beta[c]` on `[n, c, ...]`.
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    /// Batch-mean cross-entropy of `logits[n, k]` against class indices.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    /// Batch-mean `α·CE + (1−α)·τ²·KL(σ(z_t/τ) ‖ σ(z_s/τ))`. The teacher
    /// node has no gradient edge: only `logits` receives a cotangent.
    KdLoss {
        logits: Var,
        teacher: Var,
        labels: Vec<usize>,
        alpha: f64,
        tau: f64,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by one reverse pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Adjoint of `v`; `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zero-filled when `v` does not influence the root.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<S> {
        self.get(v)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); len])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a parameter block).
    pub fn param(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape(format!(
                "leaf shape {shape:?} does not match {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf, true))
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let value = t.data().iter().map(|&x| S::from_f64(x)).collect();
        self.push(t.shape().to_vec(), value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|&x| x.scale(c)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = S::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let rg = self.rg(a);
        self.push(vec![1], vec![acc], Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .iter()
            .map(|&x| if x.re() > 0.0 { x } else { S::zero() })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest = numel(&shape[1..]);
        self.reshape(a, vec![n, rest])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape(format!(
                    "linear: bias {:?}, expected [{dout}]",
                    self.shape(b)
                )));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut out = vec![S::zero(); n * dout];
        for i in 0..n {
            let xr = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wv[o * din..(o + 1) * din];
                let mut acc = match bv {
                    Some(bv) => bv[o],
                    None => S::zero(),
                };
                for j in 0..din {
                    acc += xr[j] * wr[j];
                }
                out[i * dout + o] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, dout], out, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d: bias length must equal out channels"));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut out = vec![S::zero(); n * o * ho * wo];
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = match bv {
                            Some(bv) => bv[oc],
                            None => S::zero(),
                        };
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                    let wi = ((oc * c + ci) * kh + ky) * kw + kx;
                                    acc += xv[xi] * wv[wi];
                                }
                            }
                        }
                        out[((ni * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![n, o, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::shape(format!(
                "channel_affine: input {xs:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (c, inner) = (xs[1], numel(&xs[2..]));
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma), self.value(beta));
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                g[ch] * v + bt[ch]
            })
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(xs, out, Op::ChannelAffine { x, gamma, beta }, rg))
    }

    /// 2×2 average pooling with stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(Error::shape(format!("avg_pool2: input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = p * h * w;
                    let s = xv[base + 2 * oy * w + 2 * ox]
                        + xv[base + 2 * oy * w + 2 * ox + 1]
                        + xv[base + (2 * oy + 1) * w + 2 * ox]
                        + xv[base + (2 * oy + 1) * w + 2 * ox + 1];
                    out[(p * ho + oy) * wo + ox] = s.scale(0.25);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, ho, wo], out, Op::AvgPool2(x), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("global_avg_pool: input {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let inv = 1.0 / hw as f64;
        let xv = self.value(x);
        let out = (0..n * c)
            .map(|p| {
                let mut acc = S::zero();
                for &v in &xv[p * hw..(p + 1) * hw] {
                    acc += v;
                }
                acc.scale(inv)
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), rg))
    }

    fn check_logits(&self, logits: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!(
                "loss: logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for k={k}"
            )));
        }
        Ok((n, k))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.check_logits(logits, labels)?;
        let z = self.value(logits);
        let mut acc = S::zero();
        let mut scratch = vec![S::zero(); k];
        for i in 0..n {
            acc += kernels::cross_entropy(&z[i * k..(i + 1) * k], labels[i], &mut scratch);
        }
        let loss = acc.scale(1.0 / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn kd_loss(
        &mut self,
        logits: Var,
        teacher: Var,
        labels: &[usize],
        alpha: f64,
        tau: f64,
    ) -> Result<Var> {
        let (n, k) = self.check_logits(logits, labels)?;
        if self.shape(teacher) != self.shape(logits) {
            return Err(Error::shape(format!(
                "kd_loss: teacher {:?} vs student {:?}",
                self.shape(teacher),
                self.shape(logits)
            )));
        }
        if !(0.0..=1.0).contains(&alpha)
            || tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        {
            return Err(Error::contract(format!(
                "kd_loss: need alpha in [0,1] and tau > 0, got alpha={alpha}, tau={tau}"
            )));
        }
        let z = self.value(logits);
        let t: Vec<f64> = self.value(teacher).iter().map(|v| v.re()).collect();
        let mut acc = S::zero();
        let mut s1 = vec![S::zero(); k];
        let mut s2 = vec![S::zero(); k];
        for i in 0..n {
            let r = i * k..(i + 1) * k;
            acc += kernels::kd_loss(
                &z[r.clone()],
                &t[r],
                labels[i],
                alpha,
                tau,
                &mut s1,
                &mut s2,
            );
        }
        let loss = acc.scale(1.0 / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KdLoss {
                logits,
                teacher,
                labels: labels.to_vec(),
                alpha,
                tau,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [S])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); len]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s.scale(*c))
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &mut |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x.re() > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s)
                });
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        let gr = &g[i * dout..(i + 1) * dout];
                        let dx = &mut gx[i * din..(i + 1) * din];
                        for (o, &go) in gr.iter().enumerate() {
                            let wr = &wv[o * din..(o + 1) * din];
                            for j in 0..din {
                                dx[j] += go * wr[j];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for i in 0..n {
                        let xr = &xv[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            let dw = &mut gw[o * din..(o + 1) * din];
                            for j in 0..din {
                                dw[j] += go * xr[j];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for i in 0..n {
                            for o in 0..dout {
                                gb[o] += g[i * dout + o];
                            }
                        }
                    });
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(node, g, *x, *w, *b, *stride, *pad, &mut acc),
            Op::ChannelAffine { x, gamma, beta } => {
                let xs = self.shape(*x);
                let (c, inner) = (xs[1], numel(&xs[2..]));
                let xv = self.value(*x);
                let gm = self.value(*gamma);
                acc(*x, &mut |gx| {
                    for (i, (d, &s)) in gx.iter_mut().zip(g).enumerate() {
                        *d += s * gm[(i / inner) % c];
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (i, (&s, &v)) in g.iter().zip(xv).enumerate() {
                        gg[(i / inner) % c] += s * v;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, &s) in g.iter().enumerate() {
                        gb[(i / inner) % c] += s;
                    }
                });
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x);
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                acc(*x, &mut |gx| {
                    for p in 0..n * c {
                        let base = p * h * w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let s = g[(p * ho + oy) * wo + ox].scale(0.25);
                                gx[base + 2 * oy * w + 2 * ox] += s;
                                gx[base + 2 * oy * w + 2 * ox + 1] += s;
                                gx[base + (2 * oy + 1) * w + 2 * ox] += s;
                                gx[base + (2 * oy + 1) * w + 2 * ox + 1] += s;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let inv = 1.0 / hw as f64;
                acc(*x, &mut |gx| {
                    for (p, &s) in g.iter().enumerate() {
                        let s = s.scale(inv);
                        for d in &mut gx[p * hw..(p + 1) * hw] {
                            *d += s;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let z = self.value(*logits);
                let scale = g[0].scale(1.0 / n as f64);
                acc(*logits, &mut |gz| {
                    for i in 0..n {
                        let r = i * k..(i + 1) * k;
                        kernels::cross_entropy_grad(&z[r.clone()], labels[i], scale, &mut gz[r]);
                    }
                });
            }
            Op::KdLoss {
                logits,
                teacher,
                labels,
                alpha,
                tau,
            } => {
                let k = self.shape(*logits)[1];
                let n = labels.len();
                let z = self.value(*logits);
                let t: Vec<f64> = self.value(*teacher).iter().map(|v| v.re()).collect();
                let scale = g[0].scale(1.0 / n as f64);
                let mut scratch = vec![S::zero(); k];
                acc(*logits, &mut |gz| {
                    for i in 0..n {
                        let r = i * k..(i + 1) * k;
                        kernels::kd_loss_grad(
                            &z[r.clone()],
                            &t[r.clone()],
                            labels[i],
                            *alpha,
                            *tau,
                            scale,
                            &mut scratch,
                            &mut gz[r],
                        );
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node<S>,
        g: &[S],
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [S])),
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (node.shape[2], node.shape[3]);
        let (xv, wv) = (self.value(x), self.value(w));
        // Visits every (output, input, weight) index triple that contributed.
        let for_each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
            for ni in 0..n {
                for oc in 0..o {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gi = ((ni * o + oc) * ho + oy) * wo + ox;
                            for ci in 0..c {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi =
                                            ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                        let wi = ((oc * c + ci) * kh + ky) * kw + kx;
                                        f(gi, xi, wi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        acc(x, &mut |gx| {
            for_each_tap(&mut |gi, xi, wi| gx[xi] += g[gi] * wv[wi])
        });
        acc(w, &mut |gw| {
            for_each_tap(&mut |gi, xi, wi| gw[wi] += g[gi] * xv[xi])
        });
        if let Some(b) = b {
            acc(b, &mut |gb| {
                for ni in 0..n {
                    for oc in 0..o {
                        let base = (ni * o + oc) * ho * wo;
                        for &s in &g[base..base + ho * wo] {
                            gb[oc] += s;
                        }
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Dual;

    #[test]
    fn linear_forward_matches_hand_computation() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let w = t.param(vec![2, 2], vec![1.0, 0.0, 3.0, -1.0]).unwrap();
        let b = t.param(vec![2], vec![0.5, 0.5]).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[1.5, 1.5]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(&Tensor::new(vec![3, 2], vec![0.3, -1.2, 2.0, 0.1, -0.7, 0.9]).unwrap());
        let w = t
            .param(vec![4, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8])
            .unwrap();
        let h = t.linear(x, w, None).unwrap();
        let h = t.relu(h);
        let l = t.cross_entropy(h, &[0, 3, 1]).unwrap();
        let g1 = t.backward(l).unwrap();
        let g2 = t.backward(l).unwrap();
        let a: Vec<u64> = g1.get(w).unwrap().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = g2.get(w).unwrap().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let c = t.constant(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let p = t.param(vec![2], vec![3.0, 4.0]).unwrap();
        let m = t.mul(c, p).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn conv2d_gradient_matches_finite_difference() {
        let xs: Vec<f64> = (0..2 * 2 * 5 * 5)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        let ws: Vec<f64> = (0..3 * 2 * 3 * 3)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0)
            .collect();
        let f = |wv: &[f64]| -> (f64, Vec<f64>) {
            let mut t: Tape<f64> = Tape::new();
            let x = t.constant(&Tensor::new(vec![2, 2, 5, 5], xs.clone()).unwrap());
            let w = t.param(vec![3, 2, 3, 3], wv.to_vec()).unwrap();
            let y = t.conv2d(x, w, None, 2, 1).unwrap();
            let y2 = t.mul(y, y).unwrap();
            let s = t.sum(y2);
            let g = t.backward(s).unwrap();
            (t.value(s)[0], g.get(w).unwrap().to_vec())
        };
        let (_, g) = f(&ws);
        for i in [0, 5, 17, 40, 53] {
            let mut p = ws.clone();
            let mut m = ws.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (f(&p).0 - f(&m).0) / 2e-5;
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn dual_tangent_of_gradient_is_hessian_vector_product() {
        // L(p) = sum(p ⊙ p ⊙ c) / 2  =>  H = diag(c)
        let c = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut t: Tape<Dual> = Tape::new();
        let cv = t.constant(&c);
        let p = t
            .param(
                vec![3],
                vec![
                    Dual::new(0.5, 1.0),
                    Dual::new(-1.0, 1.0),
                    Dual::new(2.0, -1.0),
                ],
            )
            .unwrap();
        let pp = t.mul(p, p).unwrap();
        let q = t.mul(pp, cv).unwrap();
        let s = t.sum(q);
        let s = t.scale(s, 0.5);
        let g = t.backward(s).unwrap();
        let hv: Vec<f64> = g.get(p).unwrap().iter().map(|d| d.du).collect();
        assert_eq!(hv, vec![1.0, 2.0, -3.0]);
    }
}
