//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! forward context its backward rule needs. Nodes only reference earlier
//! nodes, so walking the tape back to front is a valid reverse topological
//! order.

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::norm::{batch_norm_backward, batch_norm_forward, BnCache, Mode, RunningStats};
use crate::objective::kernels;
use crate::resample::{max_pool_2x2, max_pool_2x2_backward, resize_bilinear, resize_bilinear_backward};
use crate::tensor::{concat_channels, split_channels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    ResizeBilinear(Var),
    Sum(Var),
    WeightedSum(Var, Tensor),
    Bce {
        logits: Var,
        targets: Tensor,
    },
    SoftDice {
        logits: Var,
        targets: Tensor,
        eps: f64,
    },
    TotalVariation(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(_) => "concat_channels",
            Op::MaxPool { .. } => "max_pool_2x2",
            Op::ResizeBilinear(_) => "upsample_bilinear",
            Op::Sum(_) => "sum",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Bce { .. } => "bce_with_logits",
            Op::SoftDice { .. } => "soft_dice_loss",
            Op::TotalVariation(_) => "tv_loss",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias);
                p
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::ResizeBilinear(x)
            | Op::Sum(x)
            | Op::WeightedSum(x, _)
            | Op::TotalVariation(x) => vec![*x],
            Op::MaxPool { input, .. } => vec![*input],
            Op::Bce { logits, .. } | Op::SoftDice { logits, .. } => vec![*logits],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.slots.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Parents of a node; always earlier on the tape.
    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        self.push(
            y,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
        )
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        name: &str,
    ) -> Result<Var> {
        let (y, cache) = batch_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
            name,
        )?;
        self.push(
            y,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale(x, factor))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = concat_channels(&parts)?;
        self.push(y, Op::Concat(xs.to_vec()))
    }

    pub fn max_pool_2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = max_pool_2x2(self.value(x))?;
        self.push(y, Op::MaxPool { input: x, argmax })
    }

    pub fn upsample_bilinear_2x(&mut self, x: Var) -> Result<Var> {
        self.upsample_bilinear(x, 2)
    }

    /// Bilinear upsampling by an integer factor in both axes.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear", "zero factor"));
        }
        let y = resize_bilinear(self.value(x), h * factor, w * factor)?;
        self.push(y, Op::ResizeBilinear(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x))
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", self.value(x).shape(), weights.shape()),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push(Tensor::scalar(s), Op::WeightedSum(x, weights))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let v = kernels::bce_with_logits(self.value(logits), targets)?;
        self.push(
            Tensor::scalar(v),
            Op::Bce {
                logits,
                targets: targets.clone(),
            },
        )
    }

    pub fn soft_dice_loss(&mut self, logits: Var, targets: &Tensor, eps: f64) -> Result<Var> {
        let probs = self.value(logits).map(kernels::sigmoid);
        let v = kernels::soft_dice(&probs, targets, eps)?;
        self.push(
            Tensor::scalar(v),
            Op::SoftDice {
                logits,
                targets: targets.clone(),
                eps,
            },
        )
    }

    pub fn tv_loss(&mut self, logits: Var) -> Result<Var> {
        let probs = self.value(logits).map(kernels::sigmoid);
        let v = kernels::total_variation(&probs)?;
        self.push(Tensor::scalar(v), Op::TotalVariation(logits))
    }

    /// Hash of every branch taken at a non-differentiable point: the sign of
    /// each ReLU input, each pooling argmax and the sign of each TV
    /// difference. Two evaluations with equal patterns lie on the same
    /// smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::TotalVariation(x) => {
                    let t = self.value(*x);
                    if let Ok((b, c, ht, wd)) = t.dims4() {
                        let p: Vec<f64> = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
                        for plane in 0..b * c {
                            let base = plane * ht * wd;
                            for y in 0..ht {
                                for x in 0..wd {
                                    let v = p[base + y * wd + x];
                                    if y + 1 < ht {
                                        (p[base + (y + 1) * wd + x] - v).total_cmp(&0.0).hash(&mut h);
                                    }
                                    if x + 1 < wd {
                                        (p[base + y * wd + x + 1] - v).total_cmp(&0.0).hash(&mut h);
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a scalar `root`. Nodes are visited in exact
    /// reverse insertion order; gradients from fan-out accumulate additively.
    /// Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { slots });
        }
        slots[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            for (parent, g) in self.local_grads(node, &grad)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut slots[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { slots })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, node: &Node, grad: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let g = conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    spec,
                    grad,
                    self.wants(*input),
                )?;
                let mut v = vec![(*weight, g.weight)];
                if let Some(b) = bias {
                    v.push((*b, g.bias));
                }
                if let Some(dx) = g.input {
                    v.push((*input, dx));
                }
                v
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = batch_norm_backward(cache, self.value(*gamma), grad)?;
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .zip_map(grad, |v, g| if v > 0.0 { g } else { 0.0 })?;
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = node.value.zip_map(grad, |y, g| g * y * (1.0 - y))?;
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Mul(a, b) => {
                let da = self.value(*b).zip_map(grad, |v, g| v * g)?;
                let db = self.value(*a).zip_map(grad, |v, g| v * g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(x, f) => vec![(*x, grad.map(|g| g * f))],
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).shape()[1]).collect();
                xs.iter().copied().zip(split_channels(grad, &widths)?).collect()
            }
            Op::MaxPool { input, argmax } => {
                vec![(*input, max_pool_2x2_backward(self.value(*input).shape(), argmax, grad))]
            }
            Op::ResizeBilinear(x) => {
                vec![(*x, resize_bilinear_backward(self.value(*x).shape(), grad)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), grad.item()))],
            Op::WeightedSum(x, w) => {
                let g = grad.item();
                vec![(*x, w.map(|v| v * g))]
            }
            Op::Bce { logits, targets } => {
                let g = grad.item();
                let d = kernels::bce_with_logits_grad(self.value(*logits), targets)?;
                vec![(*logits, d.map(|v| v * g))]
            }
            Op::SoftDice {
                logits,
                targets,
                eps,
            } => {
                let g = grad.item();
                let d = kernels::soft_dice_grad(self.value(*logits), targets, *eps)?;
                vec![(*logits, d.map(|v| v * g))]
            }
            Op::TotalVariation(logits) => {
                let g = grad.item();
                let d = kernels::total_variation_grad(self.value(*logits))?;
                vec![(*logits, d.map(|v| v * g))]
            }
        };
        Ok(out)
    }
}
