//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes only reference earlier nodes, so the insertion order is a
//! topological order and [`Graph::backward`] walks it in reverse.

mod conv;
mod ops;

pub use conv::ConvGeometry;

use crate::error::{Error, Result};
use crate::losses::{soft_dice_backward, soft_dice_forward, DiceVariant};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    /// Zero mean and unit variance, marked as initialized.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            initialized: true,
        }
    }

    /// Placeholder statistics that must be filled by a training-mode pass
    /// before eval mode is allowed.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            initialized: false,
            ..Self::identity(channels)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormParams {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Var, Var),
    Upsample2x(Var),
    Softmax(Var),
    Sum(Var),
    SoftDice {
        probs: Var,
        target: Tensor<T>,
        variant: DiceVariant,
        smooth: T,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::MaxPool2x2 { input, .. } => vec![*input],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu(a) | Op::Scale(a, _) | Op::Upsample2x(a) | Op::Softmax(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::SoftDice { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the leaves that require them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Single-owner autodiff tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Move a forward value out of the graph, leaving a placeholder behind.
    pub fn take_value(&mut self, var: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[var.0].value, Tensor::zeros(&[1]))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv::conv2d_forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), geom)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (value, argmax) = ops::maxpool2x2_forward(self.value(input))?;
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }))
    }

    /// Per-channel batch normalization.
    ///
    /// In [`Mode::Train`] the batch statistics are used and the updated
    /// running statistics are returned; in [`Mode::Eval`] the running
    /// statistics are used and `None` is returned.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: Mode,
        params: BatchNormParams,
        name: &str,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        for (what, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [c] {
                return Err(Error::shape(format!(
                    "batchnorm `{name}` {what} must have shape [{c}], got {:?}",
                    t.shape()
                )));
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm `{name}` running statistics do not have {c} channels"
            )));
        }
        let eps = T::lit(params.eps);
        let (mean, var, updated) = match mode {
            Mode::Train => {
                let (mean, var) = ops::channel_moments(x)?;
                let m = T::lit(params.momentum);
                let count = n * h * w;
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                let upd_mean = running
                    .mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b)
                    .collect();
                let upd_var = running
                    .var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                    .collect();
                let updated = RunningStats {
                    mean: Tensor::new(vec![c], upd_mean)?,
                    var: Tensor::new(vec![c], upd_var)?,
                    initialized: true,
                };
                (mean, var, Some(updated))
            }
            Mode::Eval => {
                if !running.initialized {
                    return Err(Error::UninitializedRunningStats(name.to_string()));
                }
                (running.mean.data().to_vec(), running.var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = ops::batchnorm_apply(x, &mean, &inv_std, self.value(gamma).data(), self.value(beta).data())?;
        let var_node = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        );
        Ok((var_node, updated))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        ops::same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        ops::same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    pub fn upsample2x_nearest(&mut self, a: Var) -> Result<Var> {
        let value = ops::upsample2x_forward(self.value(a))?;
        Ok(self.push(value, Op::Upsample2x(a)))
    }

    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let value = ops::softmax_channels_forward(self.value(logits))?;
        Ok(self.push(value, Op::Softmax(logits)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Multi-class soft Dice loss of `probs` against a one-hot `target`.
    pub fn soft_dice_loss(&mut self, probs: Var, target: Tensor<T>, variant: DiceVariant, smooth: T) -> Result<Var> {
        let loss = soft_dice_forward(self.value(probs), &target, variant, smooth)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftDice {
                probs,
                target,
                variant,
                smooth,
            },
        ))
    }

    /// Reverse-mode accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let Some(root_node) = self.nodes.get(root.0) else {
            return Err(Error::Graph(format!("root {} is not in the graph", root.0)));
        };
        if root_node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_node.value.shape()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= idx) {
                return Err(Error::Graph(format!(
                    "cycle detected: node {idx} depends on node {}",
                    bad.0
                )));
            }
            self.propagate(node, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                let g = conv::conv2d_backward(self.value(*input), self.value(*kernel), *geom, gy, want)?;
                if let Some(t) = g.input {
                    accumulate(grads, *input, t)?;
                }
                if let Some(t) = g.kernel {
                    accumulate(grads, *kernel, t)?;
                }
                if let (Some(b), Some(t)) = (bias, g.bias) {
                    accumulate(grads, *b, t)?;
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                if self.wants(*input) {
                    let dx = ops::maxpool2x2_backward(self.value(*input).shape(), argmax, gy)?;
                    accumulate(grads, *input, dx)?;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let g = ops::batchnorm_backward(
                    self.value(*input),
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    *batch_stats,
                    gy,
                )?;
                if self.wants(*input) {
                    accumulate(grads, *input, g.input)?;
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, g.gamma)?;
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, g.beta)?;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, gy.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gy.clone())?;
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = y.data().iter().zip(gy.data()).map(|(&q, &g)| q * g).collect();
                    accumulate(grads, *a, Tensor::new(x.shape().to_vec(), d)?)?;
                }
                if self.wants(*b) {
                    let d = x.data().iter().zip(gy.data()).map(|(&p, &g)| p * g).collect();
                    accumulate(grads, *b, Tensor::new(y.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                accumulate(grads, *a, gy.map(|g| g * f))?;
            }
            Op::Concat(a, b) => {
                let (da, db) = ops::concat_backward(self.value(*a).shape(), self.value(*b).shape(), gy)?;
                if self.wants(*a) {
                    accumulate(grads, *a, da)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, db)?;
                }
            }
            Op::Upsample2x(a) => {
                let dx = ops::upsample2x_backward(self.value(*a).shape(), gy)?;
                accumulate(grads, *a, dx)?;
            }
            Op::Softmax(a) => {
                let dx = ops::softmax_channels_backward(&node.value, gy)?;
                accumulate(grads, *a, dx)?;
            }
            Op::Sum(a) => {
                let g = gy.item()?;
                accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g))?;
            }
            Op::SoftDice {
                probs,
                target,
                variant,
                smooth,
            } => {
                let g = gy.item()?;
                let mut dp = soft_dice_backward(self.value(*probs), target, *variant, *smooth)?;
                dp.data_mut().iter_mut().for_each(|v| *v *= g);
                accumulate(grads, *probs, dp)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
