//! Dense row-major arrays and a reverse-mode tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Leaves are
//! pushed with [`Tape::leaf`], operations with [`Tape::apply`]; both return
//! a [`Var`] handle. [`Tape::backward`] walks the tape in reverse and leaves
//! `dLoss/dVar` on every node that requires a gradient.
//!
//! Shapes are never broadcast. Image-like ops take `N x C x H x W`.

mod conv;
mod gradcheck;
mod kernels;

use std::fmt;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use kernels::sigmoid;
pub(crate) use kernels::channel_moments;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", format!("shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::shape(op, format!("expected rank-4 N x C x H x W, got shape {:?}", self.shape))),
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with the batch's own per-channel mean and (biased) variance.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<f64>, var: Vec<f64> },
}

/// Built-in operation kinds and their attributes.
///
/// | kind | inputs | output |
/// |------|--------|--------|
/// | `Conv2d` | x `NxCxHxW`, w `OxCxKxK`, optional bias `O` | `NxOx((H+2p-K)/s+1)x(..)` |
/// | `UpsampleBilinear2x` | x | `NxCx2Hx2W` |
/// | `MaxPool2x2` | x, even H and W | `NxCxH/2xW/2` |
/// | `Relu`, `Sigmoid` | x | same shape |
/// | `Add`, `Mul` | a, b of equal shape | same shape |
/// | `ConcatChannels` | two or more `NxC_ixHxW` | `Nx(sum C_i)xHxW` |
/// | `Sum` | x | scalar |
/// | `BatchNorm` | x, gamma `C`, beta `C` | same shape as x |
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv2d { stride: usize, pad: usize },
    UpsampleBilinear2x,
    MaxPool2x2,
    Relu,
    Sigmoid,
    Add,
    Mul,
    ConcatChannels,
    Sum,
    BatchNorm { eps: f64, mode: BatchNormMode },
}

impl Op {
    /// 1x1 convolution, used for lateral projections.
    pub const CONV1X1: Op = Op::Conv2d { stride: 1, pad: 0 };
    /// 3x3 convolution preserving spatial size.
    pub const CONV3X3: Op = Op::Conv2d { stride: 1, pad: 1 };

    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleBilinear2x => "upsample_bilinear_2x",
            Op::MaxPool2x2 => "maxpool_2x2",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::ConcatChannels => "concat_channels",
            Op::Sum => "sum",
            Op::BatchNorm { .. } => "batchnorm",
        }
    }
}

/// A differentiable operation defined outside this module (the losses).
///
/// `backward` receives the upstream gradient of the output and returns one
/// optional gradient per input, each the length of that input's data.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Cache {
    None,
    ArgMax(Vec<usize>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

enum Rule {
    Builtin(Op),
    Custom(Box<dyn CustomOp>),
}

struct Recorded {
    rule: Rule,
    inputs: Vec<Var>,
    cache: Cache,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<Recorded>,
}

/// Ordered record of one forward pass. Inputs always precede consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every value and record.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node { value, requires_grad, grad: None, op: None })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last [`Tape::backward`], shaped like the value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor { shape: node.value.shape.clone(), data: g.clone() })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records it when any input requires a
    /// gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, cache) = kernels::forward(&op, &values)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Recorded { rule: Rule::Builtin(op), inputs: inputs.to_vec(), cache });
        Ok(self.push(Node { value, requires_grad, grad: None, op }))
    }

    /// Records a value computed elsewhere together with its backward rule.
    pub fn apply_custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomOp>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(rule.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Recorded { rule: Rule::Custom(rule), inputs: inputs.to_vec(), cache: Cache::None });
        Ok(self.push(Node { value, requires_grad, grad: None, op }))
    }

    /// Populates `dLoss/dv` for every node that requires a gradient.
    ///
    /// Gradients from an earlier call on the same tape are discarded first.
    /// Contributions from several consumers of one value add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.recorded_ops() == 0 {
            return Err(Error::Backward("empty tape: no recorded operations"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = self.nodes[idx].grad.take() else { continue };
            let input_grads = match &self.nodes[idx].op {
                None => {
                    self.nodes[idx].grad = Some(grad_out);
                    continue;
                }
                Some(rec) => {
                    let inputs: Vec<&Tensor> = rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let out = &self.nodes[idx].value;
                    let grads = match &rec.rule {
                        Rule::Builtin(op) => kernels::backward(op, &inputs, out, &rec.cache, &grad_out),
                        Rule::Custom(c) => c.backward(&inputs, out, &grad_out),
                    };
                    grads.into_iter().zip(rec.inputs.clone()).collect::<Vec<_>>()
                }
            };
            self.nodes[idx].grad = Some(grad_out);
            for (g, v) in input_grads {
                let Some(g) = g else { continue };
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), node.value.numel());
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
