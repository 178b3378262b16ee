use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Local backward rule for an operation defined outside this module.
///
/// Must return one gradient per input, each shaped like that input.
pub trait BackwardRule: Send {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Reduce {
        input: Var,
        /// `true` for every reduced axis of the input.
        reduced: Vec<bool>,
        scale: f64,
    },
    Softmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    SelectItems {
        input: Var,
        indices: Vec<usize>,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// An append-only record of operations. Nodes are stored in creation
/// order, which is a valid topological order for the backward sweep.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last backward output with respect to `v`.
    ///
    /// `None` when `v` does not require grad or is unreachable from the output.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Records a value with a stop-gradient barrier.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn BackwardRule>) -> Var {
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a derived node whose gradient requirement follows its inputs.
    pub(crate) fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Propagates gradients from a single-element output to every
    /// `requires_grad` ancestor.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_backward(idx, &gout);
            self.grads[idx] = Some(gout);
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, broadcast_back(gout, val(*a).len())),
                (*b, broadcast_back(gout, val(*b).len())),
            ],
            Op::Sub(a, b) => {
                let gb: Vec<f64> = gout.iter().map(|g| -g).collect();
                vec![
                    (*a, broadcast_back(gout, val(*a).len())),
                    (*b, broadcast_back(&gb, val(*b).len())),
                ]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = gout.len();
                let ga: Vec<f64> = (0..n).map(|i| gout[i] * pick(bv, i)).collect();
                let gb: Vec<f64> = (0..n).map(|i| gout[i] * pick(av, i)).collect();
                vec![
                    (*a, broadcast_back(&ga, av.len())),
                    (*b, broadcast_back(&gb, bv.len())),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = gout.len();
                let ga: Vec<f64> = (0..n)
                    .map(|i| gout[i] / pick(bv, i).max(super::LOG_CLAMP))
                    .collect();
                let gb: Vec<f64> = (0..n)
                    .map(|i| {
                        let d = pick(bv, i);
                        if d < super::LOG_CLAMP {
                            0.0
                        } else {
                            -gout[i] * pick(av, i) / (d * d)
                        }
                    })
                    .collect();
                vec![
                    (*a, broadcast_back(&ga, av.len())),
                    (*b, broadcast_back(&gb, bv.len())),
                ]
            }
            Op::AddConst(a) => vec![(*a, gout.to_vec())],
            Op::Scale(a, c) => vec![(*a, gout.iter().map(|g| g * c).collect())],
            Op::Neg(a) => vec![(*a, gout.iter().map(|g| -g).collect())],
            Op::Exp(a) => {
                let y = node.value.data();
                vec![(*a, gout.iter().zip(y).map(|(g, y)| g * y).collect())]
            }
            Op::Log(a) => {
                let x = val(*a);
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x < super::LOG_CLAMP { 0.0 } else { g / x })
                    .collect();
                vec![(*a, g)]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, g)]
            }
            Op::Reduce {
                input,
                reduced,
                scale,
            } => {
                let in_shape = self.nodes[input.0].value.shape();
                vec![(*input, super::ops::expand_reduced(gout, in_shape, reduced, *scale))]
            }
            Op::Softmax(a) => vec![(*a, super::ops::softmax_backward(&node.value, gout))],
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (gi, gk, gb) = super::conv::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[kernel.0].value,
                    node.value.shape(),
                    gout,
                    *stride,
                    *padding,
                    bias.is_some(),
                );
                let mut out = vec![(*input, gi), (*kernel, gk)];
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, gb));
                }
                out
            }
            Op::MaxPool2 { input, argmax } => {
                let mut g = vec![0.0; val(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gout[o];
                }
                vec![(*input, g)]
            }
            Op::Upsample2(a) => {
                let shape = self.nodes[a.0].value.shape();
                vec![(*a, super::conv::upsample2_backward(shape, gout))]
            }
            Op::Concat(a, b) => {
                let (ga, gb) = super::conv::concat_backward(
                    self.nodes[a.0].value.shape(),
                    self.nodes[b.0].value.shape(),
                    gout,
                );
                vec![(*a, ga), (*b, gb)]
            }
            Op::SelectItems { input, indices } => {
                let in_len = val(*input).len();
                let n = self.nodes[input.0].value.shape()[0];
                let per = in_len / n;
                let mut g = vec![0.0; in_len];
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..per {
                        g[src * per + j] += gout[k * per + j];
                    }
                }
                vec![(*input, g)]
            }
            Op::InstanceNorm { input, inv_std } => {
                vec![(
                    *input,
                    super::conv::instance_norm_backward(&node.value, inv_std, gout),
                )]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gt = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: gout.to_vec(),
                };
                let grads = rule.backward(&ins, &node.value, &gt);
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(v, g)| (*v, g.into_data()))
                    .collect()
            }
        }
    }
}

#[inline]
fn pick(data: &[f64], i: usize) -> f64 {
    if data.len() == 1 {
        data[0]
    } else {
        data[i]
    }
}

/// Folds a full-size gradient onto an operand that may have been a broadcast scalar.
fn broadcast_back(g: &[f64], target_len: usize) -> Vec<f64> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}
