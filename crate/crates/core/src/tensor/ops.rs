use super::tape::{Graph, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower bound applied to the argument of `log` and to divisors.
pub const LOG_CLAMP: f64 = 1e-12;

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = if av.shape() == bv.shape() || bv.len() == 1 {
            av.shape().to_vec()
        } else if av.len() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let x = if ad.len() == 1 { ad[0] } else { ad[i] };
                let y = if bd.len() == 1 { bd[0] } else { bd[i] };
                f(x, y)
            })
            .collect();
        check_finite(op, &data)?;
        Ok(self.derived(Tensor { shape, data }, make(a, b), &[a, b]))
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(Var) -> Op,
    ) -> Result<Var> {
        let value = self.value(a).map(f);
        check_finite(op, value.data())?;
        Ok(self.derived(value, make(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a / max(b, LOG_CLAMP)`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y.max(LOG_CLAMP), Op::Div)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_const", a, |x| x + c, Op::AddConst)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, |v| Op::Scale(v, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    /// `ln(max(a, LOG_CLAMP))`.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.max(LOG_CLAMP).ln(), Op::Log)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sum(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    pub fn mean(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    /// Sum or mean over `axes` (all axes when `None`). Reduced axes are kept
    /// with size one; a full reduction produces a zero-dimensional tensor.
    fn reduce(&mut self, a: Var, axes: Option<&[usize]>, mean: bool) -> Result<Var> {
        let op = if mean { "mean" } else { "sum" };
        let input = self.value(a);
        let in_shape = input.shape().to_vec();
        let reduced: Vec<bool> = match axes {
            None => vec![true; in_shape.len()],
            Some(axes) => {
                let mut r = vec![false; in_shape.len()];
                for &ax in axes {
                    if ax >= in_shape.len() {
                        return Err(Error::invalid(format!(
                            "{op}: axis {ax} out of range for shape {in_shape:?}"
                        )));
                    }
                    r[ax] = true;
                }
                r
            }
        };
        let count: usize = in_shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(d, _)| d)
            .product();
        if count == 0 || input.is_empty() {
            return Err(Error::EmptyReduction { op });
        }
        let mut out_shape: Vec<usize> = in_shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        if axes.is_none() {
            out_shape.clear();
        }
        let out_len: usize = out_shape.iter().product();
        let mut data = vec![0.0; out_len];
        let strides = out_strides(&in_shape, &reduced);
        for (i, &v) in input.data().iter().enumerate() {
            data[target_index(i, &in_shape, &strides)] += v;
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        check_finite(op, &data)?;
        Ok(self.derived(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Reduce {
                input: a,
                reduced,
                scale,
            },
            &[a],
        ))
    }

    /// Softmax over axis 1 of an `[N, C, H, W]` tensor.
    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let x = self.value(logits);
        let (n, c, h, w) = x.dims4("softmax_channels")?;
        if c < 2 {
            return Err(Error::invalid("softmax_channels needs at least two channels"));
        }
        let hw = h * w;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for k in 0..c {
                    m = m.max(xd[base + k * hw + p]);
                }
                let mut s = 0.0;
                for k in 0..c {
                    let e = (xd[base + k * hw + p] - m).exp();
                    out[base + k * hw + p] = e;
                    s += e;
                }
                for k in 0..c {
                    out[base + k * hw + p] /= s;
                }
            }
        }
        check_finite("softmax_channels", &out)?;
        let shape = x.shape().to_vec();
        Ok(self.derived(Tensor { shape, data: out }, Op::Softmax(logits), &[logits]))
    }

    /// One-hot encoding of the per-pixel channel argmax of an `[N, C, H, W]`
    /// tensor. Ties go to the lowest channel index. Always detached.
    pub fn one_hot_argmax_channels(&mut self, probs: Var) -> Result<Var> {
        let t = one_hot_argmax(self.value(probs))?;
        Ok(self.constant(t))
    }

    /// Gathers items along axis 0.
    pub fn select_items(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let Some(&n) = x.shape().first() else {
            return Err(Error::invalid("select_items needs at least one axis"));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "select_items: index {bad} out of range for {n} items"
            )));
        }
        let per = x.len() / n.max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        Ok(self.derived(
            Tensor { shape, data },
            Op::SelectItems {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }
}

/// Channel-argmax one-hot encoding on a bare tensor.
pub fn one_hot_argmax(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("one_hot_argmax_channels")?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if xd[base + k * hw + p] > xd[base + best * hw + p] {
                    best = k;
                }
            }
            out[base + best * hw + p] = 1.0;
        }
    }
    Ok(Tensor {
        shape: x.shape().to_vec(),
        data: out,
    })
}

fn out_strides(in_shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let mut strides = vec![0; in_shape.len()];
    let mut acc = 1;
    for ax in (0..in_shape.len()).rev() {
        if reduced[ax] {
            strides[ax] = 0;
        } else {
            strides[ax] = acc;
            acc *= in_shape[ax];
        }
    }
    strides
}

fn target_index(mut flat: usize, in_shape: &[usize], strides: &[usize]) -> usize {
    let mut t = 0;
    for ax in (0..in_shape.len()).rev() {
        let d = in_shape[ax];
        t += (flat % d) * strides[ax];
        flat /= d;
    }
    t
}

pub(crate) fn expand_reduced(gout: &[f64], in_shape: &[usize], reduced: &[bool], scale: f64) -> Vec<f64> {
    let n: usize = in_shape.iter().product();
    let strides = out_strides(in_shape, reduced);
    (0..n)
        .map(|i| gout[target_index(i, in_shape, &strides)] * scale)
        .collect()
}

pub(crate) fn softmax_backward(s: &Tensor, gout: &[f64]) -> Vec<f64> {
    let (n, c, h, w) = match s.shape()[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => unreachable!("softmax output is 4-D"),
    };
    let hw = h * w;
    let sd = s.data();
    let mut g = vec![0.0; sd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = 0.0;
            for k in 0..c {
                let i = base + k * hw + p;
                dot += gout[i] * sd[i];
            }
            for k in 0..c {
                let i = base + k * hw + p;
                g[i] = sd[i] * (gout[i] - dot);
            }
        }
    }
    g
}
