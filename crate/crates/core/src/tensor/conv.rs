//! Spatial operations on `[N, C, H, W]` tensors.

use super::tape::{Graph, Op, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n] (+ c when accumulate)`, with explicit
/// row/column strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given slices;
    // every call site below passes dense row-major or transposed buffers of
    // exactly the stated dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image `[C, H, W]` into `[C·kh·kw, Ho·Wo]`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        let pad = self.padding as isize;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, slot) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            *slot = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col), accumulating into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.cols();
        let pad = self.padding as isize;
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let (&[n, c, h, w], &[k, kc, kh, kw]) = (input, kernel) else {
        return Err(Error::shape("conv2d", input, kernel));
    };
    if kc != c {
        return Err(Error::shape("conv2d", input, kernel));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d: kernel {kh}x{kw} must have odd extents"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let out = |len: usize, kl: usize| -> Result<usize> {
        let span = (len + 2 * padding)
            .checked_sub(kl)
            .ok_or_else(|| Error::invalid("conv2d: kernel larger than padded input"))?;
        if span % stride != 0 {
            return Err(Error::invalid(format!(
                "conv2d: output size ({len} + 2*{padding} - {kl})/{stride} + 1 is not integral"
            )));
        }
        Ok(span / stride + 1)
    };
    let ho = out(h, kh)?;
    let wo = out(w, kw)?;
    Ok((
        n,
        k,
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride,
            padding,
        },
    ))
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    out_shape: &[usize],
    gout: &[f64],
    stride: usize,
    padding: usize,
    with_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (n, k, geom) = geometry(input.shape(), kernel.shape(), stride, padding)
        .expect("geometry validated on forward");
    debug_assert_eq!(out_shape, &[n, k, geom.ho, geom.wo]);
    let (rows, p) = (geom.rows(), geom.cols());
    let in_per = geom.c * geom.h * geom.w;
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = with_bias.then(|| vec![0.0; k]);
    let mut cols = vec![0.0; rows * p];
    let mut gcols = vec![0.0; rows * p];
    for b in 0..n {
        let go = &gout[b * k * p..(b + 1) * k * p];
        geom.im2col(&input.data()[b * in_per..(b + 1) * in_per], &mut cols);
        // dK[k×rows] += dY[k×p] · colsᵀ[p×rows]
        gemm(k, p, rows, go, (p as isize, 1), &cols, (1, p as isize), &mut gk, true);
        // dcols[rows×p] = Kᵀ[rows×k] · dY[k×p]
        gemm(
            rows,
            k,
            p,
            kernel.data(),
            (1, rows as isize),
            go,
            (p as isize, 1),
            &mut gcols,
            false,
        );
        geom.col2im(&gcols, &mut gi[b * in_per..(b + 1) * in_per]);
        if let Some(gb) = gb.as_mut() {
            for (kk, acc) in gb.iter_mut().enumerate() {
                *acc += go[kk * p..(kk + 1) * p].iter().sum::<f64>();
            }
        }
    }
    (gi, gk, gb)
}

pub(crate) fn upsample2_backward(in_shape: &[usize], gout: &[f64]) -> Vec<f64> {
    let &[n, c, h, w] = in_shape else {
        unreachable!("upsample input is 4-D")
    };
    let mut g = vec![0.0; n * c * h * w];
    let w2 = 2 * w;
    for plane in 0..n * c {
        let src = &gout[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut g[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    g
}

pub(crate) fn concat_backward(a: &[usize], b: &[usize], gout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, ca, hw) = (a[0], a[1], a[2] * a[3]);
    let cb = b[1];
    let mut ga = Vec::with_capacity(n * ca * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for item in 0..n {
        let base = item * (ca + cb) * hw;
        ga.extend_from_slice(&gout[base..base + ca * hw]);
        gb.extend_from_slice(&gout[base + ca * hw..base + (ca + cb) * hw]);
    }
    (ga, gb)
}

pub(crate) fn instance_norm_backward(y: &Tensor, inv_std: &[f64], gout: &[f64]) -> Vec<f64> {
    let hw = y.shape()[2] * y.shape()[3];
    let yd = y.data();
    let mut g = vec![0.0; yd.len()];
    for (plane, &is) in inv_std.iter().enumerate() {
        let r = plane * hw..(plane + 1) * hw;
        let (gp, yp) = (&gout[r.clone()], &yd[r.clone()]);
        let mg = gp.iter().sum::<f64>() / hw as f64;
        let mgy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        for (dst, (gv, yv)) in g[r].iter_mut().zip(gp.iter().zip(yp)) {
            *dst = is * (gv - mg - yv * mgy);
        }
    }
    g
}

/// Epsilon added to the variance in [`Graph::instance_norm`].
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// Cross-correlation of `input [N,C,H,W]` with `kernel [K,C,kh,kw]`,
    /// plus an optional per-output-channel `bias [K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, kt) = (self.value(input), self.value(kernel));
        let (n, k, geom) = geometry(x.shape(), kt.shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[k]));
            }
        }
        let (rows, p) = (geom.rows(), geom.cols());
        let in_per = geom.c * geom.h * geom.w;
        let mut out = vec![0.0; n * k * p];
        let mut cols = vec![0.0; rows * p];
        for b in 0..n {
            geom.im2col(&x.data()[b * in_per..(b + 1) * in_per], &mut cols);
            let dst = &mut out[b * k * p..(b + 1) * k * p];
            gemm(
                k,
                rows,
                p,
                kt.data(),
                (rows as isize, 1),
                &cols,
                (p as isize, 1),
                dst,
                false,
            );
            if let Some(bv) = bias {
                for (kk, &bias) in self.value(bv).data().iter().enumerate() {
                    dst[kk * p..(kk + 1) * p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "conv2d" });
        }
        let value = Tensor {
            shape: vec![n, k, geom.ho, geom.wo],
            data: out,
        };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.derived(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &inputs,
        ))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("max_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!(
                "max_pool2d: spatial size {h}x{w} is not even"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        Ok(self.derived(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("nearest_upsample")?;
        let xd = x.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, h2, w2],
            data: out,
        };
        Ok(self.derived(value, Op::Upsample2(input), &[input]))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, ca, h, w) = av.dims4("concat_channels")?;
        let (nb, cb, hb, wb) = bv.dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", av.shape(), bv.shape()));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for item in 0..n {
            data.extend_from_slice(&av.data()[item * ca * hw..(item + 1) * ca * hw]);
            data.extend_from_slice(&bv.data()[item * cb * hw..(item + 1) * cb * hw]);
        }
        let value = Tensor {
            shape: vec![n, ca + cb, h, w],
            data,
        };
        Ok(self.derived(value, Op::Concat(a, b), &[a, b]))
    }

    /// Per-item, per-channel normalization to zero mean and unit variance
    /// over the spatial axes. No affine parameters.
    pub fn instance_norm(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("instance_norm")?;
        let hw = h * w;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in 0..n * c {
            let src = &xd[plane * hw..(plane + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            for (d, s) in out[plane * hw..(plane + 1) * hw].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: out,
        };
        Ok(self.derived(value, Op::InstanceNorm { input, inv_std }, &[input]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_sums_channels() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 3).map(|v| v as f64).collect();
        let x = g.constant(Tensor::new(vec![1, 2, 3, 3], data.clone()).unwrap());
        let k = g.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
        let y = g.conv2d(x, k, None, 1, 0).unwrap();
        let expect: Vec<f64> = (0..9).map(|i| data[i] + data[9 + i]).collect();
        assert_eq!(g.value(y).data(), &expect[..]);
    }

    #[test]
    fn ones_kernel_counts_window() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        assert_eq!(out.data()[12], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[2], 6.0);
    }

    #[test]
    fn non_integral_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, k, None, 2, 0).is_err());
        assert!(g.conv2d(x, k, None, 3, 0).is_ok());
        let even = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.conv2d(x, even, None, 1, 0).is_err());
    }

    #[test]
    fn strided_conv_matches_direct_sum() {
        let mut g = Graph::new();
        let xd: Vec<f64> = (0..49).map(|v| (v as f64 * 0.37).sin()).collect();
        let kd: Vec<f64> = (0..9).map(|v| (v as f64 * 0.91).cos()).collect();
        let x = g.constant(Tensor::new(vec![1, 1, 7, 7], xd.clone()).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 3, 3], kd.clone()).unwrap());
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix = (2 * ox + kx) as isize - 1;
                        if (0..7).contains(&iy) && (0..7).contains(&ix) {
                            s += xd[iy as usize * 7 + ix as usize] * kd[ky * 3 + kx];
                        }
                    }
                }
                assert!((g.value(y).data()[oy * 4 + ox] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_upsample_concat() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let p = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
        let u = g.upsample_nearest2(p).unwrap();
        assert_eq!(g.value(u).data(), &[4.0; 4]);
        let c = g.concat_channels(x, u).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 2, 2]);
        let s = g.sum(c, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 5.0, 1.0, 1.0]);
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| (v * v) as f64).collect();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 4], data).unwrap());
        let y = g.instance_norm(x).unwrap();
        let d = g.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 16.0;
        let var: f64 = d.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }
}
