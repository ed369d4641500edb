//! Convolution, pooling and dense kernels with exact analytic backward passes.
//!
//! Layouts are NCHW for images, `[Cout, Cin, k, k]` for kernels and `[m, n]`
//! for dense weights. Convolution is cross-correlation (no kernel flip).

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{param_err, shape_err, Result};

/// Output extent of a strided, padded window sweep.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > len + 2 * pad {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

/// Range of output positions `o` for which `o * stride + off - pad` lands
/// inside `[0, in_len)`.
fn valid_range(off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > off {
        ((in_len - 1 + pad - off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(shape_err(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn conv_shapes(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<[usize; 8]> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    let (b, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, kcin, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if kcin != cin || kh != kw {
        return Err(shape_err(format!(
            "conv2d input {:?} incompatible with kernel {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(param_err("conv2d stride must be >= 1"));
    }
    let (Some(oh), Some(ow)) = (conv_out_len(h, kh, stride, pad), conv_out_len(w, kw, stride, pad)) else {
        return Err(shape_err(format!(
            "conv2d kernel {:?} larger than padded input {:?} (pad {pad})",
            kernel.shape(),
            input.shape()
        )));
    };
    Ok([b, cin, h, w, cout, kh, oh, ow])
}

/// Row-major strided operand for [`gemm`].
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `[rows, cols]` buffer.
    fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn covers(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `c[m, n] = beta·c + a[m, k]·b[k, n]` with `c` row-major and contiguous.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(a.covers(m, k) && b.covers(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unrolls one sample into `cols[cin·k·k, oh·ow]`; padding reads as zero.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n = self.positions();
        for ci in 0..self.cin {
            let src = &x[ci * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = valid_range(ky, self.pad, self.stride, self.h, self.oh);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = valid_range(kx, self.pad, self.stride, self.w, self.ow);
                    let row = &mut cols[((ci * self.k + ky) * self.k + kx) * n..][..n];
                    row.fill(0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let dst = &mut row[oy * self.ow..][ox_lo..ox_hi];
                        let line = &src[iy * self.w..][..self.w];
                        if self.stride == 1 {
                            let ix0 = ox_lo + kx - self.pad;
                            dst.copy_from_slice(&line[ix0..ix0 + dst.len()]);
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d = line[(ox_lo + j) * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates `cols` back into `gx`.
    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let n = self.positions();
        for ci in 0..self.cin {
            let dst = &mut gx[ci * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.k {
                let (oy_lo, oy_hi) = valid_range(ky, self.pad, self.stride, self.h, self.oh);
                for kx in 0..self.k {
                    let (ox_lo, ox_hi) = valid_range(kx, self.pad, self.stride, self.w, self.ow);
                    let row = &cols[((ci * self.k + ky) * self.k + kx) * n..][..n];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let src = &row[oy * self.ow..][ox_lo..ox_hi];
                        let line = &mut dst[iy * self.w..][..self.w];
                        if self.stride == 1 {
                            let ix0 = ox_lo + kx - self.pad;
                            for (d, v) in line[ix0..ix0 + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in src.iter().enumerate() {
                                line[(ox_lo + j) * self.stride + kx - self.pad] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [b, cin, h, w, cout, k, oh, ow] = conv_shapes(input, kernel, stride, pad)?;
    if bias.shape() != [cout] {
        return Err(shape_err(format!(
            "conv2d bias {:?} does not match kernel {:?}",
            bias.shape(),
            kernel.shape()
        )));
    }
    let geom = ConvGeom { cin, h, w, k, stride, pad, oh, ow };
    let (kk, n) = (geom.patch(), geom.positions());
    let x = input.data();
    let mut cols = vec![0.0; kk * n];
    let mut out = Vec::with_capacity(b * cout * n);
    for &bv in bias.data().iter().cycle().take(b * cout) {
        out.extend(std::iter::repeat_n(bv, n));
    }
    for (bi, plane) in out.chunks_exact_mut(cout * n).enumerate() {
        geom.im2col(&x[bi * cin * h * w..][..cin * h * w], &mut cols);
        gemm(cout, kk, n, Mat::rows(kernel.data(), kk), Mat::rows(&cols, n), 1.0, plane);
    }
    Ok(Tensor::from_parts(vec![b, cout, oh, ow], out))
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<Conv2dGrads> {
    let [b, cin, h, w, cout, k, oh, ow] = conv_shapes(input, kernel, stride, pad)?;
    if grad_out.shape() != [b, cout, oh, ow] {
        return Err(shape_err(format!(
            "conv2d upstream gradient {:?} does not match output shape {:?}",
            grad_out.shape(),
            [b, cout, oh, ow]
        )));
    }
    let geom = ConvGeom { cin, h, w, k, stride, pad, oh, ow };
    let (kk, n) = (geom.patch(), geom.positions());
    let x = input.data();
    let g = grad_out.data();
    let mut gk = vec![0.0; cout * kk];
    let mut gb = vec![0.0; cout];
    let mut gx = if need_input_grad { vec![0.0; x.len()] } else { Vec::new() };
    let mut cols = vec![0.0; kk * n];
    let mut gcols = if need_input_grad { vec![0.0; kk * n] } else { Vec::new() };
    for bi in 0..b {
        let gplane = &g[bi * cout * n..][..cout * n];
        for (co, grow) in gplane.chunks_exact(n).enumerate() {
            gb[co] += grow.iter().sum::<f64>();
        }
        geom.im2col(&x[bi * cin * h * w..][..cin * h * w], &mut cols);
        gemm(cout, n, kk, Mat::rows(gplane, n), Mat::transposed(&cols, n), 1.0, &mut gk);
        if need_input_grad {
            gemm(kk, cout, n, Mat::transposed(kernel.data(), kk), Mat::rows(gplane, n), 0.0, &mut gcols);
            geom.col2im(&gcols, &mut gx[bi * cin * h * w..][..cin * h * w]);
        }
    }
    Ok(Conv2dGrads {
        input: need_input_grad.then(|| Tensor::from_parts(input.shape().to_vec(), gx)),
        kernel: Tensor::from_parts(kernel.shape().to_vec(), gk),
        bias: Tensor::from_parts(vec![cout], gb),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// What the pooling backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct PoolTrace {
    input_shape: Vec<usize>,
    kind: PoolKind,
    size: usize,
    /// Flat input offset of the selected element per output (max pooling only).
    argmax: Vec<u32>,
}

fn pool_shapes(input: &Tensor, size: usize) -> Result<[usize; 4]> {
    if input.rank() != 4 {
        return Err(shape_err(format!("pool2d input must have rank 4, got {:?}", input.shape())));
    }
    if size == 0 {
        return Err(param_err("pool size must be >= 1"));
    }
    let s = input.shape();
    if s[2] % size != 0 || s[3] % size != 0 {
        return Err(shape_err(format!(
            "pool2d spatial dims of {:?} not divisible by pool size {size}",
            s
        )));
    }
    Ok([s[0] * s[1], s[2], s[3], size])
}

pub fn pool2d(input: &Tensor, kind: PoolKind, size: usize) -> Result<Tensor> {
    pool2d_forward(input, kind, size).map(|(t, _)| t)
}

pub fn pool2d_forward(input: &Tensor, kind: PoolKind, size: usize) -> Result<(Tensor, PoolTrace)> {
    let [planes, h, w, p] = pool_shapes(input, size)?;
    let (oh, ow) = (h / p, w / p);
    let x = input.data();
    let mut out = vec![0.0; planes * oh * ow];
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.reserve(out.len());
    }
    let inv = 1.0 / (p * p) as f64;
    if kind == PoolKind::Max && p == 2 {
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..oh {
                let r0 = base + 2 * oy * w;
                let (top, bottom) = (&x[r0..r0 + w], &x[r0 + w..r0 + 2 * w]);
                let dst = &mut out[(pl * oh + oy) * ow..][..ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let c = 2 * ox;
                    // scan order top-left, top-right, bottom-left, bottom-right; first maximum wins
                    let (mut best, mut off) = (top[c], r0 + c);
                    if top[c + 1] > best {
                        (best, off) = (top[c + 1], r0 + c + 1);
                    }
                    if bottom[c] > best {
                        (best, off) = (bottom[c], r0 + w + c);
                    }
                    if bottom[c + 1] > best {
                        (best, off) = (bottom[c + 1], r0 + w + c + 1);
                    }
                    *d = best;
                    argmax.push(off as u32);
                }
            }
        }
        let trace = PoolTrace { input_shape: input.shape().to_vec(), kind, size, argmax };
        let mut shape = input.shape().to_vec();
        shape[2] = oh;
        shape[3] = ow;
        return Ok((Tensor::from_parts(shape, out), trace));
    }
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (pl * oh + oy) * ow + ox;
                match kind {
                    PoolKind::Max => {
                        let mut best = base + oy * p * w + ox * p;
                        for dy in 0..p {
                            for dx in 0..p {
                                let i = base + (oy * p + dy) * w + ox * p + dx;
                                // strict comparison keeps the first maximum in scan order
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        out[o] = x[best];
                        argmax.push(best as u32);
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for dy in 0..p {
                            let row = base + (oy * p + dy) * w + ox * p;
                            s += x[row..row + p].iter().sum::<f64>();
                        }
                        out[o] = s * inv;
                    }
                }
            }
        }
    }
    let mut shape = input.shape().to_vec();
    shape[2] = oh;
    shape[3] = ow;
    let trace = PoolTrace { input_shape: input.shape().to_vec(), kind, size, argmax };
    Ok((Tensor::from_parts(shape, out), trace))
}

pub fn pool2d_backward(trace: &PoolTrace, grad_out: &Tensor) -> Result<Tensor> {
    let s = &trace.input_shape;
    let p = trace.size;
    let expected = [s[0], s[1], s[2] / p, s[3] / p];
    if grad_out.shape() != expected {
        return Err(shape_err(format!(
            "pool2d upstream gradient {:?} does not match output shape {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let mut gx = vec![0.0; s.iter().product()];
    let g = grad_out.data();
    match trace.kind {
        PoolKind::Max => {
            for (gv, &i) in g.iter().zip(&trace.argmax) {
                gx[i as usize] += gv;
            }
        }
        PoolKind::Avg => {
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / p, w / p);
            let inv = 1.0 / (p * p) as f64;
            for pl in 0..s[0] * s[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(pl * oh + oy) * ow + ox] * inv;
                        for dy in 0..p {
                            let row = pl * h * w + (oy * p + dy) * w + ox * p;
                            for v in &mut gx[row..row + p] {
                                *v += gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(s.clone(), gx))
}

fn dense_shapes(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    expect_rank(input, 2, "dense input")?;
    expect_rank(weight, 2, "dense weight")?;
    let (b, n) = (input.shape()[0], input.shape()[1]);
    let (m, wn) = (weight.shape()[0], weight.shape()[1]);
    if n != wn {
        return Err(shape_err(format!(
            "dense input {:?} incompatible with weight {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    Ok((b, n, m))
}

/// `out = input · weightᵀ + bias`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, n, m) = dense_shapes(input, weight)?;
    if bias.shape() != [m] {
        return Err(shape_err(format!(
            "dense bias {:?} does not match weight {:?}",
            bias.shape(),
            weight.shape()
        )));
    }
    let mut out = Vec::with_capacity(b * m);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(b, n, m, Mat::rows(input.data(), n), Mat::transposed(weight.data(), n), 1.0, &mut out);
    Ok(Tensor::from_parts(vec![b, m], out))
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, need_input_grad: bool) -> Result<DenseGrads> {
    let (b, n, m) = dense_shapes(input, weight)?;
    if grad_out.shape() != [b, m] {
        return Err(shape_err(format!(
            "dense upstream gradient {:?} does not match output shape {:?}",
            grad_out.shape(),
            [b, m]
        )));
    }
    let g = grad_out.data();
    let mut gw = vec![0.0; m * n];
    gemm(m, b, n, Mat::transposed(g, m), Mat::rows(input.data(), n), 0.0, &mut gw);
    let mut gb = vec![0.0; m];
    for row in g.chunks_exact(m) {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let gx = need_input_grad.then(|| {
        let mut gx = vec![0.0; b * n];
        gemm(b, m, n, Mat::rows(g, m), Mat::rows(weight.data(), n), 0.0, &mut gx);
        Tensor::from_parts(vec![b, n], gx)
    });
    Ok(DenseGrads {
        input: gx,
        weight: Tensor::from_parts(vec![m, n], gw),
        bias: Tensor::from_parts(vec![m], gb),
    })
}
