//! Raw forward/backward kernels on flat buffers.
//!
//! Layouts: images are NCHW, `conv2d` weights are `[out, in, kh, kw]`,
//! `conv_transpose2d` weights are `[in, out, kh, kw]`, `linear` weights are
//! `[out, in]`. Every output element accumulates its bias first and then the
//! products in `(in_channel, ky, kx)` order, which is the order of the plain
//! textbook loop nest.

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

struct Dims4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<Dims4, NumericsError> {
    match *t.shape() {
        [n, c, h, w] => Ok(Dims4 { n, c, h, w }),
        _ => Err(NumericsError::Shape {
            op,
            detail: format!("expected a 4-d tensor, got {:?}", t.shape()),
        }),
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, out: usize) -> Result<(), NumericsError> {
    if let Some(b) = bias {
        if b.shape() != [out] {
            return Err(NumericsError::mismatch(op, &[out], b.shape()));
        }
    }
    Ok(())
}

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, p: ConvParams) -> Option<usize> {
    if p.stride == 0 || input + 2 * p.padding < kernel {
        return None;
    }
    Some((input + 2 * p.padding - kernel) / p.stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, kernel: usize, p: ConvParams) -> Option<usize> {
    let full = (input - 1) * p.stride + kernel;
    if p.stride == 0 || full <= 2 * p.padding {
        return None;
    }
    Some(full - 2 * p.padding)
}

/// Range of output coordinates `o` with `0 <= o*stride + k - pad < input`.
fn valid_range(out: usize, input: usize, k: usize, p: ConvParams) -> (usize, usize) {
    let s = p.stride as isize;
    let off = k as isize - p.padding as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest o with o*s + off <= input - 1
    let hi_excl = if (input as isize - 1 - off) < 0 {
        0
    } else {
        (input as isize - 1 - off) / s + 1
    };
    let lo = lo.max(0) as usize;
    let hi = (hi_excl.max(0) as usize).min(out);
    (lo, hi.max(lo))
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn gemm_tile<const R: usize>(n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64], i: usize, j: usize) {
    let mut acc = [[0.0; NR]; R];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..][..NR]);
    }
    let arows: [&[f64]; R] = std::array::from_fn(|r| &a[(i + r) * k..][..k]);
    for (kk, brow) in b.chunks_exact(n).enumerate() {
        let bv: [f64; NR] = brow[j..j + NR].try_into().unwrap();
        for r in 0..R {
            let av = arows[r][kk];
            for t in 0..NR {
                acc[r][t] += av * bv[t];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..][..NR].copy_from_slice(row);
    }
}

/// `c += a b` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`. Every
/// element of `c` adds its `k` products in ascending `k` order, with a
/// separate multiply and add, so results do not depend on the instruction
/// set used.
fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_avx(m, n, k, a, b, c) };
        return;
    }
    gemm_body(m, n, k, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_avx(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_body(m, n, k, a, b, c);
}

#[inline(always)]
fn gemm_body(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let (a, b, c) = (&a[..m * k], &b[..k * n], &mut c[..m * n]);
    let full = n - n % NR;
    let split = m - m % MR;
    // Column panels outermost so one `k x NR` slice of `b` stays in cache
    // across all row blocks.
    for j in (0..full).step_by(NR) {
        for i in (0..split).step_by(MR) {
            gemm_tile::<MR>(n, k, a, b, c, i, j);
        }
        for i in split..m {
            gemm_tile::<1>(n, k, a, b, c, i, j);
        }
    }
    for r in 0..m {
        for j in full..n {
            let mut acc = c[r * n + j];
            for kk in 0..k {
                acc += a[r * k + kk] * b[kk * n + j];
            }
            c[r * n + j] = acc;
        }
    }
}

/// `c += a b^T` for row-major `a: [m, k]`, `b: [n, k]`, `c: [m, n]`, as
/// blocked dot products; the summation order is unspecified.
fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_nt_avx(m, n, k, a, b, c) };
        return;
    }
    gemm_nt_body(m, n, k, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_nt_avx(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_nt_body(m, n, k, a, b, c);
}

#[inline(always)]
fn gemm_nt_body(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const KC: usize = 512;
    const L: usize = 4;
    for k0 in (0..k).step_by(KC) {
        let kl = KC.min(k - k0);
        let body = kl - kl % L;
        for i in (0..m).step_by(2) {
            let ri = 2.min(m - i);
            for j in (0..n).step_by(2) {
                let rj = 2.min(n - j);
                let mut acc = [[[0.0; L]; 2]; 2];
                for x in 0..ri {
                    let ar = &a[(i + x) * k + k0..][..kl];
                    for y in 0..rj {
                        let br = &b[(j + y) * k + k0..][..kl];
                        let lanes = &mut acc[x][y];
                        for (ac, bc) in ar[..body].chunks_exact(L).zip(br[..body].chunks_exact(L)) {
                            for l in 0..L {
                                lanes[l] += ac[l] * bc[l];
                            }
                        }
                        for t in body..kl {
                            lanes[0] += ar[t] * br[t];
                        }
                    }
                }
                for x in 0..ri {
                    for y in 0..rj {
                        c[(i + x) * n + j + y] += acc[x][y].iter().sum::<f64>();
                    }
                }
            }
        }
    }
}

/// Row-major `[rows, cols]` to `[cols, rows]`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for (i, row) in a.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// `[n, c, p]` to `[c, n*p]`.
fn to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&x[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// `[c, n*p]` to `[n, c, p]`.
fn from_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&x[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

/// Convolution geometry: input `[n, c, h, w]` read through `kh x kw`
/// windows onto an `oh x ow` grid.
#[derive(Clone, Copy)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    p: ConvParams,
}

impl Geom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.p.stride == 1 && self.p.padding == 0
    }

    /// Patch matrix `[c*kh*kw, n*oh*ow]`; out-of-bounds taps are zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let g = *self;
        if g.is_pointwise() {
            return to_channel_major(x, g.n, g.c, g.h * g.w);
        }
        let (s, pad, pn) = (g.p.stride, g.p.padding, g.oh * g.ow);
        let mut col = vec![0.0; g.k() * g.cols()];
        for ci in 0..g.c {
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(g.oh, g.h, ky, g.p);
                for kx in 0..g.kw {
                    let (x0, x1) = valid_range(g.ow, g.w, kx, g.p);
                    let dst = &mut col[((ci * g.kh + ky) * g.kw + kx) * g.cols()..][..g.cols()];
                    for ni in 0..g.n {
                        let xin = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                        let d = &mut dst[ni * pn..][..pn];
                        for oy in y0..y1 {
                            let row = &xin[(oy * s + ky - pad) * g.w..][..g.w];
                            for ox in x0..x1 {
                                d[oy * g.ow + ox] = row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of `im2col`: scatter-adds a patch matrix back to `[n, c, h, w]`.
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let g = *self;
        if g.is_pointwise() {
            return from_channel_major(col, g.n, g.c, g.h * g.w);
        }
        let (s, pad, pn) = (g.p.stride, g.p.padding, g.oh * g.ow);
        let mut x = vec![0.0; g.n * g.c * g.h * g.w];
        for ci in 0..g.c {
            for ky in 0..g.kh {
                let (y0, y1) = valid_range(g.oh, g.h, ky, g.p);
                for kx in 0..g.kw {
                    let (x0, x1) = valid_range(g.ow, g.w, kx, g.p);
                    let src = &col[((ci * g.kh + ky) * g.kw + kx) * g.cols()..][..g.cols()];
                    for ni in 0..g.n {
                        let xin = &mut x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                        let sv = &src[ni * pn..][..pn];
                        for oy in y0..y1 {
                            let row = &mut xin[(oy * s + ky - pad) * g.w..][..g.w];
                            for ox in x0..x1 {
                                row[ox * s + kx - pad] += sv[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn bias_rows(bias: Option<&Tensor>, rows: usize, cols: usize) -> Vec<f64> {
    match bias {
        Some(b) => b.data().iter().flat_map(|&v| std::iter::repeat(v).take(cols)).collect(),
        None => vec![0.0; rows * cols],
    }
}

fn row_sums(a: &[f64], cols: usize) -> Vec<f64> {
    a.chunks_exact(cols).map(|r| r.iter().sum()).collect()
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor, NumericsError> {
    const OP: &str = "conv2d";
    let x = dims4(OP, input)?;
    let k = dims4(OP, weight)?;
    if k.c != x.c {
        return Err(NumericsError::mismatch(OP, input.shape(), weight.shape()));
    }
    check_bias(OP, bias, k.n)?;
    let (oh, ow) = match (conv_out_size(x.h, k.h, p), conv_out_size(x.w, k.w, p)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(NumericsError::mismatch(OP, input.shape(), weight.shape())),
    };
    let g = Geom {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        kh: k.h,
        kw: k.w,
        oh,
        ow,
        p,
    };
    let col = g.im2col(input.data());
    let mut out = bias_rows(bias, k.n, g.cols());
    gemm_acc(k.n, g.cols(), g.k(), weight.data(), &col, &mut out);
    Tensor::new(vec![x.n, k.n, oh, ow], from_channel_major(&out, x.n, k.n, oh * ow))
}

/// Gradients of `conv2d` with respect to input, weight and bias.
pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, p: ConvParams) -> (Tensor, Tensor, Tensor) {
    let (xs, ks, gs) = (input.shape(), weight.shape(), grad_out.shape());
    let co = ks[0];
    let g = Geom {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ks[2],
        kw: ks[3],
        oh: gs[2],
        ow: gs[3],
        p,
    };
    let gm = to_channel_major(grad_out.data(), g.n, co, g.oh * g.ow);
    let col = g.im2col(input.data());
    let mut gw = vec![0.0; co * g.k()];
    gemm_nt(co, g.k(), g.cols(), &gm, &col, &mut gw);
    let w_t = transpose(weight.data(), co, g.k());
    let mut gcol = vec![0.0; g.k() * g.cols()];
    gemm_acc(g.k(), g.cols(), co, &w_t, &gm, &mut gcol);
    (
        Tensor::new(xs.to_vec(), g.col2im(&gcol)).expect("shape"),
        Tensor::new(ks.to_vec(), gw).expect("shape"),
        Tensor::new(vec![co], row_sums(&gm, g.cols())).expect("shape"),
    )
}

pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: ConvParams,
) -> Result<Tensor, NumericsError> {
    const OP: &str = "conv_transpose2d";
    let x = dims4(OP, input)?;
    let k = dims4(OP, weight)?;
    // weight is [in, out, kh, kw]
    if k.n != x.c {
        return Err(NumericsError::mismatch(OP, input.shape(), weight.shape()));
    }
    let co = k.c;
    check_bias(OP, bias, co)?;
    let (oh, ow) = match (
        conv_transpose_out_size(x.h, k.h, p),
        conv_transpose_out_size(x.w, k.w, p),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(NumericsError::mismatch(OP, input.shape(), weight.shape())),
    };
    let (s, pad) = (p.stride, p.padding);
    let (xd, wd) = (input.data(), weight.data());
    let mut out = vec![0.0; x.n * co * oh * ow];
    // Output pixels with the same (oy mod s, ox mod s) share one set of
    // kernel taps, so each residue class is a dense product.
    for py in 0..s.min(oh) {
        let taps_y: Vec<usize> = (0..k.h).filter(|&ky| (py + pad + s * k.h - ky) % s == 0).collect();
        let th = (oh - py).div_ceil(s);
        for px in 0..s.min(ow) {
            let taps_x: Vec<usize> = (0..k.w).filter(|&kx| (px + pad + s * k.w - kx) % s == 0).collect();
            let tw = (ow - px).div_ceil(s);
            let kk = x.c * taps_y.len() * taps_x.len();
            let cols = x.n * th * tw;
            let mut wc = Vec::with_capacity(co * kk);
            for o in 0..co {
                for c in 0..x.c {
                    for &ky in &taps_y {
                        for &kx in &taps_x {
                            wc.push(wd[((c * co + o) * k.h + ky) * k.w + kx]);
                        }
                    }
                }
            }
            let mut col = vec![0.0; kk * cols];
            let mut row = 0;
            for c in 0..x.c {
                for &ky in &taps_y {
                    for &kx in &taps_x {
                        let dst = &mut col[row * cols..][..cols];
                        row += 1;
                        for ni in 0..x.n {
                            let xin = &xd[(ni * x.c + c) * x.h * x.w..][..x.h * x.w];
                            for t in 0..th {
                                let num = py + s * t + pad;
                                if num < ky || (num - ky) / s >= x.h {
                                    continue;
                                }
                                let iy = (num - ky) / s;
                                for u in 0..tw {
                                    let num = px + s * u + pad;
                                    if num < kx || (num - kx) / s >= x.w {
                                        continue;
                                    }
                                    dst[(ni * th + t) * tw + u] = xin[iy * x.w + (num - kx) / s];
                                }
                            }
                        }
                    }
                }
            }
            let mut oc = bias_rows(bias, co, cols);
            gemm_acc(co, cols, kk, &wc, &col, &mut oc);
            for o in 0..co {
                for ni in 0..x.n {
                    let plane = &mut out[(ni * co + o) * oh * ow..][..oh * ow];
                    let src = &oc[o * cols + ni * th * tw..][..th * tw];
                    for t in 0..th {
                        for u in 0..tw {
                            plane[(py + s * t) * ow + px + s * u] = src[t * tw + u];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![x.n, co, oh, ow], out)
}

/// Gradients of `conv_transpose2d` with respect to input, weight and bias.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    p: ConvParams,
) -> (Tensor, Tensor, Tensor) {
    let (xs, ks, gs) = (input.shape(), weight.shape(), grad_out.shape());
    let (ci, co) = (ks[0], ks[1]);
    // The input gradient is an ordinary convolution of the output gradient
    // with the same weights read as [in, out] -> [out', in'].
    let gx = conv2d(grad_out, weight, None, p).expect("transpose geometry");
    let g = Geom {
        n: gs[0],
        c: co,
        h: gs[2],
        w: gs[3],
        kh: ks[2],
        kw: ks[3],
        oh: xs[2],
        ow: xs[3],
        p,
    };
    let xm = to_channel_major(input.data(), xs[0], ci, xs[2] * xs[3]);
    let col = g.im2col(grad_out.data());
    let mut gw = vec![0.0; ci * g.k()];
    gemm_nt(ci, g.k(), g.cols(), &xm, &col, &mut gw);
    let gm = to_channel_major(grad_out.data(), gs[0], co, gs[2] * gs[3]);
    (
        gx,
        Tensor::new(ks.to_vec(), gw).expect("shape"),
        Tensor::new(vec![co], row_sums(&gm, gs[0] * gs[2] * gs[3])).expect("shape"),
    )
}

/// `y = x W^T + b` over the last axis of `x`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, NumericsError> {
    const OP: &str = "linear";
    let (out_f, in_f) = match *weight.shape() {
        [o, i] => (o, i),
        _ => return Err(NumericsError::mismatch(OP, input.shape(), weight.shape())),
    };
    if input.shape().last() != Some(&in_f) {
        return Err(NumericsError::mismatch(OP, input.shape(), weight.shape()));
    }
    check_bias(OP, bias, out_f)?;
    let rows = input.numel() / in_f;
    let (xd, wd) = (input.data(), weight.data());
    let mut out = vec![0.0; rows * out_f];
    for r in 0..rows {
        let x = &xd[r * in_f..][..in_f];
        let y = &mut out[r * out_f..][..out_f];
        for (o, yo) in y.iter_mut().enumerate() {
            let wrow = &wd[o * in_f..][..in_f];
            let mut acc = bias.map_or(0.0, |b| b.data()[o]);
            for (xi, wi) in x.iter().zip(wrow) {
                acc += xi * wi;
            }
            *yo = acc;
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let rows = input.numel() / in_f;
    let (xd, wd, gd) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; out_f];
    for r in 0..rows {
        let x = &xd[r * in_f..][..in_f];
        let gxr = &mut gx[r * in_f..][..in_f];
        for o in 0..out_f {
            let g = gd[r * out_f + o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let wrow = &wd[o * in_f..][..in_f];
            let gwrow = &mut gw[o * in_f..][..in_f];
            for i in 0..in_f {
                gxr[i] += g * wrow[i];
                gwrow[i] += g * x[i];
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).expect("shape"),
        Tensor::new(weight.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![out_f], gb).expect("shape"),
    )
}

/// Batched `A B` for `[b, n, k] x [b, k, m]`.
pub(crate) fn bmm(a: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * n * m];
    for bi in 0..batch {
        let a = &a[bi * n * k..][..n * k];
        let b = &b[bi * k * m..][..k * m];
        let o = &mut out[bi * n * m..][..n * m];
        for i in 0..n {
            let orow = &mut o[i * m..][..m];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * m..][..m];
                for j in 0..m {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// Batched transpose of the last two axes of a `[b, n, m]` buffer.
pub(crate) fn transpose_last2(a: &[f64], batch: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..batch {
        let src = &a[bi * n * m..][..n * m];
        let dst = &mut out[bi * n * m..][..n * m];
        for i in 0..n {
            for j in 0..m {
                dst[j * n + i] = src[i * m + j];
            }
        }
    }
    out
}
