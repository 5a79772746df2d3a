//! Convolution and transposed convolution via im2col + GEMM.

use crate::autodiff::{BackwardCtx, Cost, CostKind, Operation, Stackable};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Shape, Tensor, Transpose};

/// Column buffer geometry: an image of `channels x (ih, iw)` read by a
/// `k x k` window with stride `s` and zero padding `p` over an `(oh, ow)`
/// output grid.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    ih: usize,
    iw: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the image already is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

fn im2col<T: Scalar>(img: &[T], g: &Geometry, col: &mut [T]) {
    im2col_strided(img, g, col, g.cols(), 0);
}

/// [`im2col`] into columns `offset..offset + cols` of a matrix with row
/// stride `ld`.
fn im2col_strided<T: Scalar>(img: &[T], g: &Geometry, col: &mut [T], ld: usize, offset: usize) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * ld + offset..row * ld + offset + cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.ih as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.iw..(iy as usize + 1) * g.iw];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *o = if ix < 0 || ix >= g.iw as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, img: &mut [T]) {
    col2im_strided(col, g, img, g.cols(), 0);
}

/// [`col2im`] from columns `offset..offset + cols` of a matrix with row
/// stride `ld`.
fn col2im_strided<T: Scalar>(col: &[T], g: &Geometry, img: &mut [T], ld: usize, offset: usize) {
    img.fill(T::zero());
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.ih * g.iw..(c + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * ld + offset..row * ld + offset + cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.ih as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.iw..(iy as usize + 1) * g.iw];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && (ix as usize) < g.iw {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation of one image. The input is copied into a
/// zero-padded buffer so that every kernel tap becomes one long contiguous
/// update over the output plane (computed at padded width, then cropped).
fn conv_direct<T: Scalar>(img: &[T], w: &[T], cout: usize, g: &Geometry, out: &mut [T], pad: &mut Vec<T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required feature was detected at runtime.
        return unsafe { conv_direct_avx2(img, w, cout, g, out, pad) };
    }
    conv_direct_body(img, w, cout, g, out, pad)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_direct_avx2<T: Scalar>(img: &[T], w: &[T], cout: usize, g: &Geometry, out: &mut [T], pad: &mut Vec<T>) {
    conv_direct_body(img, w, cout, g, out, pad)
}

#[inline(always)]
fn conv_direct_body<T: Scalar>(img: &[T], w: &[T], cout: usize, g: &Geometry, out: &mut [T], pad: &mut Vec<T>) {
    debug_assert_eq!(g.s, 1);
    let (k, p) = (g.k, g.p);
    let (ph, pw) = (g.ih + 2 * p, g.iw + 2 * p);
    pad.clear();
    pad.resize(g.channels * ph * pw + g.oh * pw, T::zero());
    let (padded, acc) = pad.split_at_mut(g.channels * ph * pw);
    for (c, plane) in img.chunks(g.ih * g.iw).enumerate() {
        for (y, row) in plane.chunks(g.iw).enumerate() {
            padded[(c * ph + y + p) * pw + p..][..g.iw].copy_from_slice(row);
        }
    }
    let span = (g.oh - 1) * pw + g.ow;
    let acc = &mut acc[..span];
    for (o, dst) in out.chunks_mut(g.cols()).enumerate().take(cout) {
        acc.fill(T::zero());
        for c in 0..g.channels {
            let taps = &w[(o * g.channels + c) * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = taps[ky * k + kx];
                    let src = &padded[(c * ph + ky) * pw + kx..][..span];
                    for (a, &x) in acc.iter_mut().zip(src) {
                        *a += wv * x;
                    }
                }
            }
        }
        for oy in 0..g.oh {
            dst[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&acc[oy * pw..oy * pw + g.ow]);
        }
    }
}

/// `floor((h + 2p - k) / s) + 1`, or `None` when the window does not fit.
pub fn conv_output_extent(h: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = h + 2 * p;
    (padded >= k && s >= 1).then(|| (padded - k) / s + 1)
}

/// `(h - 1) s - 2p + k`, or `None` when non-positive.
pub fn conv_transpose_output_extent(h: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let full = (h - 1) * s + k;
    (full > 2 * p).then(|| full - 2 * p)
}

fn check_bias(name: &str, inputs: &[&Shape], channels: usize) -> Result<()> {
    match inputs.len() {
        2 => Ok(()),
        3 if inputs[2].dims() == [channels] => Ok(()),
        3 => Err(Error::shape(format!(
            "{name}: bias {} does not match {channels} output channels",
            inputs[2]
        ))),
        n => Err(Error::contract(format!("{name} takes 2 or 3 operands, got {n}"))),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % bias.len()];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum();
    }
    Tensor::new(&[channels], db).expect("shape")
}

/// Widest output for which [`conv_direct`] is used.
const DIRECT_MAX_COUT: usize = 4;

/// Column matrix elements per grouped GEMM.
const COL_BUDGET: usize = 1 << 16;

/// Cross-correlation with zero padding. Operands: `x [N,Cin,H,W]`,
/// `w [Cout,Cin,k,k]`, optional `b [Cout]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dOp {
    fn geometry(&self, x: &Shape, w: &Shape) -> Result<(usize, usize, Geometry)> {
        let (n, cin, h, wd) = x.nchw()?;
        let (cout, wcin, k, k2) = w.nchw()?;
        if k != k2 {
            return Err(Error::shape(format!("conv2d: non-square kernel {w}")));
        }
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d: input {x} has {cin} channels, weight {w} expects {wcin}"
            )));
        }
        let oh = conv_output_extent(h, k, self.stride, self.padding);
        let ow = conv_output_extent(wd, k, self.stride, self.padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(format!(
                "conv2d: kernel {k} stride {} padding {} leaves no output for {x}",
                self.stride, self.padding
            )));
        };
        let g = Geometry {
            channels: cin,
            ih: h,
            iw: wd,
            k,
            s: self.stride,
            p: self.padding,
            oh,
            ow,
        };
        Ok((n, cout, g))
    }
}

impl<T: Scalar> Operation<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        if inputs.len() < 2 {
            return Err(Error::contract("conv2d needs input and weight"));
        }
        let (n, cout, g) = self.geometry(inputs[0], inputs[1])?;
        check_bias("conv2d", inputs, cout)?;
        Shape::new(&[n, cout, g.oh, g.ow])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, cout, g) = self.geometry(x.shape(), w.shape()).expect("validated");
        let in_len = g.channels * g.ih * g.iw;
        let out_len = cout * g.cols();
        let mut out = vec![T::zero(); n * out_len];
        if (g.ih, g.iw, g.oh, g.ow) == (1, 1, 1, 1) && g.p < g.k {
            // a single pixel only ever meets the centre tap
            let centre: Vec<T> = w.data().chunks(g.k * g.k).map(|taps| taps[g.p * g.k + g.p]).collect();
            gemm(n, g.channels, cout, x.data(), Transpose::No, &centre, Transpose::Yes, T::zero(), &mut out);
        } else if g.s == 1 && !g.is_pointwise() && cout <= DIRECT_MAX_COUT {
            let mut pad = Vec::new();
            for (img, dst) in x.data().chunks(in_len).zip(out.chunks_mut(out_len)) {
                conv_direct(img, w.data(), cout, &g, dst, &mut pad);
            }
        } else if g.is_pointwise() {
            for (img, dst) in x.data().chunks(in_len).zip(out.chunks_mut(out_len)) {
                gemm(cout, g.rows(), g.cols(), w.data(), Transpose::No, img, Transpose::No, T::zero(), dst);
            }
        } else {
            // images are grouped so that one GEMM covers several of them;
            // columns of image b of a group sit at b * cols
            let cols = g.cols();
            let group = (COL_BUDGET / ((g.rows() + cout) * cols)).clamp(1, n);
            let mut col = vec![T::zero(); g.rows() * group * cols];
            let mut wide = vec![T::zero(); cout * group * cols];
            for first in (0..n).step_by(group) {
                let count = group.min(n - first);
                let ld = count * cols;
                let col = &mut col[..g.rows() * ld];
                for b in 0..count {
                    let img = &x.data()[(first + b) * in_len..(first + b + 1) * in_len];
                    im2col_strided(img, &g, col, ld, b * cols);
                }
                let wide = &mut wide[..cout * ld];
                gemm(cout, g.rows(), ld, w.data(), Transpose::No, col, Transpose::No, T::zero(), wide);
                for (o, row) in wide.chunks(ld).enumerate() {
                    for (b, src) in row.chunks(cols).enumerate() {
                        out[(first + b) * out_len + o * cols..][..cols].copy_from_slice(src);
                    }
                }
            }
        }
        if let Some(bias) = inputs.get(2) {
            add_bias(&mut out, bias.data(), g.cols());
        }
        Tensor::new(&[n, cout, g.oh, g.ow], out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, cout, g) = self.geometry(x.shape(), w.shape()).expect("validated");
        let in_len = g.channels * g.ih * g.iw;
        let out_len = cout * g.cols();
        let gd = ctx.grad.data();
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); w.numel()]);
        let mut col = vec![T::zero(); g.rows() * g.cols()];
        let mut gcol = vec![T::zero(); g.rows() * g.cols()];
        for b in 0..n {
            let gb = &gd[b * out_len..(b + 1) * out_len];
            let img = &x.data()[b * in_len..(b + 1) * in_len];
            if let Some(dw) = dw.as_mut() {
                let cm: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(img, &g, &mut col);
                    &col
                };
                gemm(cout, g.cols(), g.rows(), gb, Transpose::No, cm, Transpose::Yes, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[b * in_len..(b + 1) * in_len];
                if g.is_pointwise() {
                    gemm(g.rows(), cout, g.cols(), w.data(), Transpose::Yes, gb, Transpose::No, T::zero(), dst);
                } else {
                    gemm(g.rows(), cout, g.cols(), w.data(), Transpose::Yes, gb, Transpose::No, T::zero(), &mut gcol);
                    col2im(&gcol, &g, dst);
                }
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::from_shape(x.shape().clone(), d).expect("shape")),
            dw.map(|d| Tensor::from_shape(w.shape().clone(), d).expect("shape")),
        ];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| bias_grad(gd, cout, g.cols())));
        }
        grads
    }

    fn cost(&self, inputs: &[&Shape], output: &Shape) -> Cost {
        let w = inputs[1].dims();
        let o = output.dims();
        Cost {
            kind: CostKind::Conv,
            macs: (o[0] * o[1] * w[1] * w[2] * w[3] * o[2] * o[3]) as u64,
        }
    }
}

/// Transposed convolution, the adjoint of [`Conv2dOp`]. Operands:
/// `x [N,Cin,H,W]`, `w [Cin,Cout,k,k]`, optional `b [Cout]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2dOp {
    /// Geometry of the equivalent forward conv, read from the output side.
    fn geometry(&self, x: &Shape, w: &Shape) -> Result<(usize, usize, Geometry)> {
        let (n, cin, h, wd) = x.nchw()?;
        let (wcin, cout, k, k2) = w.nchw()?;
        if k != k2 {
            return Err(Error::shape(format!("conv_transpose2d: non-square kernel {w}")));
        }
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {x} has {cin} channels, weight {w} expects {wcin}"
            )));
        }
        let oh = conv_transpose_output_extent(h, k, self.stride, self.padding);
        let ow = conv_transpose_output_extent(wd, k, self.stride, self.padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(format!(
                "conv_transpose2d: padding {} too large for {x}",
                self.padding
            )));
        };
        let g = Geometry {
            channels: cout,
            ih: oh,
            iw: ow,
            k,
            s: self.stride,
            p: self.padding,
            oh: h,
            ow: wd,
        };
        Ok((n, cin, g))
    }
}

impl<T: Scalar> Operation<T> for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        if inputs.len() < 2 {
            return Err(Error::contract("conv_transpose2d needs input and weight"));
        }
        let (n, _, g) = self.geometry(inputs[0], inputs[1])?;
        check_bias("conv_transpose2d", inputs, g.channels)?;
        Shape::new(&[n, g.channels, g.ih, g.iw])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, cin, g) = self.geometry(x.shape(), w.shape()).expect("validated");
        let in_len = cin * g.cols();
        let out_len = g.channels * g.ih * g.iw;
        let mut out = vec![T::zero(); n * out_len];
        if g.is_pointwise() {
            for (xb, dst) in x.data().chunks(in_len).zip(out.chunks_mut(out_len)) {
                gemm(g.rows(), cin, g.cols(), w.data(), Transpose::Yes, xb, Transpose::No, T::zero(), dst);
            }
        } else {
            // grouped as in the forward convolution
            let cols = g.cols();
            let group = (COL_BUDGET / ((g.rows() + cin) * cols)).clamp(1, n);
            let mut xs = vec![T::zero(); cin * group * cols];
            let mut col = vec![T::zero(); g.rows() * group * cols];
            for first in (0..n).step_by(group) {
                let count = group.min(n - first);
                let ld = count * cols;
                let xs = &mut xs[..cin * ld];
                for b in 0..count {
                    let xb = &x.data()[(first + b) * in_len..(first + b + 1) * in_len];
                    for (r, src) in xb.chunks(cols).enumerate() {
                        xs[r * ld + b * cols..][..cols].copy_from_slice(src);
                    }
                }
                let col = &mut col[..g.rows() * ld];
                gemm(g.rows(), cin, ld, w.data(), Transpose::Yes, xs, Transpose::No, T::zero(), col);
                for b in 0..count {
                    let dst = &mut out[(first + b) * out_len..(first + b + 1) * out_len];
                    col2im_strided(col, &g, dst, ld, b * cols);
                }
            }
        }
        if let Some(bias) = inputs.get(2) {
            add_bias(&mut out, bias.data(), g.ih * g.iw);
        }
        Tensor::new(&[n, g.channels, g.ih, g.iw], out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, cin, g) = self.geometry(x.shape(), w.shape()).expect("validated");
        let in_len = cin * g.cols();
        let out_len = g.channels * g.ih * g.iw;
        let gd = ctx.grad.data();
        let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![T::zero(); w.numel()]);
        let mut gcol = vec![T::zero(); g.rows() * g.cols()];
        for b in 0..n {
            let gimg = &gd[b * out_len..(b + 1) * out_len];
            let gm: &[T] = if g.is_pointwise() {
                gimg
            } else {
                im2col(gimg, &g, &mut gcol);
                &gcol
            };
            if let Some(dx) = dx.as_mut() {
                gemm(
                    cin,
                    g.rows(),
                    g.cols(),
                    w.data(),
                    Transpose::No,
                    gm,
                    Transpose::No,
                    T::zero(),
                    &mut dx[b * in_len..(b + 1) * in_len],
                );
            }
            if let Some(dw) = dw.as_mut() {
                let xb = &x.data()[b * in_len..(b + 1) * in_len];
                gemm(cin, g.cols(), g.rows(), xb, Transpose::No, gm, Transpose::Yes, T::one(), dw);
            }
        }
        let mut grads = vec![
            dx.map(|d| Tensor::from_shape(x.shape().clone(), d).expect("shape")),
            dw.map(|d| Tensor::from_shape(w.shape().clone(), d).expect("shape")),
        ];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs[2].then(|| bias_grad(gd, g.channels, g.ih * g.iw)));
        }
        grads
    }

    fn cost(&self, inputs: &[&Shape], _output: &Shape) -> Cost {
        let x = inputs[0].dims();
        let w = inputs[1].dims();
        Cost {
            kind: CostKind::ConvTranspose,
            macs: (x[0] * w[0] * w[1] * w[2] * w[3] * x[2] * x[3]) as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, grad_close, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize) -> Tensor<f64> {
        let op = Conv2dOp { stride: s, padding: p };
        let mut ins = vec![x, w];
        ins.extend(b);
        <Conv2dOp as Operation<f64>>::forward(&op, &ins)
    }

    /// Direct seven-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.shape().nchw().unwrap();
        let (cout, _, k, _) = w.shape().nchw().unwrap();
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]).unwrap();
        for b in 0..n {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * s + ky) as isize - p as isize;
                                    let ix = (xx * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at(&[b, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, y, xx], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_scalar_example() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        assert_eq!(conv(&x, &w, None, 1, 0).data(), &[6.0]);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0).unwrap();
        assert_eq!(conv(&x, &w, None, 1, 0).data(), &[10.0]);
    }

    #[test]
    fn matches_direct_loops() {
        // narrow and wide outputs take different kernels
        for cout in [DIRECT_MAX_COUT, DIRECT_MAX_COUT + 2] {
            for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0), (3, 1, 0), (5, 1, 2)] {
                for dims in [[2, 3, 7, 6], [3, 3, 1, 1]] {
                    if conv_output_extent(dims[2], k, s, p).is_none() {
                        continue;
                    }
                    let x = random(&dims, 1);
                    let w = random(&[cout, 3, k, k], 2);
                    let got = conv(&x, &w, None, s, p);
                    let want = naive_conv(&x, &w, s, p);
                    assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "cout={cout} k={k} s={s} p={p} {dims:?}");
                }
            }
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = random(&[1, 1, 5, 5], 3);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(conv(&x, &w, None, 1, 0), x);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let op = Conv2dOp { stride: 1, padding: 1 };
        let x = Shape::new(&[1, 3, 4, 4]).unwrap();
        let w = Shape::new(&[2, 4, 3, 3]).unwrap();
        assert!(<Conv2dOp as Operation<f32>>::output_shape(&op, &[&x, &w]).is_err());
        let w = Shape::new(&[2, 3, 5, 5]).unwrap();
        let op = Conv2dOp { stride: 1, padding: 0 };
        assert!(<Conv2dOp as Operation<f32>>::output_shape(&op, &[&x, &w]).is_err());
    }

    #[test]
    fn transpose_block_expansion() {
        let op = ConvTranspose2dOp { stride: 2, padding: 0 };
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0).unwrap();
        let y = <ConvTranspose2dOp as Operation<f64>>::forward(&op, &[&x, &w]);
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.0; 4]);
    }

    #[test]
    fn transpose_of_zero_is_bias() {
        let op = ConvTranspose2dOp { stride: 2, padding: 0 };
        let x = Tensor::zeros(&[1, 2, 2, 2]).unwrap();
        let w = random(&[2, 3, 2, 2], 4);
        let b = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = <ConvTranspose2dOp as Operation<f64>>::forward(&op, &[&x, &w, &b]);
        for c in 0..3 {
            for i in 0..16 {
                assert_eq!(y.data()[c * 16 + i], b.data()[c]);
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        for &(k, s, p, h) in &[(3, 1, 1, 8), (2, 2, 0, 8), (3, 2, 1, 7), (4, 4, 0, 8), (1, 1, 0, 8)] {
            let x = random(&[2, 3, h, h], 10);
            let w = random(&[5, 3, k, k], 11);
            let y_shape = conv(&x, &w, None, s, p);
            let y = random(y_shape.dims(), 12);
            let op = ConvTranspose2dOp { stride: s, padding: p };
            let xt = <ConvTranspose2dOp as Operation<f64>>::forward(&op, &[&y, &w]);
            assert_eq!(xt.shape(), x.shape());
            let lhs: f64 = y_shape.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "k={k} s={s} p={p}: {lhs} vs {rhs}");
        }
    }

    fn check_grads(op_is_transpose: bool, k: usize, s: usize, p: usize, x_dims: &[usize], w_dims: &[usize]) {
        let x0 = random(x_dims, 20);
        let w0 = random(w_dims, 21);
        let cout = if op_is_transpose { w_dims[1] } else { w_dims[0] };
        let b0 = random(&[cout], 22);
        let probe_shape = {
            let mut tape = Tape::<f64>::inference();
            let x = tape.input(x0.clone());
            let w = tape.input(w0.clone());
            let y = if op_is_transpose {
                tape.apply(ConvTranspose2dOp { stride: s, padding: p }, &[&x, &w]).unwrap()
            } else {
                tape.apply(Conv2dOp { stride: s, padding: p }, &[&x, &w]).unwrap()
            };
            y.dims().to_vec()
        };
        let r = random(&probe_shape, 23);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let mut tape = Tape::<f64>::inference();
            let (x, w, b) = (tape.input(x.clone()), tape.input(w.clone()), tape.input(b.clone()));
            let y = if op_is_transpose {
                tape.apply(ConvTranspose2dOp { stride: s, padding: p }, &[&x, &w, &b]).unwrap()
            } else {
                tape.apply(Conv2dOp { stride: s, padding: p }, &[&x, &w, &b]).unwrap()
            };
            y.tensor().unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::<f64>::record();
        let x = tape.input_with_grad(x0.clone());
        let w = tape.input_with_grad(w0.clone());
        let b = tape.input_with_grad(b0.clone());
        let rv = tape.input(r.clone());
        let y = if op_is_transpose {
            tape.apply(ConvTranspose2dOp { stride: s, padding: p }, &[&x, &w, &b]).unwrap()
        } else {
            tape.apply(Conv2dOp { stride: s, padding: p }, &[&x, &w, &b]).unwrap()
        };
        let prod = tape.mul(&y, &rv).unwrap();
        let root = tape.sum(&prod).unwrap();
        let g = tape.backward(&root).unwrap();
        let fx = finite_diff(|t| loss(t, &w0, &b0), &x0, 1e-6);
        let fw = finite_diff(|t| loss(&x0, t, &b0), &w0, 1e-6);
        let fb = finite_diff(|t| loss(&x0, &w0, t), &b0, 1e-6);
        for (name, var, fd) in [("x", &x, fx), ("w", &w, fw), ("b", &b, fb)] {
            for (a, n) in g.wrt(var).unwrap().data().iter().zip(fd.data()) {
                assert!(grad_close(*a, *n, 1e-4, 1e-8), "{name}: {a} vs {n} (k={k} s={s} p={p})");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_grads(false, 3, 1, 1, &[2, 2, 5, 5], &[3, 2, 3, 3]);
        check_grads(false, 3, 2, 1, &[1, 2, 6, 6], &[2, 2, 3, 3]);
        check_grads(false, 1, 1, 0, &[1, 3, 3, 3], &[2, 3, 1, 1]);
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        check_grads(true, 2, 2, 0, &[1, 3, 3, 3], &[3, 2, 2, 2]);
        check_grads(true, 3, 1, 1, &[2, 2, 4, 4], &[2, 3, 3, 3]);
        check_grads(true, 1, 1, 0, &[1, 2, 3, 3], &[2, 2, 1, 1]);
    }

    #[test]
    fn mac_counts_follow_closed_forms() {
        let mut tape = Tape::<f32>::meta();
        let x = tape.placeholder(&[1, 48, 256, 256]).unwrap();
        let w = tape.placeholder(&[48, 48, 3, 3]).unwrap();
        tape.apply(Conv2dOp { stride: 1, padding: 1 }, &[&x, &w]).unwrap();
        assert_eq!(tape.total_macs(), 1_358_954_496);

        let mut tape = Tape::<f32>::meta();
        let x = tape.placeholder(&[2, 8, 4, 4]).unwrap();
        let w = tape.placeholder(&[8, 6, 2, 2]).unwrap();
        let y = tape.apply(ConvTranspose2dOp { stride: 2, padding: 0 }, &[&x, &w]).unwrap();
        assert_eq!(y.dims(), &[2, 6, 8, 8]);
        assert_eq!(tape.costs_under("").conv_transpose, 2 * 8 * 6 * 4 * 16);
    }
}
