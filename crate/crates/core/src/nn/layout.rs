//! Resampling and rearrangement ops: pooling, nearest upsampling, pixel
//! (un)shuffle and cropping. None of them perform multiply-accumulates.

use crate::autodiff::{BackwardCtx, Operation, Stackable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

fn single(name: &str, inputs: &[&Shape]) -> Result<(usize, usize, usize, usize)> {
    if inputs.len() != 1 {
        return Err(Error::contract(format!("{name} takes one operand")));
    }
    inputs[0].nchw()
}

fn divisible(name: &str, shape: &Shape, h: usize, w: usize, r: usize) -> Result<()> {
    if r == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
        return Err(Error::shape(format!(
            "{name}: extents of {shape} are not divisible by {r}"
        )));
    }
    Ok(())
}

pub fn avg_pool_tensor<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, h, w) = x.shape().nchw().expect("nchw");
    let (oh, ow) = (h / r, w / r);
    let inv = T::one() / T::lit((r * r) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / r) * ow..(y / r + 1) * ow];
            for (d, chunk) in drow.iter_mut().zip(row.chunks_exact(r)) {
                for &v in chunk {
                    *d += v;
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[n, c, oh, ow], out).expect("shape")
}

pub fn upsample_tensor<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, h, w) = x.shape().nchw().expect("nchw");
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let srow = &src[(y / r) * w..(y / r + 1) * w];
            for (chunk, &v) in dst[y * ow..(y + 1) * ow].chunks_exact_mut(r).zip(srow) {
                chunk.fill(v);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).expect("shape")
}

/// Mean over non-overlapping `r x r` windows.
#[derive(Debug, Clone, Copy)]
pub struct AvgPool2d(pub usize);

impl<T: Scalar> Operation<T> for AvgPool2d {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        let (n, c, h, w) = single("avg_pool2d", inputs)?;
        divisible("avg_pool2d", inputs[0], h, w, self.0)?;
        Shape::new(&[n, c, h / self.0, w / self.0])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        avg_pool_tensor(inputs[0], self.0)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let inv = T::one() / T::lit((self.0 * self.0) as f64);
        vec![Some(upsample_tensor(ctx.grad, self.0).map(|v| v * inv))]
    }
}

/// Nearest-neighbour upsampling by an integer factor.
#[derive(Debug, Clone, Copy)]
pub struct UpsampleNearest(pub usize);

impl<T: Scalar> Operation<T> for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        let (n, c, h, w) = single("upsample_nearest", inputs)?;
        if self.0 == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        Shape::new(&[n, c, h * self.0, w * self.0])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        upsample_tensor(inputs[0], self.0)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let r2 = T::lit((self.0 * self.0) as f64);
        vec![Some(avg_pool_tensor(ctx.grad, self.0).map(|v| v * r2))]
    }
}

/// `[N,C,H,W] -> [N,C r^2,H/r,W/r]`, output channel `c r^2 + dy r + dx`.
pub fn pixel_unshuffle_tensor<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, h, w) = x.shape().nchw().expect("nchw");
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let oc = ch * r * r + dy * r + dx;
                    let dst = &mut out[((b * c * r * r) + oc) * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        let srow = &src[((b * c + ch) * h + y * r + dy) * w..][..w];
                        for xx in 0..ow {
                            dst[y * ow + xx] = srow[xx * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c * r * r, oh, ow], out).expect("shape")
}

/// Inverse of [`pixel_unshuffle_tensor`].
pub fn pixel_shuffle_tensor<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, cr, h, w) = x.shape().nchw().expect("nchw");
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = ch * r * r + dy * r + dx;
                    let s = &src[(b * cr + ic) * h * w..][..h * w];
                    for y in 0..h {
                        let drow = &mut out[((b * c + ch) * oh + y * r + dy) * ow..][..ow];
                        for xx in 0..w {
                            drow[xx * r + dx] = s[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).expect("shape")
}

#[derive(Debug, Clone, Copy)]
pub struct PixelUnshuffle(pub usize);

impl<T: Scalar> Operation<T> for PixelUnshuffle {
    fn name(&self) -> &'static str {
        "pixel_unshuffle"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        let (n, c, h, w) = single("pixel_unshuffle", inputs)?;
        divisible("pixel_unshuffle", inputs[0], h, w, self.0)?;
        Shape::new(&[n, c * self.0 * self.0, h / self.0, w / self.0])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        pixel_unshuffle_tensor(inputs[0], self.0)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(pixel_shuffle_tensor(ctx.grad, self.0))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PixelShuffle(pub usize);

impl<T: Scalar> Operation<T> for PixelShuffle {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        let (n, c, h, w) = single("pixel_shuffle", inputs)?;
        let r2 = self.0 * self.0;
        if r2 == 0 || c % r2 != 0 {
            return Err(Error::shape(format!(
                "pixel_shuffle: {} channels not divisible by {r2}",
                c
            )));
        }
        Shape::new(&[n, c / r2, h * self.0, w * self.0])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        pixel_shuffle_tensor(inputs[0], self.0)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(pixel_unshuffle_tensor(ctx.grad, self.0))]
    }
}

/// Top-left `h x w` window of every plane.
#[derive(Debug, Clone, Copy)]
pub struct Crop {
    pub height: usize,
    pub width: usize,
}

pub fn crop_tensor<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    let (n, c, h, w) = x.shape().nchw().expect("nchw");
    let mut out = Vec::with_capacity(n * c * height * width);
    for p in 0..n * c {
        for y in 0..height {
            out.extend_from_slice(&x.data()[(p * h + y) * w..][..width]);
        }
    }
    Tensor::new(&[n, c, height, width], out).expect("shape")
}

impl<T: Scalar> Operation<T> for Crop {
    fn name(&self) -> &'static str {
        "crop"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        let (n, c, h, w) = single("crop", inputs)?;
        if self.height > h || self.width > w {
            return Err(Error::shape(format!(
                "crop {}x{} exceeds {}",
                self.height, self.width, inputs[0]
            )));
        }
        Shape::new(&[n, c, self.height, self.width])
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        crop_tensor(inputs[0], self.height, self.width)
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let (n, c, h, w) = x.shape().nchw().expect("nchw");
        let mut dx = Tensor::zeros_like(x);
        for p in 0..n * c {
            for y in 0..self.height {
                let src = &ctx.grad.data()[(p * self.height + y) * self.width..][..self.width];
                dx.data_mut()[(p * h + y) * w..][..self.width].copy_from_slice(src);
            }
        }
        vec![Some(dx)]
    }
}

/// Reflect-pads every plane at the bottom and right (no edge repeat).
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.shape().nchw()?;
    if height < h || width < w {
        return Err(Error::shape(format!("cannot pad {} down to {height}x{width}", x.shape())));
    }
    if (height > h && h < 2) || (width > w && w < 2) {
        return Err(Error::shape(format!("{} is too small to reflect", x.shape())));
    }
    let reflect = |i: usize, len: usize| -> usize {
        // period 2(len-1): 0 1 .. len-1 len-2 .. 1 0 1 ..
        let period = 2 * (len - 1);
        let m = i % period.max(1);
        if m < len {
            m
        } else {
            period - m
        }
    };
    let mut out = Vec::with_capacity(n * c * height * width);
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..height {
            let sy = if h == 1 { 0 } else { reflect(y, h) };
            for xx in 0..width {
                let sx = if w == 1 { 0 } else { reflect(xx, w) };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(&[n, c, height, width], out)
}
