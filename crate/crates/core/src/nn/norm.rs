use crate::autodiff::{BackwardCtx, Operation, Stackable};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Normalizes across channels at every spatial position, then applies a
/// per-channel gain and offset. Operands: `x [N,C,H,W]`, `gain [C]`,
/// `offset [C]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormOp {
    pub eps: f64,
}

/// Per-position statistics: `(xhat, inv_std)` with `xhat` laid out like `x`.
fn normalize<T: Scalar>(x: &Tensor<T>, eps: f64) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.shape().nchw().expect("nchw");
    let plane = h * w;
    let cf = T::lit(c as f64);
    let eps = T::lit(eps);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); n * plane];
    let d = x.data();
    // accumulate plane by plane so the inner loops run over contiguous pixels
    let mut mean = vec![T::zero(); plane];
    let mut var = vec![T::zero(); plane];
    for b in 0..n {
        let img = &d[b * c * plane..(b + 1) * c * plane];
        mean.fill(T::zero());
        var.fill(T::zero());
        for src in img.chunks(plane) {
            mean.iter_mut().zip(src).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= cf);
        for src in img.chunks(plane) {
            var.iter_mut().zip(src).zip(&mean).for_each(|((acc, &v), &m)| {
                let e = v - m;
                *acc += e * e;
            });
        }
        let is = &mut inv_std[b * plane..(b + 1) * plane];
        is.iter_mut().zip(&var).for_each(|(s, &v)| *s = T::one() / (v / cf + eps).sqrt());
        let out = &mut xhat[b * c * plane..(b + 1) * c * plane];
        for (dst, src) in out.chunks_mut(plane).zip(img.chunks(plane)) {
            for p in 0..plane {
                dst[p] = (src[p] - mean[p]) * is[p];
            }
        }
    }
    (xhat, inv_std)
}

impl<T: Scalar> Operation<T> for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn stackable(&self, _inputs: &[&Shape]) -> Stackable {
        Stackable::First
    }

    fn output_shape(&self, inputs: &[&Shape]) -> Result<Shape> {
        if inputs.len() != 3 {
            return Err(Error::contract("layer_norm takes x, gain, offset"));
        }
        let (_, c, _, _) = inputs[0].nchw()?;
        for s in &inputs[1..] {
            if s.dims() != [c] {
                return Err(Error::shape(format!(
                    "layer_norm: affine parameter {s} does not match {c} channels"
                )));
            }
        }
        Ok(inputs[0].clone())
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T> {
        let x = inputs[0];
        let (_, c, h, w) = x.shape().nchw().expect("nchw");
        let plane = h * w;
        let (mut out, _) = normalize(x, self.eps);
        let (gain, offset) = (inputs[1].data(), inputs[2].data());
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let (g, o) = (gain[i % c], offset[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * g + o);
        }
        Tensor::from_shape(x.shape().clone(), out).expect("shape")
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = ctx.inputs[0];
        let gain = ctx.inputs[1].data();
        let (n, c, h, w) = x.shape().nchw().expect("nchw");
        let plane = h * w;
        let (xhat, inv_std) = normalize(x, self.eps);
        let g = ctx.grad.data();
        let dgain = ctx.needs[1].then(|| {
            let mut dg = vec![T::zero(); c];
            for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                dg[i % c] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum();
            }
            Tensor::new(&[c], dg).expect("shape")
        });
        let doffset = ctx.needs[2].then(|| {
            let mut db = vec![T::zero(); c];
            for (i, gc) in g.chunks(plane).enumerate() {
                db[i % c] += gc.iter().copied().sum();
            }
            Tensor::new(&[c], db).expect("shape")
        });
        let dx = ctx.needs[0].then(|| {
            let cf = T::lit(c as f64);
            let mut dx = vec![T::zero(); x.numel()];
            for b in 0..n {
                let base = b * c * plane;
                for p in 0..plane {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        let d = g[i] * gain[ch];
                        mean_d += d;
                        mean_dx += d * xhat[i];
                    }
                    mean_d /= cf;
                    mean_dx /= cf;
                    let is = inv_std[b * plane + p];
                    for ch in 0..c {
                        let i = base + ch * plane + p;
                        let d = g[i] * gain[ch];
                        dx[i] = is * (d - mean_d - xhat[i] * mean_dx);
                    }
                }
            }
            Tensor::from_shape(x.shape().clone(), dx).expect("shape")
        });
        vec![dx, dgain, doffset]
    }
}
