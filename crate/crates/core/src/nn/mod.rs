//! Neural-network primitives and the parameterized modules built on them.
//!
//! Modules hold only [`ParamId`]s and hyperparameters; the values live in a
//! [`ParamStore`], so one module description serves `f32` training and `f64`
//! gradient checks alike. Every module books its MACs under its own path.

mod conv;
mod layout;
mod norm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use conv::{conv_output_extent, conv_transpose_output_extent, Conv2dOp, ConvTranspose2dOp};
pub use layout::{
    avg_pool_tensor, crop_tensor, pixel_shuffle_tensor, pixel_unshuffle_tensor, reflect_pad, AvgPool2d, Crop,
    upsample_tensor, PixelShuffle, PixelUnshuffle, UpsampleNearest,
};
pub use norm::LayerNormOp;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hyperparameters of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Shape-preserving `k x k` conv with zero padding `k / 2` and bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1)
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn output_extent(&self, h: usize) -> Option<usize> {
        conv_output_extent(h, self.kernel, self.stride, self.padding)
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }
}

/// Registers parameters with seeded initial values.
///
/// Values are drawn in `f64` and then rounded, so `f32` and `f64` models
/// built from the same seed agree up to rounding.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `[-bound, bound)`.
    pub fn uniform(&mut self, path: &str, dims: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(dims, |_| T::lit(rng.gen_range(-bound..bound)))?;
        self.store.insert(path, t)
    }

    pub fn constant(&mut self, path: &str, dims: &[usize], value: f64) -> Result<ParamId> {
        self.store.insert(path, Tensor::full(dims, T::lit(value))?)
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    path: String,
    spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, spec: ConvSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 {
            return Err(Error::config(format!("{path}: degenerate conv spec {spec:?}")));
        }
        let bound = fan_in_bound(spec.in_channels * spec.kernel * spec.kernel);
        let weight = b.uniform(&format!("{path}.weight"), &spec.weight_dims(), bound)?;
        let bias = spec
            .bias
            .then(|| b.constant(&format!("{path}.bias"), &[spec.out_channels], 0.0))
            .transpose()?;
        Ok(Conv2d {
            path: path.to_string(),
            spec,
            weight,
            bias,
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.within(&self.path, |tape| {
            let w = tape.param(store, self.weight);
            let op = Conv2dOp {
                stride: self.spec.stride,
                padding: self.spec.padding,
            };
            match self.bias {
                Some(b) => {
                    let b = tape.param(store, b);
                    tape.apply(op, &[x, &w, &b])
                }
                None => tape.apply(op, &[x, &w]),
            }
        })
    }
}

/// Transposed conv with weight `[Cin, Cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    path: String,
    stride: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ConvTranspose2d {
    /// Kernel equal to stride and no padding: every input pixel paints its
    /// own `stride x stride` output block.
    pub fn blockwise<T: Scalar>(
        b: &mut Builder<'_, T>,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config(format!("{path}: stride must be positive")));
        }
        let weight = b.uniform(
            &format!("{path}.weight"),
            &[in_channels, out_channels, stride, stride],
            fan_in_bound(in_channels),
        )?;
        let bias = bias
            .then(|| b.constant(&format!("{path}.bias"), &[out_channels], 0.0))
            .transpose()?;
        Ok(ConvTranspose2d {
            path: path.to_string(),
            stride,
            weight,
            bias,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.within(&self.path, |tape| {
            let w = tape.param(store, self.weight);
            let op = ConvTranspose2dOp {
                stride: self.stride,
                padding: 0,
            };
            match self.bias {
                Some(b) => {
                    let b = tape.param(store, b);
                    tape.apply(op, &[x, &w, &b])
                }
                None => tape.apply(op, &[x, &w]),
            }
        })
    }
}

/// Channel-wise layer norm with learnable gain (init 1) and offset (init 0).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    offset: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: b.constant(&format!("{path}.gain"), &[channels], 1.0)?,
            offset: b.constant(&format!("{path}.offset"), &[channels], 0.0)?,
        })
    }

    pub fn gain(&self) -> ParamId {
        self.gain
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let g = tape.param(store, self.gain);
        let o = tape.param(store, self.offset);
        tape.apply(LayerNormOp { eps: LAYER_NORM_EPS }, &[x, &g, &o])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn avg_pool2d(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        self.apply(AvgPool2d(r), &[x])
    }

    pub fn upsample_nearest(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        self.apply(UpsampleNearest(r), &[x])
    }

    pub fn pixel_unshuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        self.apply(PixelUnshuffle(r), &[x])
    }

    pub fn pixel_shuffle(&mut self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        self.apply(PixelShuffle(r), &[x])
    }

    pub fn crop(&mut self, x: &Var<T>, height: usize, width: usize) -> Result<Var<T>> {
        if x.dims()[2..] == [height, width] {
            return Ok(x.clone());
        }
        self.apply(Crop { height, width }, &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn builder_is_seeded() {
        let mut s1 = ParamStore::<f64>::new();
        let mut s2 = ParamStore::<f64>::new();
        Conv2d::new(&mut Builder::new(&mut s1, 5), "c", ConvSpec::same(3, 4, 3)).unwrap();
        Conv2d::new(&mut Builder::new(&mut s2, 5), "c", ConvSpec::same(3, 4, 3)).unwrap();
        assert_eq!(s1.by_path("c.weight").unwrap().value(), s2.by_path("c.weight").unwrap().value());
        let bound = (1.0f64 / 27.0).sqrt();
        assert!(s1.by_path("c.weight").unwrap().value().data().iter().all(|v| v.abs() <= bound));
        assert!(s1.by_path("c.bias").unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_no_bias_param_count() {
        assert_eq!(ConvSpec::pointwise(48, 16).without_bias().param_count(), 48 * 16);
    }

    #[test]
    fn conv_module_books_macs_under_its_path() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut Builder::new(&mut store, 0), "a.b", ConvSpec::same(2, 3, 3)).unwrap();
        let mut tape = Tape::meta();
        let x = tape.placeholder(&[1, 2, 4, 4]).unwrap();
        conv.forward(&mut tape, &store, &x).unwrap();
        assert_eq!(tape.costs_under("a").conv, 3 * 2 * 9 * 16);
        assert_eq!(tape.costs_under("a.c").total(), 0);
    }

    proptest! {
        #[test]
        fn shuffle_round_trip(c in 1usize..4, h in 1usize..5, w in 1usize..5, r in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::from_fn(&[2, c, h * r, w * r], |_| rng.gen()).unwrap();
            let u = pixel_unshuffle_tensor(&x, r);
            prop_assert_eq!(u.dims(), &[2, c * r * r, h, w]);
            prop_assert_eq!(&pixel_shuffle_tensor(&u, r), &x);
            let v = Tensor::<f64>::from_fn(&[1, c * r * r, h, w], |_| rng.gen()).unwrap();
            prop_assert_eq!(&pixel_unshuffle_tensor(&pixel_shuffle_tensor(&v, r), r), &v);
        }

        #[test]
        fn pool_then_upsample_keeps_constants(c in 1usize..3, h in 1usize..4, r in 1usize..4, v in -2.0f64..2.0) {
            let mut tape = Tape::<f64>::inference();
            let x = tape.input(Tensor::full(&[1, c, h * r, h * r], v).unwrap());
            let p = tape.avg_pool2d(&x, r).unwrap();
            let u = tape.upsample_nearest(&p, r).unwrap();
            let diff = u.tensor().unwrap().max_abs_diff(x.tensor().unwrap()).unwrap();
            prop_assert!(diff < 1e-14);
        }
    }
}
