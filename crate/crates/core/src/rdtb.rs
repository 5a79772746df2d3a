//! Residual dense transformer layers and blocks.
//!
//! An RDTB keeps a dense state that starts as the block input `x` (width C)
//! and grows by G channels per layer. Each RDTL narrows the current state to
//! C with a 1x1 entry conv, runs a stack of CETLs, applies a ReLU and projects
//! to G new channels. A bias-free 1x1 fusion conv maps the final `C + 3G`
//! state back to C, and the block input is added on top.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::cesa::{Cetl, CetlConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvSpec};
use crate::tensor::Scalar;

pub const NUM_RDTL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct RdtbConfig {
    pub growth: usize,
    pub cetls_per_rdtl: usize,
    /// Template for every CETL; its `channels` is the block width C.
    pub cetl: CetlConfig,
    pub use_dense: bool,
    pub use_local_fusion: bool,
    pub use_local_skip: bool,
}

impl RdtbConfig {
    pub fn new(channels: usize, growth: usize, sample_stride: usize) -> Self {
        RdtbConfig {
            growth,
            cetls_per_rdtl: 2,
            cetl: CetlConfig::new(channels, sample_stride),
            use_dense: true,
            use_local_fusion: true,
            use_local_skip: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.cetl.channels
    }

    /// Width of the dense state after `k` layers: `C + kG`.
    pub fn dense_width(&self, k: usize) -> usize {
        self.channels() + k * self.growth
    }

    /// Input width seen by layer `k`.
    fn rdtl_input_width(&self, k: usize) -> usize {
        if self.use_dense {
            self.dense_width(k)
        } else if k == 0 {
            self.channels()
        } else {
            self.growth
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rdtl {
    path: String,
    in_width: usize,
    entry: Conv2d,
    cetls: Vec<Cetl>,
    out: Conv2d,
}

impl Rdtl {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        path: &str,
        in_width: usize,
        config: &RdtbConfig,
    ) -> Result<Self> {
        let c = config.channels();
        let entry = Conv2d::new(b, &format!("{path}.entry"), ConvSpec::pointwise(in_width, c))?;
        let cetls = (0..config.cetls_per_rdtl)
            .map(|j| Cetl::new(b, &format!("{path}.cetl{j}"), config.cetl.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::new(b, &format!("{path}.out"), ConvSpec::pointwise(c, config.growth))?;
        Ok(Rdtl {
            path: path.to_string(),
            in_width,
            entry,
            cetls,
            out,
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn out_conv(&self) -> &Conv2d {
        &self.out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let (_, c, _, _) = x.shape().nchw()?;
        if c != self.in_width {
            return Err(Error::shape(format!(
                "{}: expected a {}-channel dense state, got {}",
                self.path, self.in_width, c
            )));
        }
        let mut h = self.entry.forward(tape, store, x)?;
        for cetl in &self.cetls {
            h = cetl.forward(tape, store, &h)?;
        }
        let h = tape.relu(&h)?;
        self.out.forward(tape, store, &h)
    }
}

#[derive(Clone, Debug)]
pub struct Rdtb {
    path: String,
    config: RdtbConfig,
    layers: Vec<Rdtl>,
    fusion: Conv2d,
}

impl Rdtb {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, config: RdtbConfig) -> Result<Self> {
        if config.growth == 0 || config.cetls_per_rdtl == 0 {
            return Err(Error::config(format!("{path}: growth and CETL count must be positive")));
        }
        config.cetl.validate()?;
        let layers = (0..NUM_RDTL)
            .map(|k| Rdtl::new(b, &format!("{path}.rdtl{k}"), config.rdtl_input_width(k), &config))
            .collect::<Result<Vec<_>>>()?;
        let c = config.channels();
        let fusion_in = if config.use_local_fusion {
            config.dense_width(NUM_RDTL)
        } else {
            config.growth
        };
        let fusion = Conv2d::new(b, &format!("{path}.fusion"), ConvSpec::pointwise(fusion_in, c).without_bias())?;
        Ok(Rdtb {
            path: path.to_string(),
            config,
            layers,
            fusion,
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn config(&self) -> &RdtbConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Rdtl] {
        &self.layers
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        self.forward_traced(tape, store, x).map(|(y, _)| y)
    }

    /// Forward pass that also reports the dense-state width after every
    /// layer (starting with the input width).
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: &Var<T>,
    ) -> Result<(Var<T>, Vec<usize>)> {
        let (_, c, _, _) = x.shape().nchw()?;
        if c != self.config.channels() {
            return Err(Error::shape(format!(
                "{}: expected {} channels, got {}",
                self.path,
                self.config.channels(),
                c
            )));
        }
        let mut features = vec![x.clone()];
        let mut state = x.clone();
        let mut widths = vec![c];
        for layer in &self.layers {
            let input = if self.config.use_dense {
                state.clone()
            } else {
                features.last().expect("non-empty").clone()
            };
            let o = layer.forward(tape, store, &input)?;
            features.push(o);
            let refs: Vec<&Var<T>> = features.iter().collect();
            state = tape.concat_channels(&refs)?;
            widths.push(state.dims()[1]);
        }
        let fused = if self.config.use_local_fusion {
            self.fusion.forward(tape, store, &state)?
        } else {
            self.fusion.forward(tape, store, features.last().expect("non-empty"))?
        };
        let y = if self.config.use_local_skip {
            tape.add(x, &fused)?
        } else {
            fused
        };
        Ok((y, widths))
    }
}
