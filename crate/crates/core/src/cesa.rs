//! Compact-enhanced transformer layer (CETL).
//!
//! ```text
//! u   = z + LE(attention(sample_r(norm1(z))))
//! out = u + ffn(norm2(u))
//! ```
//!
//! `sample_r` is `r x r` average pooling. The attention splits channels
//! into two halves; each half computes a `(C/2) x (C/2)` channel-affinity
//! map from its own queries and keys but applies it to the *other* half's
//! values. `LE` is a block transposed conv (kernel = stride = r) followed by
//! a 1x1 conv, which restores the pre-sampling extents.

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ConvSpec, ConvTranspose2d, LayerNorm};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct CetlConfig {
    pub channels: usize,
    pub sample_stride: usize,
    pub heads_per_half: usize,
    pub ffn_expansion: usize,
    pub use_feature_sampling: bool,
    pub use_channel_split: bool,
    pub use_local_enhancement: bool,
    pub use_norm: bool,
}

impl CetlConfig {
    pub fn new(channels: usize, sample_stride: usize) -> Self {
        CetlConfig {
            channels,
            sample_stride,
            heads_per_half: 1,
            ffn_expansion: 2,
            use_feature_sampling: true,
            use_channel_split: true,
            use_local_enhancement: true,
            use_norm: true,
        }
    }

    /// Sampling stride actually applied (1 when sampling is disabled).
    pub fn effective_stride(&self) -> usize {
        if self.use_feature_sampling {
            self.sample_stride
        } else {
            1
        }
    }

    /// Channels handled by each attention branch.
    pub fn branch_channels(&self) -> usize {
        if self.use_channel_split {
            self.channels / 2
        } else {
            self.channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.sample_stride == 0 || self.ffn_expansion == 0 || self.heads_per_half == 0 {
            return Err(Error::config(format!("degenerate CETL config {self:?}")));
        }
        if self.use_channel_split && !self.channels.is_multiple_of(2) {
            return Err(Error::config(format!(
                "channel split needs an even width, got {}",
                self.channels
            )));
        }
        if !self.branch_channels().is_multiple_of(self.heads_per_half) {
            return Err(Error::config(format!(
                "{} branch channels do not divide into {} heads",
                self.branch_channels(),
                self.heads_per_half
            )));
        }
        Ok(())
    }
}

/// q, k, v projections of one attention branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
}

/// Output of [`Cetl::compact_attention`].
pub struct Attention<T> {
    pub out: Var<T>,
    /// One softmax map per branch, shaped `[N * heads, d, d]`.
    pub maps: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct Cetl {
    path: String,
    config: CetlConfig,
    norm1: Option<LayerNorm>,
    norm2: Option<LayerNorm>,
    branches: Vec<Branch>,
    le: Option<(ConvTranspose2d, Conv2d)>,
    ffn: (Conv2d, Conv2d),
}

impl Cetl {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, config: CetlConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let norm1 = config
            .use_norm
            .then(|| LayerNorm::new(b, &format!("{path}.norm1"), c))
            .transpose()?;
        let bc = config.branch_channels();
        let n_branches = if config.use_channel_split { 2 } else { 1 };
        let mut branches = Vec::with_capacity(n_branches);
        for i in 0..n_branches {
            let p = format!("{path}.attn.half{i}");
            branches.push(Branch {
                q: Conv2d::new(b, &format!("{p}.q"), ConvSpec::pointwise(bc, bc))?,
                k: Conv2d::new(b, &format!("{p}.k"), ConvSpec::pointwise(bc, bc))?,
                v: Conv2d::new(b, &format!("{p}.v"), ConvSpec::pointwise(bc, bc))?,
            });
        }
        let le = if config.use_local_enhancement {
            let r = config.effective_stride();
            Some((
                ConvTranspose2d::blockwise(b, &format!("{path}.le.deconv"), c, c, r, true)?,
                Conv2d::new(b, &format!("{path}.le.proj"), ConvSpec::pointwise(c, c))?,
            ))
        } else {
            None
        };
        let norm2 = config
            .use_norm
            .then(|| LayerNorm::new(b, &format!("{path}.norm2"), c))
            .transpose()?;
        let hidden = c * config.ffn_expansion;
        let ffn = (
            Conv2d::new(b, &format!("{path}.ffn.expand"), ConvSpec::pointwise(c, hidden))?,
            Conv2d::new(b, &format!("{path}.ffn.reduce"), ConvSpec::pointwise(hidden, c))?,
        );
        Ok(Cetl {
            path: path.to_string(),
            config,
            norm1,
            norm2,
            branches,
            le,
            ffn,
        })
    }

    pub fn config(&self) -> &CetlConfig {
        &self.config
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// `Avg_r(z)`; identity when the effective stride is 1.
    pub fn feature_sample<T: Scalar>(&self, tape: &mut Tape<T>, z: &Var<T>) -> Result<Var<T>> {
        match self.config.effective_stride() {
            1 => Ok(z.clone()),
            r => tape.within(&format!("{}.sample", self.path), |t| t.avg_pool2d(z, r)),
        }
    }

    pub fn compact_attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z: &Var<T>,
    ) -> Result<Attention<T>> {
        let (n, c, h, w) = z.shape().nchw()?;
        if c != self.config.channels {
            return Err(Error::shape(format!(
                "{}: expected {} channels, got {}",
                self.path, self.config.channels, c
            )));
        }
        let bc = self.config.branch_channels();
        let heads = self.config.heads_per_half;
        let d = bc / heads;
        let hw = h * w;
        let inputs = if self.branches.len() == 2 {
            tape.split_channels(z, &[bc, bc])?
        } else {
            vec![z.clone()]
        };
        let mut qkv = Vec::with_capacity(self.branches.len());
        for (br, zi) in self.branches.iter().zip(&inputs) {
            let as_rows = |tape: &mut Tape<T>, v: Var<T>| tape.reshape(&v, &[n * heads, d, hw]);
            let q = br.q.forward(tape, store, zi)?;
            let k = br.k.forward(tape, store, zi)?;
            let v = br.v.forward(tape, store, zi)?;
            qkv.push((as_rows(tape, q)?, as_rows(tape, k)?, as_rows(tape, v)?));
        }
        let scale = T::lit(1.0 / (hw as f64).sqrt());
        let attn_scope = format!("{}.attn", self.path);
        tape.within(&attn_scope, |tape| {
            let mut outs = Vec::with_capacity(qkv.len());
            let mut maps = Vec::with_capacity(qkv.len());
            for i in 0..qkv.len() {
                let (q, k, _) = &qkv[i];
                // value exchange: branch i reads the other branch's values
                let v = &qkv[(i + 1) % qkv.len()].2;
                let kt = tape.transpose(k)?;
                let logits = tape.matmul(q, &kt)?;
                let logits = tape.scale(&logits, scale)?;
                let a = tape.softmax_rows(&logits)?;
                let o = tape.matmul(&a, v)?;
                outs.push(tape.reshape(&o, &[n, bc, h, w])?);
                maps.push(a);
            }
            let refs: Vec<&Var<T>> = outs.iter().collect();
            let out = tape.concat_channels(&refs)?;
            Ok(Attention { out, maps })
        })
    }

    /// Restores the sampled extents: block deconv then 1x1 conv, or plain
    /// nearest upsampling when local enhancement is disabled.
    pub fn local_enhance<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        match &self.le {
            Some((deconv, proj)) => {
                let y = deconv.forward(tape, store, x)?;
                proj.forward(tape, store, &y)
            }
            None => match self.config.effective_stride() {
                1 => Ok(x.clone()),
                r => tape.upsample_nearest(x, r),
            },
        }
    }

    pub fn ffn<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let hmid = self.ffn.0.forward(tape, store, x)?;
        let hmid = tape.relu(&hmid)?;
        self.ffn.1.forward(tape, store, &hmid)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: &Var<T>) -> Result<Var<T>> {
        let zn = match &self.norm1 {
            Some(norm) => norm.forward(tape, store, z)?,
            None => z.clone(),
        };
        let s = self.feature_sample(tape, &zn)?;
        let a = self.compact_attention(tape, store, &s)?;
        let le = self.local_enhance(tape, store, &a.out)?;
        let u = tape.add(z, &le)?;
        let un = match &self.norm2 {
            Some(norm) => norm.forward(tape, store, &u)?,
            None => u.clone(),
        };
        let f = self.ffn(tape, store, &un)?;
        tape.add(&u, &f)
    }
}

/// Plain token attention on one branch (`tokens x tokens` affinities),
/// kept as the complexity reference. Operands are `[B, d, tokens]`.
pub fn naive_token_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
) -> Result<Var<T>> {
    let qt = tape.transpose(q)?;
    let logits = tape.matmul(&qt, k)?;
    let a = tape.softmax_rows(&logits)?;
    let vt = tape.transpose(v)?;
    let o = tape.matmul(&a, &vt)?;
    tape.transpose(&o)
}

/// Closed-form attention matmul MACs of one CETL on `[n, c, h, w]`
/// sampled features: two products of `d x tokens x d` per head and branch.
pub fn compact_attention_macs(config: &CetlConfig, n: usize, h: usize, w: usize) -> u64 {
    let bc = config.branch_channels();
    let branches = if config.use_channel_split { 2 } else { 1 };
    let d = bc / config.heads_per_half;
    (branches * n * config.heads_per_half * 2 * d * d * h * w) as u64
}
