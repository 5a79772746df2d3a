//! The grid network: head, fusion columns and tail.
//!
//! Row `i` carries `2^i C` channels at `1/2^i` scale. The head embeds each
//! pyramid level and passes features down the rows; the fusion columns
//! exchange information between neighbouring rows through pixel-(un)shuffle
//! transitions and per-channel weighted sums; the tail decodes every row to
//! RGB and adds the input level back.

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::cesa::CetlConfig;
use crate::data::make_pyramid;
use crate::error::{Error, Result};
use crate::nn::{reflect_pad, Builder, Conv2d, ConvSpec};
use crate::rdtb::{Rdtb, RdtbConfig};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub rows: usize,
    pub fusion_columns: usize,
    pub base_channels: usize,
    pub growth: usize,
    pub sampler_strides: Vec<usize>,
    pub cetls_per_rdtl: usize,
    pub heads_per_half: usize,
    pub ffn_expansion: usize,
    pub use_norm: bool,
    pub use_feature_sampling: bool,
    pub use_channel_split: bool,
    pub use_local_enhancement: bool,
    pub use_dense: bool,
    pub use_local_fusion: bool,
    pub use_local_skip: bool,
}

/// Direction of cross-row exchange in one fusion column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnKind {
    /// Row `i` also receives the downsampled row `i - 1`.
    Down,
    /// Rows stay independent.
    Plain,
    /// Row `i` also receives the upsampled row `i + 1`.
    Up,
}

/// Default sampler stride of row `i`.
pub fn default_stride(row: usize) -> usize {
    if row == 0 {
        4
    } else {
        2
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            rows: 3,
            fusion_columns: 5,
            base_channels: 48,
            growth: 16,
            sampler_strides: vec![4, 2, 2],
            cetls_per_rdtl: 2,
            heads_per_half: 1,
            ffn_expansion: 2,
            use_norm: true,
            use_feature_sampling: true,
            use_channel_split: true,
            use_local_enhancement: true,
            use_dense: true,
            use_local_fusion: true,
            use_local_skip: true,
        }
    }
}

impl GridConfig {
    pub const PRESETS: [&'static str; 4] = ["gridformer", "gridformer-s", "tiny", "micro"];

    pub fn preset(name: &str) -> Result<Self> {
        let base = GridConfig::default();
        Ok(match name {
            "gridformer" => base,
            "gridformer-s" => GridConfig {
                base_channels: 32,
                ..base
            },
            "tiny" => GridConfig {
                base_channels: 8,
                growth: 4,
                cetls_per_rdtl: 1,
                ..base
            },
            "micro" => GridConfig {
                fusion_columns: 2,
                base_channels: 8,
                growth: 4,
                cetls_per_rdtl: 1,
                ..base
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other}; known: {}",
                    Self::PRESETS.join(", ")
                )))
            }
        })
    }

    /// Same config with a different row count; strides follow the default
    /// per-row pattern.
    pub fn with_rows(mut self, rows: usize) -> Self {
        self.rows = rows;
        self.sampler_strides = (0..rows).map(default_stride).collect();
        self
    }

    pub fn row_channels(&self, row: usize) -> usize {
        self.base_channels << row
    }

    pub fn column_kinds(&self) -> Vec<ColumnKind> {
        let half = self.fusion_columns / 2;
        let mut kinds = vec![ColumnKind::Down; half];
        if self.fusion_columns % 2 == 1 {
            kinds.push(ColumnKind::Plain);
        }
        kinds.extend(std::iter::repeat_n(ColumnKind::Up, half));
        kinds
    }

    /// Spatial extents must be multiples of this for every row's pooling
    /// and every transition to divide exactly.
    pub fn size_multiple(&self) -> usize {
        let mut m = 16;
        for (i, &r) in self.sampler_strides.iter().enumerate() {
            let stride = if self.use_feature_sampling { r } else { 1 };
            m = lcm(m, (1 << i) * stride.max(1));
        }
        lcm(m, 1 << self.rows.saturating_sub(1))
    }

    pub fn rdtb_config(&self, row: usize) -> RdtbConfig {
        RdtbConfig {
            growth: self.growth,
            cetls_per_rdtl: self.cetls_per_rdtl,
            cetl: CetlConfig {
                channels: self.row_channels(row),
                sample_stride: self.sampler_strides[row],
                heads_per_half: self.heads_per_half,
                ffn_expansion: self.ffn_expansion,
                use_feature_sampling: self.use_feature_sampling,
                use_channel_split: self.use_channel_split,
                use_local_enhancement: self.use_local_enhancement,
                use_norm: self.use_norm,
            },
            use_dense: self.use_dense,
            use_local_fusion: self.use_local_fusion,
            use_local_skip: self.use_local_skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.base_channels == 0 || self.growth == 0 {
            return Err(Error::config("rows, base_channels and growth must be positive"));
        }
        if self.sampler_strides.len() != self.rows {
            return Err(Error::config(format!(
                "{} sampler strides for {} rows",
                self.sampler_strides.len(),
                self.rows
            )));
        }
        if self.sampler_strides.contains(&0) {
            return Err(Error::config("sampler strides must be positive"));
        }
        for row in 0..self.rows {
            self.rdtb_config(row).cetl.validate()?;
        }
        if self.cetls_per_rdtl == 0 {
            return Err(Error::config("cetls_per_rdtl must be positive"));
        }
        Ok(())
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Pixel-unshuffle by 2, then a 3x3 conv `4C' -> 2C'`.
#[derive(Clone, Debug)]
pub struct DownTransition {
    conv: Conv2d,
}

impl DownTransition {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize) -> Result<Self> {
        Ok(DownTransition {
            conv: Conv2d::new(b, path, ConvSpec::same(4 * channels, 2 * channels, 3))?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let u = tape.pixel_unshuffle(x, 2)?;
        self.conv.forward(tape, store, &u)
    }
}

/// A 3x3 conv `2C' -> 4C'`, then pixel-shuffle by 2 down to `C'` channels.
#[derive(Clone, Debug)]
pub struct UpTransition {
    conv: Conv2d,
}

impl UpTransition {
    /// `channels` is the width of the (wider) source row.
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::config(format!("{path}: odd source width {channels}")));
        }
        Ok(UpTransition {
            conv: Conv2d::new(b, path, ConvSpec::same(channels, 2 * channels, 3))?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(tape, store, x)?;
        tape.pixel_shuffle(&y, 2)
    }
}

/// `w1 * a + w2 * b` with per-channel weights, both initialized to 0.5.
#[derive(Clone, Debug)]
pub struct WeightedFusion {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl WeightedFusion {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, path: &str, channels: usize) -> Result<Self> {
        Ok(WeightedFusion {
            w1: b.constant(&format!("{path}.w1"), &[channels], 0.5)?,
            w2: b.constant(&format!("{path}.w2"), &[channels], 0.5)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        a: &Var<T>,
        b: &Var<T>,
    ) -> Result<Var<T>> {
        let w1 = tape.param(store, self.w1);
        let w2 = tape.param(store, self.w2);
        weighted_fusion(tape, a, b, &w1, &w2)
    }
}

pub fn weighted_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    a: &Var<T>,
    b: &Var<T>,
    w1: &Var<T>,
    w2: &Var<T>,
) -> Result<Var<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "weighted fusion of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let wa = tape.channel_scale(a, w1)?;
    let wb = tape.channel_scale(b, w2)?;
    tape.add(&wa, &wb)
}

#[derive(Clone, Debug)]
struct HeadRow {
    embed: Conv2d,
    gfl: Rdtb,
    down: Option<DownTransition>,
}

#[derive(Clone, Debug)]
struct FusionCell {
    gfl: Rdtb,
    /// Transition and fusion weights for the cross-row input, if any.
    cross: Option<(Transition, WeightedFusion)>,
}

#[derive(Clone, Debug)]
enum Transition {
    Down(DownTransition),
    Up(UpTransition),
}

#[derive(Clone, Debug)]
struct Column {
    kind: ColumnKind,
    cells: Vec<FusionCell>,
}

#[derive(Clone, Debug)]
struct TailRow {
    gfl: Rdtb,
    out: Conv2d,
}

/// The full model description; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GridFormer {
    config: GridConfig,
    head: Vec<HeadRow>,
    columns: Vec<Column>,
    tail: Vec<TailRow>,
}

impl GridFormer {
    /// Builds the model, registering every parameter in construction order.
    pub fn new<T: Scalar>(config: GridConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(store, seed);
        let rows = config.rows;
        let mut head = Vec::with_capacity(rows);
        for i in 0..rows {
            let w = config.row_channels(i);
            let p = format!("head.row{i}");
            head.push(HeadRow {
                embed: Conv2d::new(&mut b, &format!("{p}.embed"), ConvSpec::same(IMAGE_CHANNELS, w, 3))?,
                gfl: Rdtb::new(&mut b, &format!("{p}.gfl"), config.rdtb_config(i))?,
                down: (i > 0)
                    .then(|| DownTransition::new(&mut b, &format!("{p}.down"), config.row_channels(i - 1)))
                    .transpose()?,
            });
        }
        let mut columns = Vec::new();
        for (j, kind) in config.column_kinds().into_iter().enumerate() {
            let mut cells = Vec::with_capacity(rows);
            for i in 0..rows {
                let p = format!("fusion.col{j}.row{i}");
                let w = config.row_channels(i);
                let gfl = Rdtb::new(&mut b, &format!("{p}.gfl"), config.rdtb_config(i))?;
                let cross = match kind {
                    ColumnKind::Down if i > 0 => Some(Transition::Down(DownTransition::new(
                        &mut b,
                        &format!("{p}.down"),
                        config.row_channels(i - 1),
                    )?)),
                    ColumnKind::Up if i + 1 < rows => Some(Transition::Up(UpTransition::new(
                        &mut b,
                        &format!("{p}.up"),
                        config.row_channels(i + 1),
                    )?)),
                    _ => None,
                };
                let cross = match cross {
                    Some(t) => Some((t, WeightedFusion::new(&mut b, &format!("{p}.mix"), w)?)),
                    None => None,
                };
                cells.push(FusionCell { gfl, cross });
            }
            columns.push(Column { kind, cells });
        }
        let mut tail = Vec::with_capacity(rows);
        for i in 0..rows {
            let p = format!("tail.row{i}");
            tail.push(TailRow {
                gfl: Rdtb::new(&mut b, &format!("{p}.gfl"), config.rdtb_config(i))?,
                out: Conv2d::new(&mut b, &format!("{p}.out"), ConvSpec::same(config.row_channels(i), IMAGE_CHANNELS, 3))?,
            });
        }
        Ok(GridFormer {
            config,
            head,
            columns,
            tail,
        })
    }

    /// Builds the model together with a fresh parameter store.
    pub fn init<T: Scalar>(config: GridConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Self::new(config, &mut store, seed)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    /// Path prefixes of the three final 3x3 convs.
    pub fn tail_conv_paths(&self) -> Vec<String> {
        self.tail.iter().map(|t| t.out.path().to_string()).collect()
    }

    /// Path prefixes of every cross-row fusion weight `w2`.
    pub fn cross_weights(&self) -> Vec<ParamId> {
        self.columns
            .iter()
            .flat_map(|c| c.cells.iter())
            .filter_map(|cell| cell.cross.as_ref().map(|(_, mix)| mix.w2))
            .collect()
    }

    fn check_pyramid<T: Scalar>(&self, xs: &[Var<T>]) -> Result<()> {
        if xs.len() != self.config.rows {
            return Err(Error::contract(format!(
                "pyramid has {} levels, model has {} rows",
                xs.len(),
                self.config.rows
            )));
        }
        let (n, c, h, w) = xs[0].shape().nchw()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::contract(format!("expected RGB input, got {} channels", c)));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::contract(format!(
                "input extents {h}x{w} must be multiples of {m}; use restore() to pad"
            )));
        }
        for (i, x) in xs.iter().enumerate() {
            if x.dims() != [n, c, h >> i, w >> i] {
                return Err(Error::contract(format!(
                    "pyramid level {i} has shape {}, expected [{n}x{c}x{}x{}]",
                    x.shape(),
                    h >> i,
                    w >> i
                )));
            }
        }
        Ok(())
    }

    /// `F_0 = GFL(E(X_0))`, `F_i = GFL(E(X_i)) + down(F_{i-1})`.
    pub fn grid_head<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, xs: &[Var<T>]) -> Result<Vec<Var<T>>> {
        self.check_pyramid(xs)?;
        let mut fs: Vec<Var<T>> = Vec::with_capacity(xs.len());
        for (i, (row, x)) in self.head.iter().zip(xs).enumerate() {
            let e = row.embed.forward(tape, store, x)?;
            let g = row.gfl.forward(tape, store, &e)?;
            let f = match &row.down {
                Some(down) => {
                    let d = down.forward(tape, store, &fs[i - 1])?;
                    tape.add(&g, &d)?
                }
                None => g,
            };
            fs.push(f);
        }
        Ok(fs)
    }

    pub fn grid_fusion<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, fs: &[Var<T>]) -> Result<Vec<Var<T>>> {
        let rows = self.config.rows;
        if fs.len() != rows {
            return Err(Error::contract(format!("{} feature rows for {rows} model rows", fs.len())));
        }
        let mut cur: Vec<Var<T>> = fs.to_vec();
        for col in &self.columns {
            let mut next: Vec<Option<Var<T>>> = vec![None; rows];
            let order: Vec<usize> = match col.kind {
                ColumnKind::Up => (0..rows).rev().collect(),
                _ => (0..rows).collect(),
            };
            for i in order {
                let cell = &col.cells[i];
                let t = cell.gfl.forward(tape, store, &cur[i])?;
                let out = match &cell.cross {
                    Some((Transition::Down(down), mix)) => {
                        let src = next[i - 1].as_ref().expect("row above computed first");
                        let d = down.forward(tape, store, src)?;
                        mix.forward(tape, store, &t, &d)?
                    }
                    Some((Transition::Up(up), mix)) => {
                        let src = next[i + 1].as_ref().expect("row below computed first");
                        let u = up.forward(tape, store, src)?;
                        mix.forward(tape, store, &t, &u)?
                    }
                    None => t,
                };
                next[i] = Some(out);
            }
            cur = next.into_iter().map(|v| v.expect("every row computed")).collect();
        }
        Ok(cur)
    }

    /// `X^_i = C_i(GFL_i(F^_i)) + X_i`.
    pub fn grid_tail<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fs: &[Var<T>],
        xs: &[Var<T>],
    ) -> Result<Vec<Var<T>>> {
        if fs.len() != self.config.rows || xs.len() != self.config.rows {
            return Err(Error::contract("tail needs one feature map and one image per row"));
        }
        self.tail
            .iter()
            .zip(fs.iter().zip(xs))
            .map(|(row, (f, x))| {
                let g = row.gfl.forward(tape, store, f)?;
                let y = row.out.forward(tape, store, &g)?;
                tape.add(&y, x)
            })
            .collect()
    }

    /// Head, fusion and tail on a pyramid whose extents are already valid.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, xs: &[Var<T>]) -> Result<Vec<Var<T>>> {
        let fs = self.grid_head(tape, store, xs)?;
        let fs = self.grid_fusion(tape, store, &fs)?;
        self.grid_tail(tape, store, &fs, xs)
    }

    /// Restores an image of any size: reflect-pads to the size multiple,
    /// builds the pyramid, runs the model and crops every level back to
    /// `ceil(extent / 2^i)`.
    pub fn restore<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<Var<T>>> {
        let (_, _, h, w) = image.shape().nchw()?;
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = reflect_pad(image, ph, pw)?;
        let levels = make_pyramid(&padded, self.config.rows)?;
        let xs: Vec<Var<T>> = levels.into_iter().map(|l| tape.input(l)).collect();
        let ys = self.forward(tape, store, &xs)?;
        ys.iter()
            .enumerate()
            .map(|(i, y)| tape.crop(y, h.div_ceil(1 << i), w.div_ceil(1 << i)))
            .collect()
    }

    /// Shape-only walk of the model on an `n x 3 x h x w` input.
    pub fn trace_meta(&self, n: usize, h: usize, w: usize) -> Result<Tape<f32>> {
        let store = self.meta_store()?;
        let mut tape = Tape::<f32>::meta();
        let xs = (0..self.config.rows)
            .map(|i| tape.placeholder(&[n, IMAGE_CHANNELS, h >> i, w >> i]))
            .collect::<Result<Vec<_>>>()?;
        self.forward(&mut tape, &store, &xs)?;
        Ok(tape)
    }

    fn meta_store(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        GridFormer::new(self.config.clone(), &mut store, 0)?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, grad_close};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(0.0..1.0)).unwrap()
    }

    fn pyramid_vars(tape: &mut Tape<f64>, img: &Tensor<f64>, rows: usize) -> Vec<Var<f64>> {
        make_pyramid(img, rows).unwrap().into_iter().map(|t| tape.input(t)).collect()
    }

    #[test]
    fn column_patterns() {
        use ColumnKind::*;
        let mut cfg = GridConfig::default();
        assert_eq!(cfg.column_kinds(), vec![Down, Down, Plain, Up, Up]);
        cfg.fusion_columns = 2;
        assert_eq!(cfg.column_kinds(), vec![Down, Up]);
        cfg.fusion_columns = 1;
        assert_eq!(cfg.column_kinds(), vec![Plain]);
    }

    #[test]
    fn transitions_at_full_width() {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, 0);
        let down = DownTransition::new(&mut b, "d", 48).unwrap();
        let up = UpTransition::new(&mut b, "u", 96).unwrap();
        let mut tape = Tape::meta();
        let x = tape.placeholder(&[1, 48, 256, 256]).unwrap();
        let d = down.forward(&mut tape, &store, &x).unwrap();
        assert_eq!(d.dims(), &[1, 96, 128, 128]);
        let u = up.forward(&mut tape, &store, &d).unwrap();
        assert_eq!(u.dims(), &[1, 48, 256, 256]);
        let odd = tape.placeholder(&[1, 48, 5, 6]).unwrap();
        assert!(down.forward(&mut tape, &store, &odd).is_err());
    }

    #[test]
    fn zero_transition_weights_give_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut b = Builder::new(&mut store, 0);
        let down = DownTransition::new(&mut b, "d", 2).unwrap();
        let up = UpTransition::new(&mut b, "u", 4).unwrap();
        store.zero_under("d");
        store.zero_under("u");
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::full(&[1, 2, 4, 4], 0.3).unwrap());
        let d = down.forward(&mut tape, &store, &x).unwrap();
        assert!(d.tensor().unwrap().data().iter().all(|&v| v == 0.0));
        let u = up.forward(&mut tape, &store, &d).unwrap();
        assert!(u.tensor().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weighted_fusion_cases_and_gradient() {
        let a0 = random(&[1, 2, 2, 2], 1);
        let b0 = random(&[1, 2, 2, 2], 2);
        let run = |w1: &[f64], w2: &[f64], b: &Tensor<f64>| {
            let mut tape = Tape::<f64>::inference();
            let (av, bv) = (tape.input(a0.clone()), tape.input(b.clone()));
            let w1 = tape.input(Tensor::new(&[2], w1.to_vec()).unwrap());
            let w2 = tape.input(Tensor::new(&[2], w2.to_vec()).unwrap());
            weighted_fusion(&mut tape, &av, &bv, &w1, &w2).unwrap().tensor().unwrap().clone()
        };
        assert_eq!(run(&[1.0, 1.0], &[0.0, 0.0], &b0), a0);
        assert_eq!(run(&[0.5, 0.5], &[0.5, 0.5], &a0), a0);

        let mut tape = Tape::<f64>::record();
        let (av, bv) = (tape.input(a0.clone()), tape.input(b0.clone()));
        let w1 = tape.input_with_grad(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        let w2 = tape.input(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
        let y = weighted_fusion(&mut tape, &av, &bv, &w1, &w2).unwrap();
        let s = tape.sum(&y).unwrap();
        let g = tape.backward(&s).unwrap();
        let fd = finite_diff(
            |w| {
                let mut tape = Tape::<f64>::inference();
                let (av, bv) = (tape.input(a0.clone()), tape.input(b0.clone()));
                let w1 = tape.input(w.clone());
                let w2 = tape.input(Tensor::new(&[2], vec![0.5, 0.5]).unwrap());
                weighted_fusion(&mut tape, &av, &bv, &w1, &w2).unwrap().tensor().unwrap().sum()
            },
            &Tensor::new(&[2], vec![0.5, 0.5]).unwrap(),
            1e-6,
        );
        for c in 0..2 {
            let channel_sum: f64 = a0.data()[c * 4..(c + 1) * 4].iter().sum();
            assert!(grad_close(g.wrt(&w1).unwrap().data()[c], fd.data()[c], 1e-6, 1e-10));
            assert!((fd.data()[c] - channel_sum).abs() < 1e-8);
        }
    }

    #[test]
    fn head_shapes_at_full_size() {
        let (model, _) = GridFormer::init::<f32>(GridConfig::default(), 0).unwrap();
        let store = model.meta_store().unwrap();
        let mut tape = Tape::<f32>::meta();
        let xs: Vec<_> = (0..3).map(|i| tape.placeholder(&[1, 3, 256 >> i, 256 >> i]).unwrap()).collect();
        let fs = model.grid_head(&mut tape, &store, &xs).unwrap();
        let dims: Vec<Vec<usize>> = fs.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 48, 256, 256], vec![1, 96, 128, 128], vec![1, 192, 64, 64]]);
    }

    fn micro() -> GridConfig {
        GridConfig::preset("micro").unwrap()
    }

    #[test]
    fn zero_head_gives_zero_features_and_head_reads_every_level() {
        let (model, store) = GridFormer::init::<f64>(micro(), 1).unwrap();
        let img = random(&[1, 3, 16, 16], 2);
        let head = |st: &ParamStore<f64>, xs_override: Option<&Tensor<f64>>| {
            let mut tape = Tape::inference();
            let mut xs = pyramid_vars(&mut tape, &img, 3);
            if let Some(x1) = xs_override {
                xs[1] = tape.input(x1.clone());
            }
            model
                .grid_head(&mut tape, st, &xs)
                .unwrap()
                .iter()
                .map(|f| f.tensor().unwrap().clone())
                .collect::<Vec<_>>()
        };
        let mut zeroed = store.clone();
        zeroed.zero_under("head");
        assert!(head(&zeroed, None).iter().all(|f| f.data().iter().all(|&v| v == 0.0)));

        let base = head(&store, None);
        let x1 = make_pyramid(&img, 3).unwrap()[1].map(|v| v + 0.1);
        let moved = head(&store, Some(&x1));
        assert_eq!(base[0], moved[0]);
        assert_ne!(base[1], moved[1]);
        assert_ne!(base[2], moved[2]);
    }

    #[test]
    fn zero_cross_weights_decouple_rows() {
        let (model, mut store) = GridFormer::init::<f64>(GridConfig::preset("tiny").unwrap(), 3).unwrap();
        for id in model.cross_weights() {
            store.set_value(id, Tensor::zeros_like(store.get(id).value())).unwrap();
        }
        let fs: Vec<Tensor<f64>> = (0..3)
            .map(|i| random(&[1, 8 << i, 16 >> i, 16 >> i], 10 + i as u64))
            .collect();
        let run = |fs: &[Tensor<f64>]| {
            let mut tape = Tape::inference();
            let vars: Vec<_> = fs.iter().map(|f| tape.input(f.clone())).collect();
            model
                .grid_fusion(&mut tape, &store, &vars)
                .unwrap()
                .iter()
                .map(|v| v.tensor().unwrap().clone())
                .collect::<Vec<_>>()
        };
        let base = run(&fs);
        for (f, o) in fs.iter().zip(&base) {
            assert_eq!(f.shape(), o.shape());
        }
        let mut moved = fs.clone();
        moved[2] = moved[2].map(|v| v * 2.0 + 1.0);
        let after = run(&moved);
        assert_eq!(base[0], after[0]);
        assert_eq!(base[1], after[1]);
        assert_ne!(base[2], after[2]);
    }

    #[test]
    fn zero_tail_convs_reproduce_the_pyramid() {
        let (model, mut store) = GridFormer::init::<f64>(micro(), 4).unwrap();
        for p in model.tail_conv_paths() {
            store.zero_under(&p);
        }
        let img = random(&[1, 3, 16, 16], 5);
        let mut tape = Tape::inference();
        let xs = pyramid_vars(&mut tape, &img, 3);
        let ys = model.forward(&mut tape, &store, &xs).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(x.tensor().unwrap(), y.tensor().unwrap());
        }
    }

    #[test]
    fn tail_gradients_reach_every_tail_parameter() {
        let (model, store) = GridFormer::init::<f64>(micro(), 6).unwrap();
        let img = random(&[1, 3, 16, 16], 7);
        let mut tape = Tape::record();
        let xs = pyramid_vars(&mut tape, &img, 3);
        let ys = model.forward(&mut tape, &store, &xs).unwrap();
        let mut total = tape.sum(&ys[0]).unwrap();
        for y in &ys[1..] {
            let sq = tape.square(y).unwrap();
            let s = tape.sum(&sq).unwrap();
            total = tape.add(&total, &s).unwrap();
        }
        let g = tape.backward(&total).unwrap();
        for (id, p) in store.iter().filter(|(_, p)| p.path().starts_with("tail.")) {
            let grad = g.param(id).unwrap_or_else(|| panic!("{} unreached", p.path()));
            assert!(grad.data().iter().any(|&v| v != 0.0), "{}", p.path());
        }
    }

    #[test]
    fn restore_pads_and_crops() {
        let (model, store) = GridFormer::init::<f32>(micro(), 0).unwrap();
        let img = Tensor::<f32>::full(&[1, 3, 20, 18], 0.5).unwrap();
        let mut tape = Tape::inference();
        let ys = model.restore(&mut tape, &store, &img).unwrap();
        let dims: Vec<Vec<usize>> = ys.iter().map(|y| y.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 3, 20, 18], vec![1, 3, 10, 9], vec![1, 3, 5, 5]]);
        let mut tape = Tape::inference();
        let bad = make_pyramid(&Tensor::<f32>::zeros(&[1, 3, 20, 20]).unwrap(), 3).unwrap();
        let xs: Vec<_> = bad.into_iter().map(|t| tape.input(t)).collect();
        assert!(matches!(model.forward(&mut tape, &store, &xs), Err(Error::Contract(_))));
    }

    #[test]
    fn size_multiple_covers_pooling_and_transitions() {
        assert_eq!(GridConfig::default().size_multiple(), 16);
        let deep = GridConfig::default().with_rows(5);
        assert_eq!(deep.size_multiple(), 32);
    }
}
