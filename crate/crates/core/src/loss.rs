//! Training objective: multi-scale Charbonnier plus a weighted perceptual
//! term computed through a frozen feature extractor.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2dOp;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CharbonnierMode {
    /// Mean of `sqrt(d^2 + eps^2)` over elements.
    PerPixel,
    /// `sqrt(||d||^2 + eps^2)` over the whole image.
    Global,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub mode: CharbonnierMode,
    pub extractor_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-3,
            alpha: 0.1,
            mode: CharbonnierMode::PerPixel,
            extractor_seed: 0x0c0_ffee,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::config(format!(
                "need epsilon > 0 and alpha >= 0, got {} and {}",
                self.epsilon, self.alpha
            )));
        }
        Ok(())
    }
}

/// Maps a `[N, 3, H, W]` image to a feature map. Implementations must be
/// deterministic and let gradients through to the image.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, tape: &mut Tape<T>, image: &Var<T>) -> Result<Var<T>>;
}

/// Frozen stack of stride-2 3x3 conv + relu stages.
#[derive(Clone, Debug)]
pub struct ConvStack {
    stages: Vec<(Tensor<f64>, Tensor<f64>)>,
}

impl ConvStack {
    pub const STANDIN_WIDTHS: [usize; 6] = [3, 16, 32, 32, 64, 64];

    /// Five stages with fixed seeded weights.
    pub fn standin(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = Self::STANDIN_WIDTHS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(&[cout, cin, 3, 3], |_| rng.gen_range(-bound..bound)).expect("dims");
                let b = Tensor::from_fn(&[cout], |_| rng.gen_range(-0.05..0.05)).expect("dims");
                (w, b)
            })
            .collect();
        ConvStack { stages }
    }

    /// Externally supplied `(weight [Cout, Cin, 3, 3], bias [Cout])` stages.
    pub fn from_weights(stages: Vec<(Tensor<f64>, Tensor<f64>)>) -> Result<Self> {
        let mut width = 3;
        for (i, (w, b)) in stages.iter().enumerate() {
            let d = w.dims();
            if d.len() != 4 || d[1] != width || d[2] != 3 || d[3] != 3 || b.dims() != [d[0]] {
                return Err(Error::shape(format!(
                    "extractor stage {i}: weight {} and bias {} do not chain from {width} channels",
                    w.shape(),
                    b.shape()
                )));
            }
            width = d[0];
        }
        Ok(ConvStack { stages })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }
}

impl<T: Scalar> FeatureExtractor<T> for ConvStack {
    fn features(&self, tape: &mut Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        let mut x = image.clone();
        for (w, b) in &self.stages {
            let w = tape.input(w.cast());
            let b = tape.input(b.cast());
            let y = tape.apply(Conv2dOp { stride: 2, padding: 1 }, &[&x, &w, &b])?;
            x = tape.relu(&y)?;
        }
        Ok(x)
    }
}

fn check_pyramids<T: Scalar>(restored: &[Var<T>], reference: &[Var<T>]) -> Result<()> {
    if restored.is_empty() || restored.len() != reference.len() {
        return Err(Error::contract(format!(
            "pyramids have {} and {} levels",
            restored.len(),
            reference.len()
        )));
    }
    for (k, (a, b)) in restored.iter().zip(reference).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::contract(format!(
                "level {k}: restored {} vs reference {}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

fn average<T: Scalar>(tape: &mut Tape<T>, terms: &[Var<T>]) -> Result<Var<T>> {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = tape.add(&acc, t)?;
    }
    tape.scale(&acc, T::lit(1.0 / terms.len() as f64))
}

/// Per-scale Charbonnier terms.
pub fn charbonnier_terms<T: Scalar>(
    tape: &mut Tape<T>,
    restored: &[Var<T>],
    reference: &[Var<T>],
    epsilon: f64,
    mode: CharbonnierMode,
) -> Result<Vec<Var<T>>> {
    check_pyramids(restored, reference)?;
    restored
        .iter()
        .zip(reference)
        .map(|(x, i)| {
            let d = tape.sub(x, i)?;
            match mode {
                CharbonnierMode::PerPixel => {
                    let c = tape.charbonnier(&d, T::lit(epsilon))?;
                    tape.mean(&c)
                }
                CharbonnierMode::Global => {
                    let sq = tape.square(&d)?;
                    let s = tape.sum(&sq)?;
                    let s = tape.add_scalar(&s, T::lit(epsilon * epsilon))?;
                    tape.sqrt(&s)
                }
            }
        })
        .collect()
}

pub fn charbonnier_ms<T: Scalar>(
    tape: &mut Tape<T>,
    restored: &[Var<T>],
    reference: &[Var<T>],
    epsilon: f64,
    mode: CharbonnierMode,
) -> Result<Var<T>> {
    let terms = charbonnier_terms(tape, restored, reference, epsilon, mode)?;
    average(tape, &terms)
}

/// Per-scale mean absolute feature differences.
pub fn perceptual_terms<T: Scalar>(
    tape: &mut Tape<T>,
    restored: &[Var<T>],
    reference: &[Var<T>],
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Vec<Var<T>>> {
    check_pyramids(restored, reference)?;
    restored
        .iter()
        .zip(reference)
        .map(|(x, i)| {
            let fx = extractor.features(tape, x)?;
            let fi = extractor.features(tape, i)?;
            let d = tape.sub(&fx, &fi)?;
            let a = tape.abs(&d)?;
            tape.mean(&a)
        })
        .collect()
}

pub fn perceptual<T: Scalar>(
    tape: &mut Tape<T>,
    restored: &[Var<T>],
    reference: &[Var<T>],
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var<T>> {
    let terms = perceptual_terms(tape, restored, reference, extractor)?;
    average(tape, &terms)
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, char: &Var<T>, per: &Var<T>, alpha: f64) -> Result<Var<T>> {
    let weighted = tape.scale(per, T::lit(alpha))?;
    tape.add(char, &weighted)
}

/// Scalar loss values after a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub char_per_scale: Vec<f64>,
    pub per_per_scale: Vec<f64>,
    pub char: f64,
    pub per: f64,
    pub total: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

/// The full objective on the tape together with its report.
pub struct Objective<T> {
    pub total: Var<T>,
    pub report: LossReport,
}

pub fn objective<T: Scalar>(
    tape: &mut Tape<T>,
    restored: &[Var<T>],
    reference: &[Var<T>],
    config: &LossConfig,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Objective<T>> {
    config.validate()?;
    let (total, report) = tape.within("loss", |tape| -> Result<_> {
        let chars = charbonnier_terms(tape, restored, reference, config.epsilon, config.mode)?;
        let pers = perceptual_terms(tape, restored, reference, extractor)?;
        let char = average(tape, &chars)?;
        let per = average(tape, &pers)?;
        let total = total_loss(tape, &char, &per, config.alpha)?;
        let read = |v: &Var<T>| v.value().map(|t| t.data()[0].as_f64()).unwrap_or(f64::NAN);
        let report = LossReport {
            char_per_scale: chars.iter().map(read).collect(),
            per_per_scale: pers.iter().map(read).collect(),
            char: read(&char),
            per: read(&per),
            total: read(&total),
            epsilon: config.epsilon,
            alpha: config.alpha,
        };
        Ok((total, report))
    })?;
    Ok(Objective { total, report })
}
