//! Weather degradation generators.
//!
//! Every generator is a pure function of `(clean image, spec)`: all
//! randomness comes from a generator seeded with `spec.seed`, and zero
//! strength returns the clean image unchanged.

use super::clamp_unit;
use crate::error::{Error, Result};
use crate::nn::upsample_tensor;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Haze,
    Rain,
    Snow,
    Raindrop,
    Mixed,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [Self::Haze, Self::Rain, Self::Snow, Self::Raindrop, Self::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Self::Haze => "haze",
            Self::Rain => "rain",
            Self::Snow => "snow",
            Self::Raindrop => "raindrop",
            Self::Mixed => "mixed",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown degradation kind {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthStyle {
    /// Far at the top row, near at the bottom.
    Ramp,
    /// Smoothed value noise normalized to `[0, 1]`.
    Noise,
    Constant(f32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    pub airlight: [f32; 3],
    pub beta: f32,
    pub depth: DepthStyle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreakParams {
    pub count: usize,
    pub length: f32,
    /// Radians from vertical.
    pub angle: f32,
    pub alpha: f32,
    pub brightness: f32,
}

/// Disk-shaped artifacts: snow flakes, or raindrops when `blur > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskParams {
    pub count: usize,
    pub radius_min: f32,
    pub radius_max: f32,
    pub alpha: f32,
    /// Box-blur radius of the region seen through a drop.
    pub blur: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Haze(HazeParams),
    Rain(StreakParams),
    Snow(DiskParams),
    Raindrop(DiskParams),
    /// Haze followed by rain.
    Mixed(HazeParams, StreakParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub degradation: Degradation,
    pub seed: u64,
}

impl Degradation {
    pub fn kind(&self) -> DegradationKind {
        match self {
            Self::Haze(_) => DegradationKind::Haze,
            Self::Rain(_) => DegradationKind::Rain,
            Self::Snow(_) => DegradationKind::Snow,
            Self::Raindrop(_) => DegradationKind::Raindrop,
            Self::Mixed(..) => DegradationKind::Mixed,
        }
    }
}

fn haze_params(rng: &mut impl Rng) -> HazeParams {
    let base = rng.gen_range(0.75f32..0.95);
    let airlight = [0, 1, 2].map(|_| (base + rng.gen_range(-0.05f32..0.05)).clamp(0.7, 1.0));
    HazeParams {
        airlight,
        beta: rng.gen_range(0.8f32..2.0),
        depth: if rng.gen_bool(0.5) { DepthStyle::Noise } else { DepthStyle::Ramp },
    }
}

fn streak_params(rng: &mut impl Rng, area: usize) -> StreakParams {
    StreakParams {
        count: (area as f32 * rng.gen_range(0.004f32..0.012)).round() as usize,
        length: rng.gen_range(4.0f32..10.0),
        angle: rng.gen_range(-0.4f32..0.4),
        alpha: rng.gen_range(0.4f32..0.8),
        brightness: rng.gen_range(0.8f32..1.0),
    }
}

impl DegradationSpec {
    /// Draws kind-appropriate parameters for an `h x w` image.
    pub fn sample(kind: DegradationKind, rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let area = h * w;
        let degradation = match kind {
            DegradationKind::Haze => Degradation::Haze(haze_params(rng)),
            DegradationKind::Rain => Degradation::Rain(streak_params(rng, area)),
            DegradationKind::Snow => Degradation::Snow(DiskParams {
                count: (area as f32 * rng.gen_range(0.005f32..0.015)).round() as usize,
                radius_min: 0.6,
                radius_max: rng.gen_range(1.2f32..2.5),
                alpha: rng.gen_range(0.6f32..0.95),
                blur: 0,
            }),
            DegradationKind::Raindrop => Degradation::Raindrop(DiskParams {
                count: (area as f32 * rng.gen_range(0.001f32..0.003)).round().max(1.0) as usize,
                radius_min: 2.0,
                radius_max: rng.gen_range(4.0f32..7.0),
                alpha: rng.gen_range(0.7f32..1.0),
                blur: rng.gen_range(1..=3),
            }),
            DegradationKind::Mixed => {
                let mut haze = haze_params(rng);
                haze.beta *= 0.6;
                Degradation::Mixed(haze, streak_params(rng, area))
            }
        };
        DegradationSpec {
            degradation,
            seed: rng.gen(),
        }
    }

    pub fn apply(&self, clean: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        check_image(clean)?;
        let mut out = match &self.degradation {
            Degradation::Haze(p) => synth_haze_with(clean, p, &mut rng),
            Degradation::Rain(p) => synth_rain_with(clean, p, &mut rng),
            Degradation::Snow(p) => synth_snow_with(clean, p, &mut rng),
            Degradation::Raindrop(p) => synth_raindrop_with(clean, p, &mut rng),
            Degradation::Mixed(h, r) => {
                let hazy = synth_haze_with(clean, h, &mut rng);
                synth_rain_with(&hazy, r, &mut rng)
            }
        };
        clamp_unit(&mut out);
        Ok(out)
    }

    /// `key=value` pairs for the dataset manifest.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("kind".to_string(), self.degradation.kind().to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        let haze = |push: &mut dyn FnMut(&str, String), p: &HazeParams| {
            let a = p.airlight;
            push("airlight", format!("{},{},{}", a[0], a[1], a[2]));
            push("beta", p.beta.to_string());
            push(
                "depth",
                match p.depth {
                    DepthStyle::Ramp => "ramp".to_string(),
                    DepthStyle::Noise => "noise".to_string(),
                    DepthStyle::Constant(d) => format!("const:{d}"),
                },
            );
        };
        let streak = |push: &mut dyn FnMut(&str, String), p: &StreakParams| {
            push("count", p.count.to_string());
            push("length", p.length.to_string());
            push("angle", p.angle.to_string());
            push("alpha", p.alpha.to_string());
            push("brightness", p.brightness.to_string());
        };
        let disk = |push: &mut dyn FnMut(&str, String), p: &DiskParams| {
            push("count", p.count.to_string());
            push("radius_min", p.radius_min.to_string());
            push("radius_max", p.radius_max.to_string());
            push("alpha", p.alpha.to_string());
            push("blur", p.blur.to_string());
        };
        match &self.degradation {
            Degradation::Haze(p) => haze(&mut push, p),
            Degradation::Rain(p) => streak(&mut push, p),
            Degradation::Snow(p) | Degradation::Raindrop(p) => disk(&mut push, p),
            Degradation::Mixed(h, r) => {
                haze(&mut push, h);
                streak(&mut push, r);
            }
        }
        out
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<V> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| Error::format(format!("manifest entry lacks {key}")))?;
            raw.parse()
                .map_err(|_| Error::format(format!("bad manifest value {key}={raw}")))
        }
        let haze = || -> Result<HazeParams> {
            let raw: String = get(pairs, "airlight")?;
            let a: Vec<f32> = raw
                .split(',')
                .map(|v| v.parse().map_err(|_| Error::format(format!("bad airlight {raw}"))))
                .collect::<Result<_>>()?;
            let airlight: [f32; 3] = a
                .try_into()
                .map_err(|_| Error::format(format!("airlight needs three values, got {raw}")))?;
            let depth: String = get(pairs, "depth")?;
            let depth = match depth.as_str() {
                "ramp" => DepthStyle::Ramp,
                "noise" => DepthStyle::Noise,
                other => match other.strip_prefix("const:").and_then(|v| v.parse().ok()) {
                    Some(d) => DepthStyle::Constant(d),
                    None => return Err(Error::format(format!("bad depth style {other}"))),
                },
            };
            Ok(HazeParams {
                airlight,
                beta: get(pairs, "beta")?,
                depth,
            })
        };
        let streak = || -> Result<StreakParams> {
            Ok(StreakParams {
                count: get(pairs, "count")?,
                length: get(pairs, "length")?,
                angle: get(pairs, "angle")?,
                alpha: get(pairs, "alpha")?,
                brightness: get(pairs, "brightness")?,
            })
        };
        let disk = || -> Result<DiskParams> {
            Ok(DiskParams {
                count: get(pairs, "count")?,
                radius_min: get(pairs, "radius_min")?,
                radius_max: get(pairs, "radius_max")?,
                alpha: get(pairs, "alpha")?,
                blur: get(pairs, "blur")?,
            })
        };
        let kind: String = get(pairs, "kind")?;
        let degradation = match kind.parse::<DegradationKind>()? {
            DegradationKind::Haze => Degradation::Haze(haze()?),
            DegradationKind::Rain => Degradation::Rain(streak()?),
            DegradationKind::Snow => Degradation::Snow(disk()?),
            DegradationKind::Raindrop => Degradation::Raindrop(disk()?),
            DegradationKind::Mixed => Degradation::Mixed(haze()?, streak()?),
        };
        Ok(DegradationSpec {
            degradation,
            seed: get(pairs, "seed")?,
        })
    }
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize)> {
    let (n, c, h, w) = img.shape().nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::contract(format!("expected a [1x3xHxW] image, got {}", img.shape())));
    }
    Ok((h, w))
}

fn dims(img: &Tensor<f32>) -> (usize, usize) {
    (img.dims()[2], img.dims()[3])
}

/// `I = J t + A (1 - t)` with `t = exp(-beta d)`.
pub fn synth_haze(clean: &Tensor<f32>, p: &HazeParams, seed: u64) -> Result<Tensor<f32>> {
    check_image(clean)?;
    let mut out = synth_haze_with(clean, p, &mut ChaCha8Rng::seed_from_u64(seed));
    clamp_unit(&mut out);
    Ok(out)
}

pub fn synth_rain(clean: &Tensor<f32>, p: &StreakParams, seed: u64) -> Result<Tensor<f32>> {
    check_image(clean)?;
    let mut out = synth_rain_with(clean, p, &mut ChaCha8Rng::seed_from_u64(seed));
    clamp_unit(&mut out);
    Ok(out)
}

pub fn synth_snow(clean: &Tensor<f32>, p: &DiskParams, seed: u64) -> Result<Tensor<f32>> {
    check_image(clean)?;
    let mut out = synth_snow_with(clean, p, &mut ChaCha8Rng::seed_from_u64(seed));
    clamp_unit(&mut out);
    Ok(out)
}

pub fn synth_raindrop(clean: &Tensor<f32>, p: &DiskParams, seed: u64) -> Result<Tensor<f32>> {
    check_image(clean)?;
    let mut out = synth_raindrop_with(clean, p, &mut ChaCha8Rng::seed_from_u64(seed));
    clamp_unit(&mut out);
    Ok(out)
}

/// Depth map in `[0, 1]`, row-major `h x w`.
pub fn depth_map(style: DepthStyle, h: usize, w: usize, rng: &mut impl Rng) -> Vec<f32> {
    match style {
        DepthStyle::Constant(d) => vec![d; h * w],
        DepthStyle::Ramp => (0..h * w)
            .map(|i| 1.0 - (i / w) as f32 / (h.max(2) - 1) as f32)
            .collect(),
        DepthStyle::Noise => {
            // coarse random lattice, nearest-upsampled, then smoothed
            let cell = 8;
            let (gh, gw) = (h.div_ceil(cell), w.div_ceil(cell));
            let lattice = Tensor::from_fn(&[1, 1, gh, gw], |_| rng.gen_range(0.0f32..1.0)).expect("lattice");
            let fine = upsample_tensor(&lattice, cell);
            let mut plane: Vec<f32> = (0..h * w).map(|i| fine.data()[(i / w) * gw * cell + i % w]).collect();
            for _ in 0..3 {
                plane = box_blur_plane(&plane, h, w, cell / 2);
            }
            let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let span = (hi - lo).max(1e-6);
            plane.iter().map(|v| (v - lo) / span).collect()
        }
    }
}

/// Mean over a `(2r+1)^2` window with clamped borders.
pub fn box_blur_plane(src: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return src.to_vec();
    }
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let lo = pos.saturating_sub(r);
                let hi = (pos + r).min(len - 1);
                let mut acc = 0.0;
                for q in lo..=hi {
                    acc += if horizontal { src[y * w + q] } else { src[q * w + x] };
                }
                out[y * w + x] = acc / (hi - lo + 1) as f32;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn synth_haze_with(clean: &Tensor<f32>, p: &HazeParams, rng: &mut impl Rng) -> Tensor<f32> {
    let (h, w) = dims(clean);
    let depth = depth_map(p.depth, h, w, rng);
    let mut out = clean.clone();
    for (c, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let a = p.airlight[c];
        for (v, &d) in plane.iter_mut().zip(&depth) {
            let t = (-p.beta * d).exp();
            *v = *v * t + a * (1.0 - t);
        }
    }
    out
}

/// `(1 - m) v + m color` per channel wherever the mask is positive.
fn blend(img: &mut Tensor<f32>, mask: &[f32], color: &[f32; 3]) {
    for (ch, &col) in img.data_mut().chunks_mut(mask.len()).zip(color) {
        for (v, &m) in ch.iter_mut().zip(mask) {
            if m > 0.0 {
                *v = (1.0 - m) * *v + m * col;
            }
        }
    }
}

fn synth_rain_with(clean: &Tensor<f32>, p: &StreakParams, rng: &mut impl Rng) -> Tensor<f32> {
    let (h, w) = dims(clean);
    let mut mask = vec![0.0f32; h * w];
    let (dx, dy) = (p.angle.sin(), p.angle.cos());
    for _ in 0..p.count {
        let x0 = rng.gen_range(0.0..w as f32);
        let y0 = rng.gen_range(0.0..h as f32);
        let len = p.length * rng.gen_range(0.7f32..1.3);
        let steps = (2.0 * len).ceil() as usize;
        for s in 0..=steps {
            let t = s as f32 * 0.5;
            let (x, y) = ((x0 + t * dx).floor(), (y0 + t * dy).floor());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                mask[y as usize * w + x as usize] = p.alpha;
            }
        }
    }
    let mut out = clean.clone();
    blend(&mut out, &mask, &[p.brightness; 3]);
    out
}

fn disk_mask(h: usize, w: usize, p: &DiskParams, rng: &mut impl Rng) -> Vec<f32> {
    let mut mask = vec![0.0f32; h * w];
    for _ in 0..p.count {
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let r = if p.radius_max > p.radius_min {
            rng.gen_range(p.radius_min..p.radius_max)
        } else {
            p.radius_min
        };
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
                // soft edge over the outer third of the radius
                let m = p.alpha * ((r - d) / (r / 3.0).max(0.5)).clamp(0.0, 1.0);
                let slot = &mut mask[y * w + x];
                *slot = slot.max(m);
            }
        }
    }
    mask
}

fn synth_snow_with(clean: &Tensor<f32>, p: &DiskParams, rng: &mut impl Rng) -> Tensor<f32> {
    let (h, w) = dims(clean);
    let mask = disk_mask(h, w, p, rng);
    let mut out = clean.clone();
    blend(&mut out, &mask, &[1.0; 3]);
    out
}

fn synth_raindrop_with(clean: &Tensor<f32>, p: &DiskParams, rng: &mut impl Rng) -> Tensor<f32> {
    let (h, w) = dims(clean);
    let mask = disk_mask(h, w, p, rng);
    if mask.iter().all(|&m| m == 0.0) {
        return clean.clone();
    }
    let mut out = clean.clone();
    let planes: Vec<Vec<f32>> = clean
        .data()
        .chunks(h * w)
        .map(|plane| {
            let blurred = box_blur_plane(plane, h, w, p.blur);
            // drops also brighten slightly
            blurred.iter().map(|v| (v * 1.1 + 0.03).min(1.0)).collect()
        })
        .collect();
    for (ch, through) in out.data_mut().chunks_mut(h * w).zip(&planes) {
        for ((v, &t), &m) in ch.iter_mut().zip(through).zip(&mask) {
            if m > 0.0 {
                *v = (1.0 - m) * *v + m * t;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    fn scene() -> Tensor<f32> {
        synth_scene(3, "s", 32, 32)
    }

    fn zero_strength(kind: DegradationKind) -> Degradation {
        let haze = HazeParams {
            airlight: [0.9; 3],
            beta: 0.0,
            depth: DepthStyle::Noise,
        };
        let streak = StreakParams {
            count: 0,
            length: 5.0,
            angle: 0.2,
            alpha: 0.7,
            brightness: 0.9,
        };
        let disk = DiskParams {
            count: 0,
            radius_min: 1.0,
            radius_max: 3.0,
            alpha: 0.8,
            blur: 2,
        };
        match kind {
            DegradationKind::Haze => Degradation::Haze(haze),
            DegradationKind::Rain => Degradation::Rain(streak),
            DegradationKind::Snow => Degradation::Snow(disk),
            DegradationKind::Raindrop => Degradation::Raindrop(disk),
            DegradationKind::Mixed => Degradation::Mixed(haze, streak),
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let j = scene();
        for kind in DegradationKind::ALL {
            let spec = DegradationSpec {
                degradation: zero_strength(kind),
                seed: 11,
            };
            assert_eq!(spec.apply(&j).unwrap(), j, "{kind}");
        }
    }

    #[test]
    fn haze_closed_forms() {
        let black = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        let p = HazeParams {
            airlight: [1.0; 3],
            beta: std::f32::consts::LN_2,
            depth: DepthStyle::Constant(1.0),
        };
        let out = synth_haze(&black, &p, 0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        let far = HazeParams {
            airlight: [0.8, 0.9, 1.0],
            beta: 1.0,
            depth: DepthStyle::Constant(60.0),
        };
        let out = synth_haze(&scene(), &far, 0).unwrap();
        for (c, plane) in out.data().chunks(32 * 32).enumerate() {
            assert!(plane.iter().all(|&v| (v - far.airlight[c]).abs() < 1e-6));
        }
    }

    #[test]
    fn opaque_streak_takes_the_streak_color() {
        let j = Tensor::<f32>::zeros(&[1, 3, 16, 16]).unwrap();
        let p = StreakParams {
            count: 1,
            length: 6.0,
            angle: 0.0,
            alpha: 1.0,
            brightness: 0.75,
        };
        let out = synth_rain(&j, &p, 5).unwrap();
        let hit: Vec<usize> = (0..256).filter(|&i| out.data()[i] != 0.0).collect();
        assert!(!hit.is_empty());
        for i in hit {
            for c in 0..3 {
                assert_eq!(out.data()[c * 256 + i], 0.75);
            }
        }
    }

    #[test]
    fn generators_are_deterministic_and_in_range() {
        let j = scene();
        for kind in DegradationKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(kind as u64);
            let spec = DegradationSpec::sample(kind, &mut rng, 32, 32);
            let a = spec.apply(&j).unwrap();
            let b = spec.apply(&j).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, j, "{kind} left the image untouched");
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn manifest_pairs_round_trip() {
        for kind in DegradationKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + kind as u64);
            let spec = DegradationSpec::sample(kind, &mut rng, 64, 64);
            let map: BTreeMap<String, String> = spec.to_pairs().into_iter().collect();
            assert_eq!(DegradationSpec::from_pairs(&map).unwrap(), spec);
        }
        let constant = DegradationSpec {
            degradation: Degradation::Haze(HazeParams {
                airlight: [0.7, 0.8, 0.9],
                beta: 1.5,
                depth: DepthStyle::Constant(0.25),
            }),
            seed: 3,
        };
        let map: BTreeMap<String, String> = constant.to_pairs().into_iter().collect();
        assert_eq!(DegradationSpec::from_pairs(&map).unwrap(), constant);
    }

    #[test]
    fn noise_depth_is_normalized_and_smooth() {
        let d = depth_map(DepthStyle::Noise, 32, 32, &mut ChaCha8Rng::seed_from_u64(1));
        let lo = d.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = d.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
        let max_step = (0..32 * 31).map(|i| (d[i] - d[i + 32]).abs()).fold(0.0f32, f32::max);
        assert!(max_step < 0.25);
    }
}
