//! Image quality metrics on `[N, C, H, W]` tensors with values in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    Rgb,
    /// Luma only.
    Y,
}

/// BT.601 luma, written as `G + 0.299 (R - G) + 0.114 (B - G)` so that
/// grey stays exactly grey.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.shape().nchw()?;
    if c != 3 {
        return Err(Error::contract(format!("luma needs 3 channels, got {}", img.shape())));
    }
    let plane = h * w;
    let (kr, kb) = (T::lit(0.299), T::lit(0.114));
    let mut out = Vec::with_capacity(n * plane);
    for img in img.data().chunks(3 * plane) {
        let (r, rest) = img.split_at(plane);
        let (g, b) = rest.split_at(plane);
        out.extend((0..plane).map(|i| g[i] + kr * (r[i] - g[i]) + kb * (b[i] - g[i])));
    }
    Tensor::new(&[n, 1, h, w], out)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("metric operands differ: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at
/// [`PSNR_CAP`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: ChannelMode) -> Result<f64> {
    same_shape(a, b)?;
    let err = match mode {
        ChannelMode::Rgb => mse(a, b)?,
        ChannelMode::Y => mse(&rgb_to_y(a)?, &rgb_to_y(b)?)?,
    };
    if err == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * err.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of one plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local structural similarity over all windows, channels and
/// images.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (_, _, h, w) = a.shape().nchw()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let g = gaussian_window();
    let plane = h * w;
    let (mut total, mut count) = (0.0, 0usize);
    for (pa, pb) in a.data().chunks(plane).zip(b.data().chunks(plane)) {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let xx = filter_valid(&x.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, &g);
        let yy = filter_valid(&y.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, &g);
        let xy = filter_valid(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>(), h, w, &g);
        for i in 0..mx.len() {
            let (ma, mb) = (mx[i], my[i]);
            let va = xx[i] - ma * ma;
            let vb = yy[i] - mb * mb;
            let cov = xy[i] - ma * mb;
            let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_| rng.gen_range(lo..hi)).unwrap()
    }

    #[test]
    fn luma_anchors() {
        let px = |r: f64, g: f64, b: f64| rgb_to_y(&Tensor::new(&[1, 3, 1, 1], vec![r, g, b]).unwrap()).unwrap().data()[0];
        assert_eq!(px(1.0, 1.0, 1.0), 1.0);
        assert_eq!(px(1.0, 0.0, 0.0), 0.299);
        assert_eq!(px(0.0, 0.0, 0.0), 0.0);
        assert!((px(0.2, 0.5, 0.9) - (0.299 * 0.2 + 0.587 * 0.5 + 0.114 * 0.9)).abs() < 1e-15);
        assert!(rgb_to_y(&Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn psnr_anchors() {
        let a = random(0, &[1, 3, 8, 8], 0.0, 0.9);
        assert_eq!(psnr(&a, &a, ChannelMode::Rgb).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, ChannelMode::Rgb).unwrap() - 20.0).abs() < 1e-6);
        let white = Tensor::<f64>::full(&[1, 3, 4, 4], 1.0).unwrap();
        let black = Tensor::<f64>::zeros(&[1, 3, 4, 4]).unwrap();
        assert_eq!(psnr(&white, &black, ChannelMode::Y).unwrap(), 0.0);
        let grey = Tensor::<f64>::full(&[1, 3, 8, 8], 0.5).unwrap();
        assert!(psnr(&a, &grey, ChannelMode::Rgb).unwrap() < PSNR_CAP);
        assert!(psnr(&a, &Tensor::zeros(&[1, 3, 8, 4]).unwrap(), ChannelMode::Rgb).is_err());
    }

    #[test]
    fn psnr_falls_as_noise_grows() {
        let a = random(1, &[1, 3, 16, 16], 0.2, 0.8);
        let noise = random(2, &[1, 3, 16, 16], -1.0, 1.0);
        let mut last = f64::INFINITY;
        for k in 1..=10 {
            let amp = 0.01 * k as f64;
            let b = a.zip_map(&noise, |x, n| x + amp * n).unwrap();
            let p = psnr(&a, &b, ChannelMode::Rgb).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_anchors() {
        let zero = Tensor::<f64>::zeros(&[1, 3, 16, 16]).unwrap();
        let one = Tensor::<f64>::full(&[1, 3, 16, 16], 1.0).unwrap();
        let c1 = 1e-4;
        assert!((ssim(&zero, &one).unwrap() - c1 / (1.0 + c1)).abs() < 1e-15);
        assert!(ssim(&zero, &Tensor::zeros(&[1, 3, 10, 16]).unwrap()).is_err());
        let w: f64 = gaussian_window().iter().sum();
        assert!((w - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ssim_is_one_on_itself_and_symmetric(seed in 0u64..1000) {
            let a = random(seed, &[1, 3, 12, 13], 0.0, 1.0);
            let b = random(seed + 7, &[1, 3, 12, 13], 0.0, 1.0);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
