//! Paired crops and flips. The same decision is applied to both images so
//! degraded and clean stay pixel-aligned.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

pub fn crop_at<T: Scalar>(img: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = img.shape().nchw()?;
    if top + height > h || left + width > w {
        return Err(Error::contract(format!(
            "crop {height}x{width} at ({top},{left}) exceeds {}",
            img.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * c * height * width);
    for p in 0..n * c {
        for y in top..top + height {
            out.extend_from_slice(&img.data()[(p * h + y) * w + left..][..width]);
        }
    }
    Tensor::new(&[n, c, height, width], out)
}

pub fn flip_horizontal<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let w = img.dims()[img.dims().len() - 1];
    let mut out = img.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

pub fn flip_vertical<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    let d = img.dims();
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h / 2 {
            let (upper, lower) = plane.split_at_mut((h - 1 - y) * w);
            upper[y * w..(y + 1) * w].swap_with_slice(&mut lower[..w]);
        }
    }
    out
}

/// Random `patch x patch` crop, then independent horizontal and vertical
/// flips with probability one half each.
pub fn augment<T: Scalar>(
    degraded: &Tensor<T>,
    clean: &Tensor<T>,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if degraded.shape() != clean.shape() {
        return Err(Error::contract(format!(
            "pair extents differ: {} vs {}",
            degraded.shape(),
            clean.shape()
        )));
    }
    let (_, _, h, w) = degraded.shape().nchw()?;
    if patch == 0 || patch > h || patch > w {
        return Err(Error::contract(format!("patch {patch} does not fit a {h}x{w} image")));
    }
    let top = rng.gen_range(0..=h - patch);
    let left = rng.gen_range(0..=w - patch);
    let (hflip, vflip) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let apply = |img: &Tensor<T>| -> Result<Tensor<T>> {
        let mut out = crop_at(img, top, left, patch, patch)?;
        if hflip {
            out = flip_horizontal(&out);
        }
        if vflip {
            out = flip_vertical(&out);
        }
        Ok(out)
    };
    Ok((apply(degraded)?, apply(clean)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flips_are_involutions() {
        let img = synth_scene(0, "f", 7, 5);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_vertical(&img), img);
        let v = flip_vertical(&img);
        assert_eq!(v.at(&[0, 1, 0, 3]), img.at(&[0, 1, 6, 3]));
        let hz = flip_horizontal(&img);
        assert_eq!(hz.at(&[0, 2, 4, 0]), img.at(&[0, 2, 4, 4]));
    }

    #[test]
    fn pairs_stay_aligned_and_offsets_are_seeded() {
        let img = synth_scene(0, "a", 20, 20);
        for seed in 0..10 {
            let (d, c) = augment(&img, &img, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(d, c);
            let again = augment(&img, &img, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(d, again.0);
        }
        assert!(augment(&img, &img, 21, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
