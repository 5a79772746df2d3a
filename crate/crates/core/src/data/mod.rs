//! Images, pyramids, synthetic weather and paired datasets.
//!
//! Images are `[1, 3, H, W]` tensors with values in `[0, 1]`.

pub mod augment;
pub mod dataset;
pub mod image_io;
pub mod scene;
pub mod synth;

pub use augment::{augment, crop_at, flip_horizontal, flip_vertical};
pub use dataset::{PairDataset, PyramidSample, MANIFEST};
pub use image_io::{load_image, save_image};
pub use scene::synth_scene;
pub use synth::{Degradation, DegradationKind, DegradationSpec, DepthStyle, HazeParams, DiskParams, StreakParams};

use crate::error::{Error, Result};
use crate::nn::avg_pool_tensor;
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Level `k` is the input box-filtered by 2x2 `k` times.
pub fn make_pyramid<T: Scalar>(img: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    let (_, _, h, w) = img.shape().nchw()?;
    let m = 1usize << levels.saturating_sub(1);
    if levels == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "a {levels}-level pyramid needs extents divisible by {m}, got {h}x{w}"
        )));
    }
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let next = avg_pool_tensor(out.last().expect("non-empty"), 2);
        out.push(next);
    }
    Ok(out)
}

/// Concatenates equally shaped `[1, C, H, W]` images into `[N, C, H, W]`.
pub fn stack<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("cannot stack zero images"))?;
    let (_, c, h, w) = first.shape().nchw()?;
    let mut data = Vec::with_capacity(images.len() * first.numel());
    let mut n = 0;
    for img in images {
        let (ni, ci, hi, wi) = img.shape().nchw()?;
        if (ci, hi, wi) != (c, h, w) {
            return Err(Error::shape(format!("cannot stack {} with {}", first.shape(), img.shape())));
        }
        n += ni;
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[n, c, h, w], data)
}

/// Generator whose stream depends on both the global seed and the item id,
/// so items can be produced in any order.
pub fn item_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // FNV-1a of the id selects the stream.
    let stream = id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    rng.set_stream(stream);
    rng
}

pub fn clamp_unit(img: &mut Tensor<f32>) {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    #[test]
    fn pyramid_examples() {
        let c = Tensor::<f64>::full(&[1, 3, 8, 8], 0.25).unwrap();
        for level in make_pyramid(&c, 3).unwrap() {
            assert!(level.data().iter().all(|&v| v == 0.25));
        }
        let img = Tensor::<f32>::zeros(&[1, 3, 256, 256]).unwrap();
        let dims: Vec<Vec<usize>> = make_pyramid(&img, 3).unwrap().iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 3, 256, 256], vec![1, 3, 128, 128], vec![1, 3, 64, 64]]);
        let block = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(make_pyramid(&block, 2).unwrap()[1].data(), &[0.5]);
        assert!(make_pyramid(&Tensor::<f32>::zeros(&[1, 3, 6, 8]).unwrap(), 3).is_err());
    }

    #[test]
    fn item_streams_are_independent_of_order() {
        let a: u64 = item_rng(7, "b").gen();
        let _ = item_rng(7, "a").gen::<u64>();
        assert_eq!(a, item_rng(7, "b").gen::<u64>());
        assert_ne!(a, item_rng(7, "c").gen::<u64>());
        assert_ne!(a, item_rng(8, "b").gen::<u64>());
    }

    proptest! {
        #[test]
        fn pyramid_commutes_with_shifts(seed in 0u64..1000, shift in -0.25f64..0.25) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.3..0.7)).unwrap();
            let shifted = img.map(|v| v + shift);
            for (a, b) in make_pyramid(&img, 3).unwrap().iter().zip(make_pyramid(&shifted, 3).unwrap()) {
                prop_assert!(a.zip_map(&b, |x, y| y - x - shift).unwrap().data().iter().all(|d| d.abs() < 1e-12));
            }
        }
    }
}
