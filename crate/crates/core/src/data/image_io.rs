//! 8-bit RGB file I/O. Values map to `v / 255` on load and are quantized
//! with round-half-up on save.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let (n, c, h, w) = img.shape().nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::contract(format!("can only save [1x3xHxW] images, got {}", img.shape())));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| quantize(img.data()[(c * h + y as usize) * w + x as usize]);
        image::Rgb([at(0), at(1), at(2)])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let levels = Tensor::<f32>::from_fn(&[1, 3, 16, 16], |i| (i % 256) as f32 / 255.0).unwrap();
        save_image(&levels, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), levels);

        let black = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        save_image(&black, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), black);

        let img = synth_scene(9, "r", 16, 16);
        save_image(&img, &path).unwrap();
        assert!(load_image(&path).unwrap().max_abs_diff(&img).unwrap() <= 1.0 / 510.0 + 1e-7);
    }

    #[test]
    fn quantization_error_is_at_most_half_a_level() {
        // every value between consecutive levels, at a fine grid
        for k in 0..255 {
            for j in 0..=64 {
                let v = (k as f32 + j as f32 / 64.0) / 255.0;
                let q = quantize(v) as f32 / 255.0;
                assert!((q - v).abs() <= 1.0 / 510.0 + 1e-7, "{v}");
            }
        }
        assert_eq!((quantize(0.0), quantize(1.0), quantize(2.0)), (0, 255, 255));
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_image(Path::new("/nonexistent/pic.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/pic.png"));
    }
}
