//! Procedural clean scenes: a two-tone gradient backdrop with a few flat
//! shapes and a faint texture.

use super::item_rng;
use crate::tensor::Tensor;
use rand::Rng;

pub fn synth_scene(seed: u64, id: &str, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = item_rng(seed, id);
    let mut color = |lo: f32, hi: f32| [0, 1, 2].map(|_| rng.gen_range(lo..hi));
    let top = color(0.3, 0.9);
    let bottom = color(0.05, 0.6);
    let mut planes = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        let t = y as f32 / (h.max(2) - 1) as f32;
        for c in 0..3 {
            let v = top[c] * (1.0 - t) + bottom[c] * t;
            planes[(c * h + y) * w..][..w].fill(v);
        }
    }
    let shapes = rng.gen_range(3..8);
    for _ in 0..shapes {
        let col = [0, 1, 2].map(|_| rng.gen_range(0.0f32..1.0));
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let rx = rng.gen_range(0.08..0.3) * w as f32;
        let ry = rng.gen_range(0.08..0.3) * h as f32;
        let disk = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if disk {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        planes[(c * h + y) * w + x] = col[c];
                    }
                }
            }
        }
    }
    let (fx, fy) = (rng.gen_range(0.2f32..0.8), rng.gen_range(0.2f32..0.8));
    let amp = rng.gen_range(0.0f32..0.06);
    for (i, v) in planes.iter_mut().enumerate() {
        let (y, x) = ((i / w) % h, i % w);
        *v = (*v + amp * (fx * x as f32).sin() * (fy * y as f32).cos()).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, 3, h, w], planes).expect("scene shape")
}
