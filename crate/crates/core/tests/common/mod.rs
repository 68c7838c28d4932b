//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use cct::data::{DatasetBundle, Split, CLASS_NAMES};
use cct::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cell-like 28×28×3 images: a stained disk whose hue, radius and texture
/// depend on the class, at a jittered position, over a noisy background.
pub fn cell_images(n: usize, seed: u64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 28 * 28 * 3);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 8;
        let hue = [(label & 1) as f32, ((label >> 1) & 1) as f32, ((label >> 2) & 1) as f32];
        let radius = 4.0 + (label % 4) as f32 * 2.0;
        let freq = 0.4 + 0.3 * (label / 4) as f32;
        let (cy, cx) = (rng.gen_range(11.0..17.0f32), rng.gen_range(11.0..17.0f32));
        for y in 0..28 {
            for x in 0..28 {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let inside = (dy * dy + dx * dx).sqrt() <= radius;
                let texture = 0.1 * ((dy + dx) * freq).sin();
                for h in hue {
                    let base = if inside { 0.25 + 0.5 * h + texture } else { 0.85 };
                    data.push((base + rng.gen_range(-0.08..0.08f32)).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label as u8);
    }
    Split::new(Tensor::new([n, 28, 28, 3], data).unwrap(), labels).unwrap()
}

/// Uint8 round trip of `cell_images`, so in-memory and on-disk data agree.
pub fn quantized(split: &Split) -> Split {
    let images = split.images.map(|v| (v * 255.0).round() / 255.0);
    Split::new(images, split.labels.clone()).unwrap()
}

pub fn cell_bundle(train: usize, val: usize, test: usize, seed: u64) -> DatasetBundle {
    DatasetBundle {
        train: quantized(&cell_images(train, seed)),
        val: quantized(&cell_images(val, seed + 1)),
        test: quantized(&cell_images(test, seed + 2)),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}
