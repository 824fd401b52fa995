//! Offline image augmentation for adapter training.
//!
//! Draws 2 to 4 distinct transforms per call from a fixed menu of eight:
//! cropping, color jitter, contrast, sharpness, blurring, perspective
//! distortion, noise injection, and random erasing. Everything is seeded,
//! and the final raster is clipped back to [0, 1].

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{EgoRaster, IMG_SIZE};

/// One augmentation primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Crop,
    ColorJitter,
    Contrast,
    Sharpness,
    Blur,
    Perspective,
    Noise,
    RandomErase,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 8] = [
        AugmentOp::Crop,
        AugmentOp::ColorJitter,
        AugmentOp::Contrast,
        AugmentOp::Sharpness,
        AugmentOp::Blur,
        AugmentOp::Perspective,
        AugmentOp::Noise,
        AugmentOp::RandomErase,
    ];
}

fn resample<F>(src: &EgoRaster, mut map: F) -> EgoRaster
where
    F: FnMut(f32, f32) -> (f32, f32),
{
    let mut out = src.clone();
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let (sx, sy) = map(x as f32, y as f32);
            out.set(x, y, [src.sample(sx, sy, 0), src.sample(sx, sy, 1), src.sample(sx, sy, 2)]);
        }
    }
    out
}

fn crop<R: Rng>(src: &EgoRaster, rng: &mut R) -> EgoRaster {
    let scale = rng.gen_range(0.7..0.95f32);
    let span = (IMG_SIZE as f32 - 1.0) * scale;
    let x0 = rng.gen_range(0.0..(IMG_SIZE as f32 - 1.0 - span));
    let y0 = rng.gen_range(0.0..(IMG_SIZE as f32 - 1.0 - span));
    let step = span / (IMG_SIZE as f32 - 1.0);
    resample(src, |x, y| (x0 + x * step, y0 + y * step))
}

fn color_jitter<R: Rng>(src: &mut EgoRaster, rng: &mut R) {
    let mul: [f32; 3] = [
        rng.gen_range(0.8..1.2),
        rng.gen_range(0.8..1.2),
        rng.gen_range(0.8..1.2),
    ];
    let add: [f32; 3] = [
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
    ];
    for px in src.pixels_mut().chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = px[c] * mul[c] + add[c];
        }
    }
}

fn contrast<R: Rng>(src: &mut EgoRaster, rng: &mut R) {
    let c = rng.gen_range(0.7..1.3f32);
    let mean = src.pixels().iter().map(|v| *v as f64).sum::<f64>() / src.pixels().len() as f64;
    let mean = mean as f32;
    for v in src.pixels_mut() {
        *v = (*v - mean) * c + mean;
    }
}

fn box_blur(src: &EgoRaster) -> EgoRaster {
    let mut out = src.clone();
    let last = IMG_SIZE as isize - 1;
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let mut acc = [0.0f32; 3];
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let sx = (x as isize + dx).clamp(0, last) as usize;
                    let sy = (y as isize + dy).clamp(0, last) as usize;
                    for c in 0..3 {
                        acc[c] += src.get(sx, sy, c);
                    }
                }
            }
            out.set(x, y, [acc[0] / 9.0, acc[1] / 9.0, acc[2] / 9.0]);
        }
    }
    out
}

fn sharpness<R: Rng>(src: &EgoRaster, rng: &mut R) -> EgoRaster {
    let alpha = rng.gen_range(0.5..1.5f32);
    let blurred = box_blur(src);
    let mut out = src.clone();
    for (o, b) in out.pixels_mut().iter_mut().zip(blurred.pixels()) {
        *o += alpha * (*o - b);
    }
    out
}

fn blur<R: Rng>(src: &EgoRaster, rng: &mut R) -> EgoRaster {
    let passes = rng.gen_range(1..=2);
    let mut out = src.clone();
    for _ in 0..passes {
        out = box_blur(&out);
    }
    out
}

fn perspective<R: Rng>(src: &EgoRaster, rng: &mut R) -> EgoRaster {
    // Horizontal keystone: columns fan out or pinch in with image row.
    let k = rng.gen_range(-0.15..0.15f32);
    let c = (IMG_SIZE as f32 - 1.0) / 2.0;
    resample(src, |x, y| {
        let scale = 1.0 + k * (y - c) / IMG_SIZE as f32;
        (c + (x - c) * scale, y)
    })
}

fn noise<R: Rng>(src: &mut EgoRaster, rng: &mut R) {
    let sigma = rng.gen_range(0.01..0.05f32);
    for v in src.pixels_mut() {
        let n: f32 = rng.sample(StandardNormal);
        *v += sigma * n;
    }
}

fn random_erase<R: Rng>(src: &mut EgoRaster, rng: &mut R) {
    let w = rng.gen_range(8..=24usize);
    let h = rng.gen_range(8..=24usize);
    let x0 = rng.gen_range(0..=IMG_SIZE - w);
    let y0 = rng.gen_range(0..=IMG_SIZE - h);
    let fill = rng.gen_range(0.0..1.0f32);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            src.set(x, y, [fill, fill, fill]);
        }
    }
}

/// Applies the given ops in order, then clips. An empty list is the identity.
pub fn augment_with_ops<R: Rng>(raster: &EgoRaster, ops: &[AugmentOp], rng: &mut R) -> EgoRaster {
    let mut img = raster.clone();
    for op in ops {
        img = match op {
            AugmentOp::Crop => crop(&img, rng),
            AugmentOp::ColorJitter => {
                color_jitter(&mut img, rng);
                img
            }
            AugmentOp::Contrast => {
                contrast(&mut img, rng);
                img
            }
            AugmentOp::Sharpness => sharpness(&img, rng),
            AugmentOp::Blur => blur(&img, rng),
            AugmentOp::Perspective => perspective(&img, rng),
            AugmentOp::Noise => {
                noise(&mut img, rng);
                img
            }
            AugmentOp::RandomErase => {
                random_erase(&mut img, rng);
                img
            }
        };
    }
    img.clip();
    img
}

/// Draws 2 to 4 distinct transforms and applies them in draw order.
pub fn augment_image<R: Rng>(raster: &EgoRaster, rng: &mut R) -> EgoRaster {
    let count = rng.gen_range(2..=4usize);
    let mut pool = AugmentOp::ALL;
    let (chosen, _) = pool.partial_shuffle(rng, count);
    let ops: Vec<AugmentOp> = chosen.to_vec();
    augment_with_ops(raster, &ops, rng)
}
