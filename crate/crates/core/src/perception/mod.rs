//! Frozen synthetic vision-language frontend.
//!
//! An egocentric 2.5D rasterizer, a deterministic patch encoder, and a
//! templated instruction embedder stand in for a large pretrained backbone.
//! Every path here is frozen: the same inputs produce bit-identical outputs
//! for the lifetime of the program, and nothing in this module is trained.

mod augment;
mod encode;
mod render;

pub use augment::{augment_image, augment_with_ops, AugmentOp};
pub use encode::{encode_patches, patch_raw_features, PatchFeatures, RAW_FEATURE_DIM};
pub use render::{render_egocentric, RenderConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Prompt, RoomLayout};

/// Square raster edge length in pixels.
pub const IMG_SIZE: usize = 64;
/// Patches per image axis.
pub const PATCH_GRID: usize = 8;
/// Pixels per patch axis.
pub const PATCH_SIZE: usize = IMG_SIZE / PATCH_GRID;
/// Patch count per image.
pub const NUM_PATCHES: usize = PATCH_GRID * PATCH_GRID;
/// Patch feature width after the frozen mixing map.
pub const D_IMG: usize = 64;
/// Instruction embedding width.
pub const D_TXT: usize = 64;

/// Brightness scales used by the lighting perturbation sweep, from very low
/// to very high; index 2 is the training default.
pub const BRIGHTNESS_LEVELS: [f32; 5] = [0.4, 0.7, 1.0, 1.3, 1.6];
/// Camera height offsets (m) used by the camera perturbation sweep.
pub const CAMERA_OFFSETS: [f32; 2] = [-0.2, 0.2];

/// A 64x64 RGB image with interleaved channels and values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct EgoRaster {
    pixels: Vec<f32>,
}

impl EgoRaster {
    /// A raster filled with a constant color.
    pub fn filled(rgb: [f32; 3]) -> Self {
        let mut pixels = vec![0.0; IMG_SIZE * IMG_SIZE * 3];
        for p in pixels.chunks_exact_mut(3) {
            p.copy_from_slice(&rgb);
        }
        EgoRaster { pixels }
    }

    pub fn from_pixels(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMG_SIZE * IMG_SIZE * 3 {
            return Err(Error::ShapeMismatch(format!(
                "raster needs {} values, got {}",
                IMG_SIZE * IMG_SIZE * 3,
                pixels.len()
            )));
        }
        Ok(EgoRaster { pixels })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    /// Channel `c` of pixel (`x`, `y`), with `y` counted from the top row.
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * IMG_SIZE + x) * 3 + c]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * IMG_SIZE + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Multiplies every value by `scale` and clips the result to [0, 1].
    pub fn scale_and_clip(&mut self, scale: f32) {
        for v in &mut self.pixels {
            *v = (*v * scale).clamp(0.0, 1.0);
        }
    }

    pub(crate) fn clip(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at fractional pixel coordinates, clamped to borders.
    pub(crate) fn sample(&self, x: f32, y: f32, c: usize) -> f32 {
        let max = (IMG_SIZE - 1) as f32;
        let x = x.clamp(0.0, max);
        let y = y.clamp(0.0, max);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(IMG_SIZE - 1);
        let y1 = (y0 + 1).min(IMG_SIZE - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
        let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Frozen embedding of one templated instruction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionEmbedding {
    pub vector: Vec<f32>,
    pub category: String,
    pub family: String,
}

/// Uniformly samples one prompt template for a goal category.
///
/// Returns the template index within the goal's prompt table together with
/// the prompt itself. Unknown categories are rejected.
pub fn sample_prompt<'a, R: Rng>(
    layout: &'a RoomLayout,
    category: &str,
    rng: &mut R,
) -> Result<(usize, &'a Prompt)> {
    let goal = layout
        .goals
        .iter()
        .find(|g| g.category == category)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown goal category {category:?}")))?;
    if goal.prompts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "goal category {category:?} has no prompt templates"
        )));
    }
    let idx = rng.gen_range(0..goal.prompts.len());
    Ok((idx, &goal.prompts[idx]))
}

/// FNV-1a, used to derive stable per-string seeds. The stdlib hasher is not
/// guaranteed stable across releases, so the constant is spelled out here.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn seeded_unit_vector(tag: &str, text: &str) -> Vec<f32> {
    use rand::SeedableRng;
    use rand_distr::StandardNormal;
    let seed = fnv1a(format!("{tag}:{text}").as_bytes());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..D_TXT).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v.into_iter().map(|x| x as f32).collect()
}

/// Frozen instruction embedding: a unit vector per goal category plus a
/// smaller offset per template family. The norm stays within [0.92, 1.08].
pub fn embed_instruction(category: &str, family: &str) -> InstructionEmbedding {
    let base = seeded_unit_vector("category", category);
    let offset = seeded_unit_vector("family", family);
    let vector = base
        .iter()
        .zip(&offset)
        .map(|(b, o)| b + 0.08 * o)
        .collect();
    InstructionEmbedding {
        vector,
        category: category.to_string(),
        family: family.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_category_and_family_embed_identically() {
        let a = embed_instruction("sofa", "plain");
        let b = embed_instruction("sofa", "plain");
        assert_eq!(a.vector, b.vector);
        let c = embed_instruction("sofa", "color");
        assert_ne!(a.vector, c.vector);
    }

    #[test]
    fn embedding_norm_stays_within_construction_bound() {
        for cat in ["sofa", "desk", "tv", "door", "plant", "lamp", "aquarium"] {
            for fam in ["plain", "color", "spatial"] {
                let e = embed_instruction(cat, fam);
                let norm = e.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((0.9..=1.1).contains(&norm), "{cat}/{fam}: {norm}");
            }
        }
    }

    #[test]
    fn category_base_vectors_are_nearly_orthogonal() {
        let mut cosines = Vec::new();
        for i in 0..250 {
            let a = seeded_unit_vector("category", &format!("cat-{i}"));
            let b = seeded_unit_vector("category", &format!("cat-{}", i + 1000));
            let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            cosines.push(dot.abs());
        }
        cosines.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p99 = cosines[(cosines.len() as f32 * 0.99) as usize - 1];
        assert!(p99 < 0.4, "99th percentile |cos| = {p99}");
    }

    #[test]
    fn prompt_sampling_is_uniform_and_rejects_unknown_categories() {
        let layout = crate::sim::room_a();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(sample_prompt(&layout, "spaceship", &mut rng).is_err());

        let category = &layout.goals[0].category;
        let n_templates = layout.goals[0].prompts.len();
        let mut counts = vec![0u32; n_templates];
        let draws = 10_000;
        for _ in 0..draws {
            let (idx, prompt) = sample_prompt(&layout, category, &mut rng).unwrap();
            assert_eq!(layout.goals[0].prompts[idx].text, prompt.text);
            counts[idx] += 1;
        }
        // Each template frequency within 3 sigma of uniform.
        let p = 1.0 / n_templates as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - draws as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "template {i}: count {c}, dev {dev:.1}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_prompt_sequence() {
        let layout = crate::sim::room_a();
        let seq = |seed: u64| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..40)
                .map(|_| sample_prompt(&layout, "desk", &mut rng).unwrap().0)
                .collect()
        };
        assert_eq!(seq(3), seq(3));
        assert_ne!(seq(3), seq(4));
    }
}
