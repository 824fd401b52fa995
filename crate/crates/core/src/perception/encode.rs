//! Deterministic patch encoder.
//!
//! Each 8x8 patch is summarized by hand-crafted statistics (mean color, a
//! 12-bin color histogram, an edge-density proxy, and the patch center),
//! zero-padded to 64 values, then passed through a frozen random orthogonal
//! mixing map so downstream heads cannot cherry-pick named coordinates.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EgoRaster, D_IMG, NUM_PATCHES, PATCH_GRID, PATCH_SIZE};
use crate::tensor::{matmul_acc, Tensor};

/// Meaningful prefix width of the raw (pre-mixing) patch vector.
pub const RAW_FEATURE_DIM: usize = 18;

const HIST_BINS: usize = 4;
const MIXING_SEED: u64 = 0x5eed_f00d;

/// Frozen patch embeddings for one raster, shape `NUM_PATCHES` x `D_IMG`.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    pub features: Tensor,
}

impl PatchFeatures {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features.data()[i * D_IMG..(i + 1) * D_IMG]
    }
}

fn mixing_map() -> &'static Tensor {
    static MAP: OnceLock<Tensor> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(MIXING_SEED);
        Tensor::orthogonal(D_IMG, D_IMG, 1.0, &mut rng)
    })
}

/// Raw per-patch statistics before the mixing map, `NUM_PATCHES` x `D_IMG`
/// with zeros past `RAW_FEATURE_DIM`.
///
/// Layout per patch: mean RGB (3), per-channel 4-bin histograms (12),
/// edge density (1), normalized patch center (2).
pub fn patch_raw_features(raster: &EgoRaster) -> Vec<f32> {
    let mut out = vec![0.0f32; NUM_PATCHES * D_IMG];
    for prow in 0..PATCH_GRID {
        for pcol in 0..PATCH_GRID {
            let patch = prow * PATCH_GRID + pcol;
            let base = patch * D_IMG;
            let x0 = pcol * PATCH_SIZE;
            let y0 = prow * PATCH_SIZE;

            let mut mean = [0.0f64; 3];
            let mut hist = [0.0f32; 3 * HIST_BINS];
            for y in y0..y0 + PATCH_SIZE {
                for x in x0..x0 + PATCH_SIZE {
                    for c in 0..3 {
                        let v = raster.get(x, y, c);
                        mean[c] += v as f64;
                        let bin = ((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                        hist[c * HIST_BINS + bin] += 1.0;
                    }
                }
            }
            let n = (PATCH_SIZE * PATCH_SIZE) as f32;
            for c in 0..3 {
                out[base + c] = (mean[c] / n as f64) as f32;
            }
            for (i, h) in hist.iter().enumerate() {
                out[base + 3 + i] = h / n;
            }

            let intensity =
                |x: usize, y: usize| (raster.get(x, y, 0) + raster.get(x, y, 1) + raster.get(x, y, 2)) / 3.0;
            let mut edge = 0.0f64;
            let mut pairs = 0u32;
            for y in y0..y0 + PATCH_SIZE {
                for x in x0..x0 + PATCH_SIZE {
                    if x + 1 < x0 + PATCH_SIZE {
                        edge += (intensity(x + 1, y) - intensity(x, y)).abs() as f64;
                        pairs += 1;
                    }
                    if y + 1 < y0 + PATCH_SIZE {
                        edge += (intensity(x, y + 1) - intensity(x, y)).abs() as f64;
                        pairs += 1;
                    }
                }
            }
            out[base + 15] = (edge / pairs as f64) as f32;
            out[base + 16] = (pcol as f32 + 0.5) / PATCH_GRID as f32;
            out[base + 17] = (prow as f32 + 0.5) / PATCH_GRID as f32;
        }
    }
    out
}

/// Encodes a raster into frozen patch features via the orthogonal mixing map.
pub fn encode_patches(raster: &EgoRaster) -> PatchFeatures {
    let raw = patch_raw_features(raster);
    let map = mixing_map();
    let mut mixed = vec![0.0f32; NUM_PATCHES * D_IMG];
    matmul_acc(&raw, map.data(), NUM_PATCHES, D_IMG, D_IMG, &mut mixed);
    PatchFeatures {
        features: Tensor::new(vec![NUM_PATCHES, D_IMG], mixed).expect("fixed shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_raster_concentrates_histograms_in_the_lowest_bin() {
        let raw = patch_raw_features(&EgoRaster::filled([0.0, 0.0, 0.0]));
        for patch in 0..NUM_PATCHES {
            let base = patch * D_IMG;
            for c in 0..3 {
                assert_eq!(raw[base + c], 0.0);
                assert_eq!(raw[base + 3 + c * HIST_BINS], 1.0);
                for b in 1..HIST_BINS {
                    assert_eq!(raw[base + 3 + c * HIST_BINS + b], 0.0);
                }
            }
            assert_eq!(raw[base + 15], 0.0);
        }
    }

    #[test]
    fn identical_rasters_encode_identically() {
        let room = crate::sim::room_a();
        let state = crate::sim::RobotState::at_rest(crate::sim::Pose2D { x: 0.0, y: 0.0, yaw: 0.0 });
        let r = super::super::render_egocentric(&state, &room, &Default::default());
        let a = encode_patches(&r);
        let b = encode_patches(&r.clone());
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn uniform_brightness_shift_moves_mean_color_linearly() {
        let base = EgoRaster::filled([0.4, 0.45, 0.35]);
        let mut shifted = base.clone();
        for v in shifted.pixels_mut() {
            *v += 0.1;
        }
        let a = patch_raw_features(&base);
        let b = patch_raw_features(&shifted);
        for patch in 0..NUM_PATCHES {
            for c in 0..3 {
                let d = b[patch * D_IMG + c] - a[patch * D_IMG + c];
                assert!((d - 0.1).abs() < 1e-5, "patch {patch} channel {c}: {d}");
            }
        }
    }

    #[test]
    fn mixing_map_is_an_isometry() {
        let room = crate::sim::room_a();
        let state = crate::sim::RobotState::at_rest(crate::sim::Pose2D { x: 0.0, y: 0.0, yaw: 0.0 });
        let r = super::super::render_egocentric(&state, &room, &Default::default());
        let raw = patch_raw_features(&r);
        let enc = encode_patches(&r);
        for patch in 0..NUM_PATCHES {
            let raw_norm: f32 = raw[patch * D_IMG..(patch + 1) * D_IMG]
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt();
            let enc_norm: f32 = enc
                .row(patch)
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt();
            assert!((raw_norm - enc_norm).abs() < 1e-4, "{raw_norm} vs {enc_norm}");
        }
    }

    #[test]
    fn small_pixel_change_moves_features_by_a_small_bounded_amount() {
        let base = EgoRaster::filled([0.4, 0.4, 0.4]);
        let mut bumped = base.clone();
        let i = (10 * crate::perception::IMG_SIZE + 10) * 3;
        bumped.pixels_mut()[i] += 0.01;
        let a = encode_patches(&base);
        let b = encode_patches(&bumped);
        let delta: f32 = a
            .features
            .data()
            .iter()
            .zip(b.features.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f32>()
            .sqrt();
        assert!(delta > 0.0 && delta < 0.05, "delta {delta}");
    }
}
