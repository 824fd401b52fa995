//! Egocentric 2.5D rasterizer.
//!
//! Obstacles are drawn as colored vertical billboards under a pinhole
//! projection, composited far to near over a flat floor/wall background.
//! The camera sits at the robot pose, looking along its heading.

use serde::{Deserialize, Serialize};

use super::{EgoRaster, IMG_SIZE};
use crate::sim::{world_to_body, RobotState, RoomLayout};

/// Horizontal field of view of the synthetic camera, radians.
const FOV: f32 = 100.0 * std::f32::consts::PI / 180.0;
/// Default camera height above the floor, meters.
const CAMERA_BASE_HEIGHT: f32 = 0.25;
/// Distance at which the floor band meets the wall band, meters.
const BACKGROUND_SEAM_DIST: f32 = 1.5;
/// Obstacles closer than this to the image plane are not drawn.
const NEAR_PLANE: f32 = 0.05;

const WALL_COLOR: [f32; 3] = [0.62, 0.64, 0.66];
const FLOOR_COLOR: [f32; 3] = [0.30, 0.27, 0.24];

/// Pure rendering knobs; no hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Added to the default camera height, meters.
    pub camera_height_offset: f32,
    /// Multiplies every channel before the final clip to [0, 1].
    pub brightness: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            camera_height_offset: 0.0,
            brightness: 1.0,
        }
    }
}

fn focal_px() -> f32 {
    (IMG_SIZE as f32 / 2.0) / (FOV / 2.0).tan()
}

/// Renders the scene from the robot's onboard camera.
pub fn render_egocentric(state: &RobotState, layout: &RoomLayout, config: &RenderConfig) -> EgoRaster {
    let f = focal_px();
    let h_cam = CAMERA_BASE_HEIGHT + config.camera_height_offset;
    let center = IMG_SIZE as f32 / 2.0;

    // Fixed background bands: wall above the seam, floor below. The seam is
    // where the floor at the reference distance projects, so raising the
    // camera pushes it down the image.
    let seam = center + f * h_cam / BACKGROUND_SEAM_DIST;
    let mut raster = EgoRaster::filled(WALL_COLOR);
    for y in 0..IMG_SIZE {
        if (y as f32 + 0.5) >= seam {
            for x in 0..IMG_SIZE {
                raster.set(x, y, FLOOR_COLOR);
            }
        }
    }

    // Painter's order: farthest billboard first so nearer ones occlude it.
    let mut order: Vec<(f32, usize)> = layout
        .obstacles
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let cx = (o.rect[0] + o.rect[2]) / 2.0;
            let cy = (o.rect[1] + o.rect[3]) / 2.0;
            let d = (cx - state.pose.x).hypot(cy - state.pose.y);
            (d, i)
        })
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    for (_, i) in order {
        let o = &layout.obstacles[i];
        let cx = (o.rect[0] + o.rect[2]) / 2.0;
        let cy = (o.rect[1] + o.rect[3]) / 2.0;
        let body = world_to_body(&state.pose, cx, cy);
        let (fwd, left) = (body[0], body[1]);
        if fwd < NEAR_PLANE {
            continue;
        }
        let half_w = ((o.rect[2] - o.rect[0]) + (o.rect[3] - o.rect[1])) / 4.0;
        let u = center - f * left / fwd;
        let u_half = f * half_w / fwd;
        let v_top = center - f * (o.height - h_cam) / fwd;
        let v_bottom = center + f * h_cam / fwd;

        let x_lo = (u - u_half).max(0.0) as usize;
        let x_hi = ((u + u_half).min(IMG_SIZE as f32 - 1.0)).max(0.0) as usize;
        let y_lo = v_top.max(0.0) as usize;
        let y_hi = (v_bottom.min(IMG_SIZE as f32 - 1.0)).max(0.0) as usize;
        for y in y_lo..=y_hi.min(IMG_SIZE - 1) {
            if (y as f32 + 0.5) < v_top || (y as f32 + 0.5) > v_bottom {
                continue;
            }
            for x in x_lo..=x_hi.min(IMG_SIZE - 1) {
                if (x as f32 + 0.5) < u - u_half || (x as f32 + 0.5) > u + u_half {
                    continue;
                }
                raster.set(x, y, o.color);
            }
        }
    }

    raster.scale_and_clip(config.brightness);
    raster
}
