//! Deterministic 2D differential-drive navigation environment.
//!
//! Two frozen room layouts ship with the crate: Room A for training and
//! in-distribution evaluation, Room B for zero-shot evaluation on mostly
//! novel goal categories. Dynamics are a wheel-level differential drive with
//! first-order velocity tracking, stepped at 60 Hz with a control decimation
//! of 2 (30 Hz control, 15 s episode cap).

mod dynamics;
mod env;
mod layout;
mod reward;

pub use dynamics::step_dynamics;
pub use env::{check_termination, disc_rect_distance, NavEnv, Outcome, Transition};
pub use layout::{room_a, room_b, validate_layout, GoalSpec, Obstacle, Prompt, RoomLayout};
pub use reward::{compute_reward, success_predicate, RewardParams, RewardTerms};

use serde::{Deserialize, Serialize};

/// Robot pose in the world frame; yaw wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f32,
    pub y: f32,
    pub yaw: f32,
}

impl Pose2D {
    pub fn new(x: f32, y: f32, yaw: f32) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }
}

/// Full kinematic state of the robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2D,
    /// Body-frame planar velocity in m/s; v_y is identically zero for a
    /// differential drive but kept for the observation layout.
    pub body_vel: [f32; 2],
    /// Yaw rate in rad/s.
    pub yaw_rate: f32,
    /// Left and right wheel velocities in rad/s.
    pub wheel_vel: [f32; 2],
}

impl RobotState {
    pub fn at_rest(pose: Pose2D) -> Self {
        Self {
            pose,
            body_vel: [0.0, 0.0],
            yaw_rate: 0.0,
            wheel_vel: [0.0, 0.0],
        }
    }
}

/// Physical and episode constants for the simulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    /// Wheel radius in meters (Jetbot-scale).
    pub wheel_radius: f32,
    /// Distance between the two wheels in meters.
    pub axle_length: f32,
    /// Collision disc radius in meters.
    pub robot_radius: f32,
    /// Multiplier from action units to wheel rad/s targets.
    pub action_scale: f32,
    /// Wheel speed limit in rad/s, applied to targets and state.
    pub wheel_speed_limit: f32,
    /// First-order velocity tracking gain (1/s).
    pub wheel_damping: f32,
    /// Physics sub-step in seconds.
    pub sim_dt: f32,
    /// Physics sub-steps per control step.
    pub decimation: u32,
    /// Episode cap in control steps (15 s at 30 Hz control).
    pub max_steps: u32,
    /// Success distance threshold in meters.
    pub success_dist: f32,
    /// Success bearing threshold in radians.
    pub success_angle: f32,
    /// Displacement of goals toward the room center in meters.
    pub goal_clearance: f32,
    /// Margin kept from the bounds when clamping goals.
    pub bounds_margin: f32,
    /// Half-width of the uniform yaw noise applied at reset, radians.
    pub yaw_noise: f32,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            wheel_radius: 0.03,
            axle_length: 0.10,
            robot_radius: 0.12,
            action_scale: 40.0,
            wheel_speed_limit: 20.0,
            wheel_damping: 10.0,
            sim_dt: 1.0 / 60.0,
            decimation: 2,
            max_steps: 450,
            success_dist: 1.5,
            success_angle: std::f32::consts::FRAC_PI_6,
            goal_clearance: 0.3,
            bounds_margin: 0.1,
            yaw_noise: 0.5,
        }
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f32) -> f32 {
    let mut x = a % std::f32::consts::TAU;
    if x > std::f32::consts::PI {
        x -= std::f32::consts::TAU;
    } else if x <= -std::f32::consts::PI {
        x += std::f32::consts::TAU;
    }
    x
}

/// Rotates a world-frame offset into the body frame of `pose`.
pub fn world_to_body(pose: &Pose2D, wx: f32, wy: f32) -> [f32; 2] {
    let dx = wx - pose.x;
    let dy = wy - pose.y;
    let (s, c) = pose.yaw.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Bearing from the robot heading to a world point, in (-pi, pi].
pub fn bearing_to(pose: &Pose2D, wx: f32, wy: f32) -> f32 {
    let b = world_to_body(pose, wx, wy);
    if b[0] == 0.0 && b[1] == 0.0 {
        // On top of the target the bearing is undefined; treat as aligned.
        0.0
    } else {
        b[1].atan2(b[0])
    }
}
