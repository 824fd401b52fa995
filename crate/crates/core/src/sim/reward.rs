//! Shaped navigation reward with named components.

use serde::{Deserialize, Serialize};

use super::{bearing_to, RobotState, SimParams};

/// Weights and thresholds for the shaped reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Weight on per-step distance progress.
    pub progress_scale: f32,
    /// Weight on the exponential distance potential.
    pub potential_scale: f32,
    /// Weight on the exponential heading-alignment term.
    pub facing_scale: f32,
    /// Weight on forward speed while facing the goal.
    pub forward_scale: f32,
    /// Penalty weight for proximity to obstacle centroids (negative).
    pub obstacle_scale: f32,
    /// Distance below which the obstacle penalty ramps in, meters.
    pub obstacle_threshold: f32,
    /// Centroids closer than this to the goal are exempt from penalty, meters.
    pub goal_exclusion: f32,
    /// Centroids closer than this to the robot are exempt from penalty, meters.
    pub robot_exclusion: f32,
    /// Flat penalty for leaving the room bounds (negative).
    pub bounds_penalty: f32,
    /// Terminal bonus when the success predicate holds.
    pub success_bonus: f32,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            progress_scale: 15.0,
            potential_scale: 2.0,
            facing_scale: 5.0,
            forward_scale: 0.5,
            obstacle_scale: -3.0,
            obstacle_threshold: 0.5,
            goal_exclusion: 1.5,
            robot_exclusion: 0.3,
            bounds_penalty: -10.0,
            success_bonus: 200.0,
        }
    }
}

/// Per-step reward decomposition. `total` is always the sum of the
/// other seven fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub progress: f32,
    pub potential: f32,
    pub facing: f32,
    pub forward: f32,
    pub obstacle: f32,
    pub bounds: f32,
    pub success: f32,
    pub total: f32,
}

impl RewardTerms {
    fn component_sum(&self) -> f32 {
        self.progress
            + self.potential
            + self.facing
            + self.forward
            + self.obstacle
            + self.bounds
            + self.success
    }
}

/// True when the robot is within the success disc and facing the goal.
pub fn success_predicate(state: &RobotState, goal: [f32; 2], p: &SimParams) -> bool {
    let dx = goal[0] - state.pose.x;
    let dy = goal[1] - state.pose.y;
    let d = (dx * dx + dy * dy).sqrt();
    let bearing = bearing_to(&state.pose, goal[0], goal[1]);
    d < p.success_dist && bearing.abs() < p.success_angle
}

/// Evaluates the seven-term shaped reward for the transition `prev -> cur`.
///
/// Obstacle centroids within `goal_exclusion` of the goal or within
/// `robot_exclusion` of the robot are skipped when computing the proximity
/// penalty, so hugging the target object is never punished.
pub fn compute_reward(
    prev: &RobotState,
    cur: &RobotState,
    centroids: &[[f32; 2]],
    goal: [f32; 2],
    bounds: [f32; 4],
    rp: &RewardParams,
    sp: &SimParams,
) -> RewardTerms {
    let dist = |s: &RobotState| {
        let dx = goal[0] - s.pose.x;
        let dy = goal[1] - s.pose.y;
        (dx * dx + dy * dy).sqrt()
    };
    let d_prev = dist(prev);
    let d = dist(cur);
    let cos_bearing = bearing_to(&cur.pose, goal[0], goal[1]).cos();
    let speed = (cur.body_vel[0] * cur.body_vel[0] + cur.body_vel[1] * cur.body_vel[1]).sqrt();

    let progress = rp.progress_scale * (d_prev - d);
    let potential = -rp.potential_scale * (1.0 - (-d / 5.0).exp()) * 5.0;
    let facing = rp.facing_scale * (cos_bearing.exp() - 1.0);
    let forward = rp.forward_scale * speed * cos_bearing.max(0.0);

    let mut d_min = f32::INFINITY;
    for c in centroids {
        let goal_d = ((c[0] - goal[0]).powi(2) + (c[1] - goal[1]).powi(2)).sqrt();
        if goal_d < rp.goal_exclusion {
            continue;
        }
        let robot_d = ((c[0] - cur.pose.x).powi(2) + (c[1] - cur.pose.y).powi(2)).sqrt();
        if robot_d < rp.robot_exclusion {
            continue;
        }
        d_min = d_min.min(robot_d);
    }
    let obstacle = if d_min.is_finite() {
        let ramp = ((rp.obstacle_threshold - d_min) / rp.obstacle_threshold).clamp(0.0, 1.0);
        rp.obstacle_scale * ramp
    } else {
        0.0
    };

    let inside = cur.pose.x >= bounds[0]
        && cur.pose.x <= bounds[2]
        && cur.pose.y >= bounds[1]
        && cur.pose.y <= bounds[3];
    let bounds_term = if inside { 0.0 } else { rp.bounds_penalty };

    let success = if success_predicate(cur, goal, sp) {
        rp.success_bonus
    } else {
        0.0
    };

    let mut terms = RewardTerms {
        progress,
        potential,
        facing,
        forward,
        obstacle,
        bounds: bounds_term,
        success,
        total: 0.0,
    };
    terms.total = terms.component_sum();
    terms
}
