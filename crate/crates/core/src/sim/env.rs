//! Episode loop: reset, step, termination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    bearing_to, compute_reward, step_dynamics, success_predicate, Obstacle, Pose2D, RewardParams,
    RewardTerms, RobotState, RoomLayout, SimParams,
};
use crate::error::{Error, Result};

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

impl Outcome {
    /// Timeouts are truncations: the episode was cut short without the task
    /// resolving, so bootstrapped values remain meaningful.
    pub fn is_truncation(&self) -> bool {
        matches!(self, Outcome::Timeout)
    }
}

/// Result of stepping the environment once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: RobotState,
    pub reward: RewardTerms,
    pub outcome: Option<Outcome>,
}

/// Distance from a point to an axis-aligned rectangle, zero inside.
pub fn disc_rect_distance(x: f32, y: f32, rect: &[f32; 4]) -> f32 {
    let dx = x - x.clamp(rect[0], rect[2]);
    let dy = y - y.clamp(rect[1], rect[3]);
    (dx * dx + dy * dy).sqrt()
}

/// Episode termination check with priority success > collision > timeout.
pub fn check_termination(
    state: &RobotState,
    goal: [f32; 2],
    obstacles: &[Obstacle],
    steps: u32,
    p: &SimParams,
) -> Option<Outcome> {
    if success_predicate(state, goal, p) {
        return Some(Outcome::Success);
    }
    if obstacles
        .iter()
        .any(|o| disc_rect_distance(state.pose.x, state.pose.y, &o.rect) < p.robot_radius)
    {
        return Some(Outcome::Collision);
    }
    if steps >= p.max_steps {
        return Some(Outcome::Timeout);
    }
    None
}

/// Navigation environment over one room layout.
///
/// The featurizer's obstacle centroids are injected at construction so the
/// simulator stays independent of how observations are built.
#[derive(Debug, Clone)]
pub struct NavEnv {
    layout: RoomLayout,
    centroids: Vec<[f32; 2]>,
    params: SimParams,
    reward_params: RewardParams,
    state: RobotState,
    goal_index: usize,
    goal_pos: [f32; 2],
    steps: u32,
    done: bool,
}

impl NavEnv {
    pub fn new(
        layout: RoomLayout,
        centroids: Vec<[f32; 2]>,
        params: SimParams,
        reward_params: RewardParams,
    ) -> Result<Self> {
        super::validate_layout(&layout)?;
        let start = layout.start;
        Ok(NavEnv {
            layout,
            centroids,
            params,
            reward_params,
            state: RobotState::at_rest(Pose2D::new(start[0], start[1], 0.0)),
            goal_index: 0,
            goal_pos: [0.0, 0.0],
            steps: 0,
            done: true,
        })
    }

    pub fn layout(&self) -> &RoomLayout {
        &self.layout
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn goal_index(&self) -> usize {
        self.goal_index
    }

    /// World position of the active goal after safe adjustment.
    pub fn goal_position(&self) -> [f32; 2] {
        self.goal_pos
    }

    pub fn centroids(&self) -> &[[f32; 2]] {
        &self.centroids
    }

    /// Starts a new episode with a uniformly sampled goal.
    pub fn reset<R: Rng>(&mut self, rng: &mut R) -> RobotState {
        let idx = rng.gen_range(0..self.layout.goals.len());
        self.reset_to_goal(idx, rng)
            .expect("validated layout has in-range goal indices")
    }

    /// Starts a new episode targeting a specific goal.
    ///
    /// Among a goal's candidate positions the one nearest the start pose is
    /// used, then displaced toward the room center by the goal's clearance.
    /// The robot faces the goal up to uniform yaw noise.
    pub fn reset_to_goal<R: Rng>(&mut self, goal_index: usize, rng: &mut R) -> Result<RobotState> {
        let goal = self
            .layout
            .goals
            .get(goal_index)
            .ok_or_else(|| Error::InvalidArgument(format!("goal index {goal_index} out of range")))?;
        let start = self.layout.start;
        let nearest = goal
            .positions
            .iter()
            .copied()
            .min_by(|a, b| {
                let da = (a[0] - start[0]).hypot(a[1] - start[1]);
                let db = (b[0] - start[0]).hypot(b[1] - start[1]);
                da.partial_cmp(&db).expect("finite candidate distances")
            })
            .expect("validated goals have at least one candidate");
        self.goal_pos = self.layout.safe_goal_position(
            nearest,
            goal.clearance,
            self.params.bounds_margin,
        );
        self.goal_index = goal_index;

        let mut pose = Pose2D::new(start[0], start[1], 0.0);
        let bearing = bearing_to(&pose, self.goal_pos[0], self.goal_pos[1]);
        let noise = if self.params.yaw_noise > 0.0 {
            rng.gen_range(-self.params.yaw_noise..self.params.yaw_noise)
        } else {
            0.0
        };
        pose.yaw = super::wrap_angle(bearing + noise);
        self.state = RobotState::at_rest(pose);
        self.steps = 0;
        self.done = false;
        Ok(self.state)
    }

    /// Advances one control step and scores the transition.
    pub fn step(&mut self, action: [f32; 2]) -> Transition {
        debug_assert!(!self.done, "step called on a finished episode");
        let prev = self.state;
        self.state = step_dynamics(&prev, action, &self.params);
        self.steps += 1;

        let reward = compute_reward(
            &prev,
            &self.state,
            &self.centroids,
            self.goal_pos,
            self.layout.bounds,
            &self.reward_params,
            &self.params,
        );
        let outcome = check_termination(
            &self.state,
            self.goal_pos,
            &self.layout.obstacles,
            self.steps,
            &self.params,
        );
        if outcome.is_some() {
            self.done = true;
        }
        Transition {
            state: self.state,
            reward,
            outcome,
        }
    }
}
