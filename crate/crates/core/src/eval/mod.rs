//! Closed-loop episode evaluation: SR, SPL, and collision rate.
//!
//! Agents are rolled out greedily (no action noise) for a fixed number of
//! episodes per goal. Every episode is scored against a grid shortest-path
//! oracle so SPL can weight successes by path efficiency, and rendering
//! perturbations can be applied at evaluation time without touching any
//! model parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::TrainedAdapter;
use crate::error::{Error, Result};
use crate::expert::ExpertPolicy;
use crate::featurize::{build_privileged_obs, layout_clusters, ObstacleClusters, NUM_CLUSTERS, OBS_DIM};
use crate::perception::{
    embed_instruction, encode_patches, render_egocentric, RenderConfig, BRIGHTNESS_LEVELS,
    CAMERA_OFFSETS, D_TXT,
};
use crate::sim::{NavEnv, Outcome, RewardParams, RobotState, RoomLayout, SimParams};
use crate::tensor::Tensor;

mod planner;

pub use planner::{PlanGrid, PLAN_RESOLUTION};

/// Episodes per goal used by the paper-style evaluation protocol.
pub const DEFAULT_EPISODES_PER_GOAL: usize = 30;

/// A policy under evaluation.
///
/// Latent adapters need the expert for its frozen action suffix; the
/// action-cloning head carries it too but decodes actions directly. The
/// scripted variant exists for oracle tests and trivial baselines such as a
/// do-nothing agent.
pub enum Agent<'a> {
    /// Privileged expert acting on the full state vector.
    Expert(&'a ExpertPolicy),
    /// Trained adapter acting on rendered pixels and the instruction.
    Adapter {
        head: &'a TrainedAdapter,
        expert: &'a ExpertPolicy,
    },
    /// Fixed function of robot state and goal position.
    Scripted(&'a dyn Fn(&RobotState, [f32; 2]) -> [f32; 2]),
}

impl Agent<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Agent::Expert(_) => "expert",
            Agent::Adapter { head, .. } => head.kind().as_str(),
            Agent::Scripted(_) => "scripted",
        }
    }

    /// Parameter digest used in fingerprints and freeze checks. Scripted
    /// agents have no parameters and hash to a constant.
    fn digest(&self) -> String {
        match self {
            Agent::Expert(p) => format!("expert:{}", p.fingerprint()),
            Agent::Adapter { head, expert } => {
                format!("{}:{}+expert:{}", head.kind(), head.fingerprint(), expert.fingerprint())
            }
            Agent::Scripted(_) => "scripted".into(),
        }
    }
}

/// Outcome of a single evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub collided: bool,
    /// Driven path length in meters, summed over control steps.
    pub path_length: f32,
    /// Shortest-path oracle length to the success disc, meters.
    pub shortest_path: f32,
    pub steps: u32,
    pub goal: u32,
    pub prompt: u32,
}

/// Per-goal slice of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalBreakdown {
    pub category: String,
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub spl: f32,
}

/// Aggregated evaluation of one agent on one layout and render condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub layout: String,
    pub episodes: usize,
    pub episodes_per_goal: usize,
    /// Success rate in percent.
    pub sr: f32,
    /// Success weighted by path length, in [0, 1].
    pub spl: f32,
    /// Collision rate in percent.
    pub collision_rate: f32,
    pub per_goal: Vec<GoalBreakdown>,
    pub render: RenderConfig,
    pub seed: u64,
    /// Digest of agent parameters, layout, episode count, and seed. Render
    /// settings are deliberately excluded so every report of a perturbation
    /// sweep shares one lineage.
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "agent,layout,brightness,camera_offset,episodes,sr,spl,collision_rate,seed,config_fingerprint"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3},{:.4},{:.3},{},{}",
            self.agent,
            self.layout,
            self.render.brightness,
            self.render.camera_height_offset,
            self.episodes,
            self.sr,
            self.spl,
            self.collision_rate,
            self.seed,
            self.config_fingerprint
        )
    }
}

/// Success weighted by normalized inverse path length.
///
/// Each success contributes `l / max(p, l)` where `l` is the shortest-path
/// oracle length and `p` the driven length; failures contribute zero.
pub fn spl(results: &[EpisodeResult]) -> f32 {
    assert!(!results.is_empty(), "SPL of an empty result set");
    let sum: f64 = results
        .iter()
        .map(|r| {
            if r.success {
                r.shortest_path as f64 / r.path_length.max(r.shortest_path) as f64
            } else {
                0.0
            }
        })
        .sum();
    (sum / results.len() as f64) as f32
}

/// Shared per-layout machinery: environment, clusters, planning grid.
struct Runner<'a> {
    layout: &'a RoomLayout,
    clusters: ObstacleClusters,
    grid: PlanGrid,
    env: NavEnv,
    render: RenderConfig,
}

impl<'a> Runner<'a> {
    fn new(layout: &'a RoomLayout, render: RenderConfig) -> Result<Self> {
        let clusters = layout_clusters(layout, NUM_CLUSTERS, 0);
        let params = SimParams::default();
        let grid = PlanGrid::new(layout, PLAN_RESOLUTION, params.robot_radius);
        let env = NavEnv::new(
            layout.clone(),
            clusters.centroids.clone(),
            params,
            RewardParams::default(),
        )?;
        Ok(Runner {
            layout,
            clusters,
            grid,
            env,
            render,
        })
    }

    fn episode(
        &mut self,
        agent: &Agent,
        goal: usize,
        prompt: usize,
        seed: u64,
    ) -> Result<EpisodeResult> {
        let spec = self.layout.goals.get(goal).ok_or_else(|| {
            Error::InvalidArgument(format!("goal index {goal} out of range"))
        })?;
        if prompt >= spec.prompts.len() {
            return Err(Error::InvalidArgument(format!(
                "prompt index {prompt} out of range for goal {:?}",
                spec.category
            )));
        }
        let text = match agent {
            Agent::Adapter { .. } => {
                let embedding =
                    embed_instruction(&spec.category, &spec.prompts[prompt].family);
                Some(Tensor::new(vec![1, D_TXT], embedding.vector.clone())?)
            }
            _ => None,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.env.reset_to_goal(goal, &mut rng)?;
        let goal_pos = self.env.goal_position();
        let shortest = self.grid.geodesic_to_disc(
            self.layout.start,
            goal_pos,
            self.env.params().success_dist,
        )?;

        let mut path_length = 0.0f32;
        let outcome = loop {
            let state = *self.env.state();
            let action = match agent {
                Agent::Expert(policy) => {
                    let obs = build_privileged_obs(&state, goal_pos, &self.clusters);
                    let obs_t = Tensor::new(vec![1, OBS_DIM], obs)?;
                    let mean = policy.forward(&obs_t)?.mean;
                    [mean.data()[0], mean.data()[1]]
                }
                Agent::Adapter { head, expert } => {
                    let raster = render_egocentric(&state, self.layout, &self.render);
                    let patches = encode_patches(&raster);
                    let text = text.as_ref().expect("adapter episodes embed the prompt");
                    let actions = head.predict_actions(expert, &patches.features, text)?;
                    [actions.data()[0], actions.data()[1]]
                }
                Agent::Scripted(f) => f(&state, goal_pos),
            };
            let action = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
            let tr = self.env.step(action);
            let pose = self.env.state().pose;
            path_length += (pose.x - state.pose.x).hypot(pose.y - state.pose.y);
            if let Some(outcome) = tr.outcome {
                break outcome;
            }
        };

        Ok(EpisodeResult {
            success: outcome == Outcome::Success,
            collided: outcome == Outcome::Collision,
            path_length,
            shortest_path: shortest,
            steps: self.env.steps(),
            goal: goal as u32,
            prompt: prompt as u32,
        })
    }
}

/// Runs one evaluation episode against a specific goal and prompt template.
pub fn run_episode(
    agent: &Agent,
    layout: &RoomLayout,
    goal: usize,
    prompt: usize,
    render: &RenderConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    Runner::new(layout, *render)?.episode(agent, goal, prompt, seed)
}

/// Stateless mix of the run seed with episode coordinates.
fn episode_seed(seed: u64, goal: usize, episode: usize) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + goal as u64))
        .wrapping_add(0xbf58_476d_1ce4_e5b9u64.wrapping_mul(1 + episode as u64));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Evaluates an agent over every goal and returns the per-episode traces
/// alongside the aggregate report.
pub fn evaluate_agent_traced(
    agent: &Agent,
    layout: &RoomLayout,
    render: &RenderConfig,
    episodes_per_goal: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<EpisodeResult>)> {
    if episodes_per_goal == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one episode per goal".into(),
        ));
    }
    let digest_before = agent.digest();
    let mut runner = Runner::new(layout, *render)?;
    let mut results = Vec::with_capacity(layout.goals.len() * episodes_per_goal);
    let mut per_goal = Vec::with_capacity(layout.goals.len());
    for g in 0..layout.goals.len() {
        let first = results.len();
        for e in 0..episodes_per_goal {
            let ep_seed = episode_seed(seed, g, e);
            let mut prompt_rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0x70726f_6d7074);
            let prompt = prompt_rng.gen_range(0..layout.goals[g].prompts.len());
            results.push(runner.episode(agent, g, prompt, ep_seed)?);
        }
        let slice = &results[first..];
        per_goal.push(GoalBreakdown {
            category: layout.goals[g].category.clone(),
            episodes: slice.len(),
            successes: slice.iter().filter(|r| r.success).count(),
            collisions: slice.iter().filter(|r| r.collided).count(),
            spl: spl(slice),
        });
    }
    assert_eq!(
        agent.digest(),
        digest_before,
        "evaluation must not mutate agent parameters"
    );

    let n = results.len();
    let successes = results.iter().filter(|r| r.success).count();
    let collisions = results.iter().filter(|r| r.collided).count();
    let mut hasher = Sha256::new();
    hasher.update(digest_before.as_bytes());
    hasher.update(layout.name.as_bytes());
    hasher.update(episodes_per_goal.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    let report = EvalReport {
        agent: agent.name().into(),
        layout: layout.name.clone(),
        episodes: n,
        episodes_per_goal,
        sr: 100.0 * successes as f32 / n as f32,
        spl: spl(&results),
        collision_rate: 100.0 * collisions as f32 / n as f32,
        per_goal,
        render: *render,
        seed,
        config_fingerprint: format!("{:x}", hasher.finalize()),
    };
    Ok((report, results))
}

/// Evaluates an agent over every goal of a layout.
pub fn evaluate_agent(
    agent: &Agent,
    layout: &RoomLayout,
    render: &RenderConfig,
    episodes_per_goal: usize,
    seed: u64,
) -> Result<EvalReport> {
    Ok(evaluate_agent_traced(agent, layout, render, episodes_per_goal, seed)?.0)
}

fn known_level(value: f32, allowed: &[f32]) -> bool {
    allowed.iter().any(|a| (a - value).abs() < 1e-6)
}

/// Runs one evaluation per render condition with a shared seed.
///
/// Conditions must come from the published sweep grid: brightness levels
/// plus camera offsets including zero. Models are untouched; only the
/// evaluation-time renderer changes.
pub fn perturbation_sweep(
    agent: &Agent,
    layout: &RoomLayout,
    conditions: &[RenderConfig],
    episodes_per_goal: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let mut offsets = vec![0.0f32];
    offsets.extend_from_slice(&CAMERA_OFFSETS);
    for c in conditions {
        if !known_level(c.brightness, &BRIGHTNESS_LEVELS) {
            return Err(Error::InvalidArgument(format!(
                "brightness {} is not one of the sweep levels {BRIGHTNESS_LEVELS:?}",
                c.brightness
            )));
        }
        if !known_level(c.camera_height_offset, &offsets) {
            return Err(Error::InvalidArgument(format!(
                "camera offset {} is not one of the sweep offsets {offsets:?}",
                c.camera_height_offset
            )));
        }
    }
    conditions
        .iter()
        .map(|c| evaluate_agent(agent, layout, c, episodes_per_goal, seed))
        .collect()
}
