//! Rollout corpus for adapter training: collection, views, and file format.
//!
//! The frozen expert is rolled out stochastically in a room. Every step
//! records the privileged trunk latents at all tap widths, the action-head
//! output, an egocentric render encoded to patch features, and the episode's
//! prompt embedding. Offline augmentation expands each step into extra
//! visual views that reuse the original step's targets, since augmentation
//! changes appearance rather than state. Storage is struct-of-arrays:
//! per-view data (patch features) is kept apart from per-step data
//! (embeddings, latents, actions, provenance), so the expanded corpus never
//! duplicates its teacher signal.

mod train;

pub use train::{
    alignment_loss, info_nce_symmetric, train_adapter, AdapterTrainConfig, AdapterTrainReport,
    AlignmentLoss, EpochStats, HeadKind, TrainedAdapter,
};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{sample_action, ExpertPolicy, TapDim};
use crate::featurize::{build_privileged_obs, layout_clusters, NUM_CLUSTERS, OBS_DIM};
use crate::perception::{
    augment_image, embed_instruction, encode_patches, render_egocentric, sample_prompt,
    RenderConfig, D_TXT, NUM_PATCHES,
};
use crate::sim::{NavEnv, Outcome, RewardParams, RoomLayout, SimParams};
use crate::tensor::Tensor;

/// Extra augmented views recorded per rollout step.
pub const DEFAULT_MULTIPLICITY: u32 = 4;

/// Desk-scale default for raw collection steps.
pub const DEFAULT_RAW_STEPS: usize = 20_000;

/// Full-scale collection size; the desk default trades corpus size for
/// runtime and memory.
pub const FULL_RAW_STEPS: usize = 52_000;

/// Flat patch-feature length of one view.
pub const SAMPLE_FEATURE_LEN: usize = NUM_PATCHES * crate::perception::D_IMG;

const FORMAT_VERSION: u32 = 1;
const DATASET_KIND: &str = "alignment-dataset";

/// Tolerance for replaying a stored latent through the frozen suffix.
const REPLAY_TOL: f32 = 1e-6;

/// The in-run teacher check waits this many completed episodes so a single
/// unlucky rollout cannot abort a long collection.
const ABORT_MIN_EPISODES: u32 = 8;

/// One recorded step seen through one visual view.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentSample<'a> {
    /// Patch features for this view, `NUM_PATCHES` x `D_IMG` flattened.
    pub features: &'a [f32],
    /// Instruction embedding shared by every view of the step.
    pub embedding: &'a [f32],
    /// Template index within the goal's prompt table.
    pub prompt_id: u32,
    /// Teacher latent at the 512 tap.
    pub z512: &'a [f32],
    /// Teacher latent at the 256 tap.
    pub z256: &'a [f32],
    /// Teacher latent at the 128 tap.
    pub z128: &'a [f32],
    /// Frozen action head applied to the recorded latents.
    pub action: &'a [f32],
    /// Rollout episode counter.
    pub episode: u32,
    /// Step index within the episode.
    pub step: u32,
    /// 0 for the original render, 1..=multiplicity for augmented views.
    pub view: u32,
}

/// Alignment corpus in struct-of-arrays form.
///
/// Effective samples are ordered view-major: index `i` maps to raw step
/// `i / (1 + multiplicity)` and view `i % (1 + multiplicity)`, view 0 being
/// the unaugmented render.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentDataset {
    layout_name: String,
    multiplicity: u32,
    seed: u64,
    successes: u32,
    completed_episodes: u32,
    raw_steps: usize,
    features: Vec<f32>,
    embeddings: Vec<f32>,
    prompt_ids: Vec<u32>,
    z512: Vec<f32>,
    z256: Vec<f32>,
    z128: Vec<f32>,
    actions: Vec<f32>,
    episode_ids: Vec<u32>,
    step_ids: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct BlockSpec {
    offset: u64,
    len_bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockTable {
    features: BlockSpec,
    embeddings: BlockSpec,
    prompt_ids: BlockSpec,
    z512: BlockSpec,
    z256: BlockSpec,
    z128: BlockSpec,
    actions: BlockSpec,
    episode_ids: BlockSpec,
    step_ids: BlockSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    kind: String,
    layout: String,
    raw_steps: u64,
    multiplicity: u32,
    effective: u64,
    seed: u64,
    successes: u32,
    completed_episodes: u32,
    blocks: BlockTable,
}

impl AlignmentDataset {
    /// Number of recorded rollout steps.
    pub fn raw_len(&self) -> usize {
        self.raw_steps
    }

    /// Extra augmented views per step.
    pub fn multiplicity(&self) -> u32 {
        self.multiplicity
    }

    /// Views per step including the original render.
    pub fn views_per_step(&self) -> usize {
        1 + self.multiplicity as usize
    }

    /// Total sample count after view expansion.
    pub fn effective_len(&self) -> usize {
        self.raw_steps * self.views_per_step()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout_name(&self) -> &str {
        &self.layout_name
    }

    pub fn successes(&self) -> u32 {
        self.successes
    }

    pub fn completed_episodes(&self) -> u32 {
        self.completed_episodes
    }

    /// Teacher success rate over completed episodes, if any finished.
    pub fn success_rate(&self) -> Option<f32> {
        (self.completed_episodes > 0)
            .then(|| self.successes as f32 / self.completed_episodes as f32)
    }

    /// Raw step index backing an effective sample index.
    pub fn raw_of(&self, index: usize) -> usize {
        index / self.views_per_step()
    }

    /// Patch features of one effective sample.
    pub fn features(&self, index: usize) -> &[f32] {
        &self.features[index * SAMPLE_FEATURE_LEN..(index + 1) * SAMPLE_FEATURE_LEN]
    }

    /// Instruction embedding of one raw step.
    pub fn embedding(&self, raw: usize) -> &[f32] {
        &self.embeddings[raw * D_TXT..(raw + 1) * D_TXT]
    }

    /// Teacher latent of one raw step at the requested tap.
    pub fn latents(&self, tap: TapDim, raw: usize) -> &[f32] {
        let d = tap.dim();
        let block = match tap {
            TapDim::D512 => &self.z512,
            TapDim::D256 => &self.z256,
            TapDim::D128 => &self.z128,
        };
        &block[raw * d..(raw + 1) * d]
    }

    /// Teacher action of one raw step.
    pub fn action(&self, raw: usize) -> &[f32] {
        &self.actions[raw * 2..(raw + 1) * 2]
    }

    /// Borrowed view of one effective sample.
    pub fn sample(&self, index: usize) -> AlignmentSample<'_> {
        assert!(
            index < self.effective_len(),
            "sample index {index} out of range for {} effective samples",
            self.effective_len()
        );
        let raw = self.raw_of(index);
        AlignmentSample {
            features: self.features(index),
            embedding: self.embedding(raw),
            prompt_id: self.prompt_ids[raw],
            z512: self.latents(TapDim::D512, raw),
            z256: self.latents(TapDim::D256, raw),
            z128: self.latents(TapDim::D128, raw),
            action: self.action(raw),
            episode: self.episode_ids[raw],
            step: self.step_ids[raw],
            view: (index % self.views_per_step()) as u32,
        }
    }

    /// Replays every stored latent through the frozen suffix and checks that
    /// the stored action is reproduced at each tap width.
    pub fn verify_replay(&self, expert: &ExpertPolicy) -> Result<()> {
        for tap in TapDim::all() {
            for raw in 0..self.raw_len() {
                let z = Tensor::new(vec![1, tap.dim()], self.latents(tap, raw).to_vec())?;
                let a = expert.suffix_forward(tap, &z)?;
                for (got, want) in a.data().iter().zip(self.action(raw)) {
                    if (got - want).abs() > REPLAY_TOL {
                        return Err(Error::Dataset(format!(
                            "latent at step {raw} tap {} replays to {got}, stored action {want}",
                            tap.dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes to a little-endian u32 header length, a JSON header, then
    /// a payload of contiguous little-endian blocks.
    ///
    /// Block offsets in the header are byte positions relative to the start
    /// of the payload (immediately after the header). `features` holds f32s
    /// for every view in effective order; the remaining blocks hold one
    /// entry per raw step, f32 except the u32 id blocks.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(4 * (self.features.len() + self.embeddings.len()));
        let blocks = BlockTable {
            features: write_f32_block(&mut payload, &self.features),
            embeddings: write_f32_block(&mut payload, &self.embeddings),
            prompt_ids: write_u32_block(&mut payload, &self.prompt_ids),
            z512: write_f32_block(&mut payload, &self.z512),
            z256: write_f32_block(&mut payload, &self.z256),
            z128: write_f32_block(&mut payload, &self.z128),
            actions: write_f32_block(&mut payload, &self.actions),
            episode_ids: write_u32_block(&mut payload, &self.episode_ids),
            step_ids: write_u32_block(&mut payload, &self.step_ids),
        };
        let header = DatasetHeader {
            format_version: FORMAT_VERSION,
            kind: DATASET_KIND.to_string(),
            layout: self.layout_name.clone(),
            raw_steps: self.raw_steps as u64,
            multiplicity: self.multiplicity,
            effective: self.effective_len() as u64,
            seed: self.seed,
            successes: self.successes,
            completed_episodes: self.completed_episodes,
            blocks,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(4 + header_bytes.len() + payload.len());
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Dataset(
                "file shorter than its header length prefix".into(),
            ));
        }
        let header_len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let rest = &bytes[4..];
        if rest.len() < header_len {
            return Err(Error::Dataset(format!(
                "header claims {header_len} bytes but only {} remain",
                rest.len()
            )));
        }
        let header: DatasetHeader = serde_json::from_slice(&rest[..header_len])?;
        if header.kind != DATASET_KIND {
            return Err(Error::CheckpointKind {
                found: header.kind,
                expected: DATASET_KIND.to_string(),
            });
        }
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let raw = header.raw_steps as usize;
        let views = 1 + header.multiplicity as usize;
        if header.effective != (raw * views) as u64 {
            return Err(Error::Dataset(format!(
                "effective size {} does not equal {raw} raw steps x {views} views",
                header.effective
            )));
        }
        let payload = &rest[header_len..];
        let b = &header.blocks;
        Ok(AlignmentDataset {
            layout_name: header.layout,
            multiplicity: header.multiplicity,
            seed: header.seed,
            successes: header.successes,
            completed_episodes: header.completed_episodes,
            raw_steps: raw,
            features: read_f32_block(payload, &b.features, raw * views * SAMPLE_FEATURE_LEN)?,
            embeddings: read_f32_block(payload, &b.embeddings, raw * D_TXT)?,
            prompt_ids: read_u32_block(payload, &b.prompt_ids, raw)?,
            z512: read_f32_block(payload, &b.z512, raw * 512)?,
            z256: read_f32_block(payload, &b.z256, raw * 256)?,
            z128: read_f32_block(payload, &b.z128, raw * 128)?,
            actions: read_f32_block(payload, &b.actions, raw * 2)?,
            episode_ids: read_u32_block(payload, &b.episode_ids, raw)?,
            step_ids: read_u32_block(payload, &b.step_ids, raw)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_f32_block(payload: &mut Vec<u8>, data: &[f32]) -> BlockSpec {
    let offset = payload.len() as u64;
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    BlockSpec {
        offset,
        len_bytes: (data.len() * 4) as u64,
    }
}

fn write_u32_block(payload: &mut Vec<u8>, data: &[u32]) -> BlockSpec {
    let offset = payload.len() as u64;
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    BlockSpec {
        offset,
        len_bytes: (data.len() * 4) as u64,
    }
}

fn block_bytes<'a>(payload: &'a [u8], spec: &BlockSpec, expect_elems: usize) -> Result<&'a [u8]> {
    let start = spec.offset as usize;
    let end = start
        .checked_add(spec.len_bytes as usize)
        .ok_or_else(|| Error::Dataset("block range overflows".into()))?;
    let bytes = payload.get(start..end).ok_or_else(|| {
        Error::Dataset(format!(
            "block range {start}..{end} outside payload of {} bytes",
            payload.len()
        ))
    })?;
    if bytes.len() != expect_elems * 4 {
        return Err(Error::Dataset(format!(
            "block holds {} bytes, expected {} elements",
            bytes.len(),
            expect_elems
        )));
    }
    Ok(bytes)
}

fn read_f32_block(payload: &[u8], spec: &BlockSpec, expect_elems: usize) -> Result<Vec<f32>> {
    let bytes = block_bytes(payload, spec, expect_elems)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunks")))
        .collect())
}

fn read_u32_block(payload: &[u8], spec: &BlockSpec, expect_elems: usize) -> Result<Vec<u32>> {
    let bytes = block_bytes(payload, spec, expect_elems)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunks")))
        .collect())
}

fn teacher_guard(successes: u32, completed: u32, min_episodes: u32) -> Result<()> {
    if completed >= min_episodes && (successes as f32) < 0.5 * completed as f32 {
        return Err(Error::Dataset(format!(
            "expert success rate {:.2} over {completed} completed episodes is below the 0.5 \
             collection floor",
            successes as f32 / completed as f32
        )));
    }
    Ok(())
}

/// Rolls out the stochastic expert and records an alignment corpus.
///
/// Clustering uses the same seed as expert training so the privileged
/// observations match the ones the teacher was trained on. One prompt is
/// sampled per episode from the active goal's template table; recorded
/// actions are the deterministic head means while executed actions sample
/// the policy's Gaussian. Everything downstream of `seed` is deterministic.
pub fn collect_rollout_dataset(
    expert: &ExpertPolicy,
    layout: &RoomLayout,
    n_steps: usize,
    multiplicity: u32,
    seed: u64,
) -> Result<AlignmentDataset> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument(
            "collection needs at least one step".into(),
        ));
    }
    let clusters = layout_clusters(layout, NUM_CLUSTERS, 0);
    let mut env = NavEnv::new(
        layout.clone(),
        clusters.centroids.clone(),
        SimParams::default(),
        RewardParams::default(),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = expert.action_std();
    let views = 1 + multiplicity as usize;

    let mut ds = AlignmentDataset {
        layout_name: layout.name.clone(),
        multiplicity,
        seed,
        successes: 0,
        completed_episodes: 0,
        raw_steps: 0,
        features: Vec::with_capacity(n_steps * views * SAMPLE_FEATURE_LEN),
        embeddings: Vec::with_capacity(n_steps * D_TXT),
        prompt_ids: Vec::with_capacity(n_steps),
        z512: Vec::with_capacity(n_steps * 512),
        z256: Vec::with_capacity(n_steps * 256),
        z128: Vec::with_capacity(n_steps * 128),
        actions: Vec::with_capacity(n_steps * 2),
        episode_ids: Vec::with_capacity(n_steps),
        step_ids: Vec::with_capacity(n_steps),
    };
    let mut episode: u32 = 0;
    let (mut successes, mut completed) = (0u32, 0u32);

    while ds.raw_steps < n_steps {
        env.reset(&mut rng);
        let category = layout.goals[env.goal_index()].category.clone();
        let (prompt_id, prompt) = sample_prompt(layout, &category, &mut rng)?;
        let embedding = embed_instruction(&category, &prompt.family);

        while !env.is_done() && ds.raw_steps < n_steps {
            let obs = build_privileged_obs(env.state(), env.goal_position(), &clusters);
            let obs = Tensor::new(vec![1, OBS_DIM], obs)?;
            let out = expert.forward(&obs)?;
            let replay = expert.suffix_forward(TapDim::D128, &out.latents[2])?;
            for (r, m) in replay.data().iter().zip(out.mean.data()) {
                if (r - m).abs() > REPLAY_TOL {
                    return Err(Error::Dataset(format!(
                        "recorded latent does not replay to the head output: {r} vs {m}"
                    )));
                }
            }

            let raster = render_egocentric(env.state(), layout, &RenderConfig::default());
            ds.features
                .extend_from_slice(encode_patches(&raster).features.data());
            for _ in 0..multiplicity {
                let aug = augment_image(&raster, &mut rng);
                ds.features
                    .extend_from_slice(encode_patches(&aug).features.data());
            }
            ds.embeddings.extend_from_slice(&embedding.vector);
            ds.prompt_ids.push(prompt_id as u32);
            ds.z512.extend_from_slice(out.latents[0].data());
            ds.z256.extend_from_slice(out.latents[1].data());
            ds.z128.extend_from_slice(out.latents[2].data());
            ds.actions.extend_from_slice(out.mean.data());
            ds.episode_ids.push(episode);
            ds.step_ids.push(env.steps());
            ds.raw_steps += 1;

            let action = sample_action(out.mean.data(), std, &mut rng);
            let transition = env.step(action);
            if let Some(outcome) = transition.outcome {
                completed += 1;
                if matches!(outcome, Outcome::Success) {
                    successes += 1;
                }
                teacher_guard(successes, completed, ABORT_MIN_EPISODES)?;
            }
        }
        episode += 1;
    }

    teacher_guard(successes, completed, 2)?;
    ds.successes = successes;
    ds.completed_episodes = completed;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{GoalSpec, Obstacle, Prompt};

    fn tiny_layout(goal_dist: f32) -> RoomLayout {
        RoomLayout {
            name: "tiny".into(),
            bounds: [-5.0, -4.0, 5.0, 4.0],
            start: [0.0, 0.0],
            obstacles: vec![Obstacle {
                name: "target".into(),
                rect: [goal_dist - 0.2, -0.2, goal_dist + 0.2, 0.2],
                color: [0.9, 0.1, 0.1],
                height: 0.5,
            }],
            goals: vec![GoalSpec {
                category: "target".into(),
                color: [0.9, 0.1, 0.1],
                positions: vec![[goal_dist, 0.0]],
                clearance: 0.3,
                prompts: vec![Prompt {
                    text: "go to the target".into(),
                    family: "plain".into(),
                }],
            }],
        }
    }

    #[test]
    fn collection_is_deterministic_and_seed_sensitive() {
        let expert = ExpertPolicy::new(3);
        let layout = tiny_layout(1.2);
        let a = collect_rollout_dataset(&expert, &layout, 40, 2, 7).unwrap();
        let b = collect_rollout_dataset(&expert, &layout, 40, 2, 7).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = collect_rollout_dataset(&expert, &layout, 40, 2, 8).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn views_expand_each_step_without_duplicating_targets() {
        let expert = ExpertPolicy::new(3);
        let ds = collect_rollout_dataset(&expert, &tiny_layout(1.2), 10, 4, 5).unwrap();
        assert_eq!(ds.raw_len(), 10);
        assert_eq!(ds.views_per_step(), 5);
        assert_eq!(ds.effective_len(), 50);

        let original = ds.sample(5);
        let augmented = ds.sample(7);
        assert_eq!(original.view, 0);
        assert_eq!(augmented.view, 2);
        assert_eq!(ds.raw_of(5), 1);
        assert_eq!(ds.raw_of(7), 1);
        assert_eq!(original.embedding, augmented.embedding);
        assert_eq!(original.z256, augmented.z256);
        assert_eq!(original.action, augmented.action);
        assert_eq!(original.episode, augmented.episode);
        assert!(
            original.features != augmented.features,
            "augmented views should differ from the original render"
        );
    }

    #[test]
    fn full_scale_collection_expands_to_260k_samples() {
        assert_eq!(
            FULL_RAW_STEPS * (1 + DEFAULT_MULTIPLICITY as usize),
            260_000
        );
        assert_eq!(
            DEFAULT_RAW_STEPS * (1 + DEFAULT_MULTIPLICITY as usize),
            100_000
        );
    }

    #[test]
    fn every_stored_latent_replays_through_the_frozen_suffix() {
        let expert = ExpertPolicy::new(11);
        let mut ds = collect_rollout_dataset(&expert, &tiny_layout(1.2), 25, 0, 1).unwrap();
        ds.verify_replay(&expert).unwrap();

        ds.z256[300] += 0.05;
        let err = ds.verify_replay(&expert);
        assert!(matches!(err, Err(Error::Dataset(_))), "{err:?}");
    }

    #[test]
    fn prompts_are_sampled_per_episode_and_embedded_by_family() {
        let mut layout = tiny_layout(1.2);
        layout.goals[0].prompts = vec![
            Prompt {
                text: "go to the target".into(),
                family: "plain".into(),
            },
            Prompt {
                text: "head for the red target".into(),
                family: "color".into(),
            },
        ];
        let expert = ExpertPolicy::new(3);
        let ds = collect_rollout_dataset(&expert, &layout, 30, 0, 11).unwrap();

        let families = ["plain", "color"];
        let mut seen = [false, false];
        for raw in 0..ds.raw_len() {
            let pid = ds.prompt_ids[raw] as usize;
            seen[pid] = true;
            let expected = embed_instruction("target", families[pid]);
            assert_eq!(ds.embedding(raw), &expected.vector[..]);
        }
        assert!(seen[0] && seen[1], "both templates should get sampled");
    }

    #[test]
    fn a_failing_teacher_aborts_collection() {
        let expert = ExpertPolicy::new(0);
        let err = collect_rollout_dataset(&expert, &tiny_layout(4.0), 1000, 0, 2);
        match err {
            Err(Error::Dataset(msg)) => assert!(msg.contains("success rate"), "{msg}"),
            other => panic!("expected a dataset abort, got {other:?}"),
        }
    }

    #[test]
    fn bytes_round_trip_and_files_reload() {
        let expert = ExpertPolicy::new(3);
        let ds = collect_rollout_dataset(&expert, &tiny_layout(1.2), 12, 1, 9).unwrap();
        let restored = AlignmentDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(ds, restored);
        assert_eq!(restored.success_rate(), Some(1.0));
        assert_eq!(restored.layout_name(), "tiny");

        let path = std::env::temp_dir().join(format!(
            "alignment-roundtrip-{}.bin",
            std::process::id()
        ));
        ds.save(&path).unwrap();
        let loaded = AlignmentDataset::load(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let expert = ExpertPolicy::new(3);
        let ds = collect_rollout_dataset(&expert, &tiny_layout(1.2), 4, 0, 9).unwrap();
        let bytes = ds.to_bytes().unwrap();

        let header = String::from_utf8(bytes[4..4 + 40].to_vec()).unwrap();
        assert!(header.contains("format_version"), "{header}");

        let mut wrong_version = bytes.clone();
        let pos = find(&wrong_version, b"\"format_version\":1") + b"\"format_version\":".len();
        wrong_version[pos] = b'9';
        let err = AlignmentDataset::from_bytes(&wrong_version);
        assert!(matches!(err, Err(Error::CheckpointVersion { found: 9, .. })), "{err:?}");

        let mut wrong_kind = bytes.clone();
        let pos = find(&wrong_kind, b"alignment-dataset");
        wrong_kind[pos] = b'm';
        let err = AlignmentDataset::from_bytes(&wrong_kind);
        assert!(matches!(err, Err(Error::CheckpointKind { .. })), "{err:?}");

        let truncated = &bytes[..bytes.len() - 8];
        let err = AlignmentDataset::from_bytes(truncated);
        assert!(matches!(err, Err(Error::Dataset(_))), "{err:?}");

        let err = AlignmentDataset::from_bytes(&bytes[..2]);
        assert!(matches!(err, Err(Error::Dataset(_))), "{err:?}");
    }

    #[test]
    fn zero_step_collection_is_rejected() {
        let expert = ExpertPolicy::new(3);
        let err = collect_rollout_dataset(&expert, &tiny_layout(1.2), 0, 4, 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))), "{err:?}");
    }

    fn find(haystack: &[u8], needle: &[u8]) -> usize {
        haystack
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("pattern present")
    }
}
