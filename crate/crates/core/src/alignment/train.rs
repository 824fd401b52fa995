//! Adapter training on the frozen interface: losses and the epoch loop.
//!
//! The combined objective aligns predicted latents with teacher latents
//! three ways: a symmetric contrastive term pulls matching pairs together in
//! cosine space, a direct regression term pins the coordinates, and an
//! action-consistency term pushes both latents through the frozen suffix and
//! compares the resulting actions. Only adapter parameters receive
//! gradients; the expert enters every tape as constants. The action-cloning
//! ablation swaps the whole objective for a plain regression onto teacher
//! actions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    fingerprint_tensors, lcbc_forward, lclaa_forward, pela_forward, AdapterConfig, LcbcParams,
    LclaaParams, Mode, PelaParams,
};
use crate::error::{Error, Result};
use crate::expert::{ExpertPolicy, TapDim, ACTION_DIM};
use crate::perception::{encode_patches, EgoRaster, D_IMG, D_TXT, NUM_PATCHES};
use crate::tensor::{clip_grad_norm, Adam, Tape, Tensor, Var};

use super::{AlignmentDataset, SAMPLE_FEATURE_LEN};

/// Norm floor for the cosine similarity.
const COSINE_EPS: f32 = 1e-8;

/// Added to logits of same-state pairs so they drop out of the softmax.
const NEGATIVE_MASK: f32 = -1e4;

/// Which adapter head to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Bottleneck adapter regressing expert latents.
    Lclaa,
    /// The same encoder regressing actions directly.
    Lcbc,
    /// Pooled-MLP baseline regressing expert latents.
    Pela,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Lclaa => "lclaa",
            HeadKind::Lcbc => "lcbc",
            HeadKind::Pela => "pela",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lclaa" => Ok(HeadKind::Lclaa),
            "lcbc" => Ok(HeadKind::Lcbc),
            "pela" => Ok(HeadKind::Pela),
            other => Err(Error::InvalidArgument(format!(
                "unknown head kind {other:?}; expected lclaa, lcbc, or pela"
            ))),
        }
    }
}

/// Supervised training knobs for the adapter heads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterTrainConfig {
    /// Passes over the effective corpus.
    pub epochs: usize,
    /// Samples per optimizer step; trailing batches below 2 are dropped.
    pub batch_size: usize,
    /// Adam learning rate at the start of training.
    pub lr: f32,
    /// Anneal the rate with a half cosine over all optimizer steps.
    pub cosine_decay: bool,
    /// Weight of the contrastive term; latent regression gets one minus it.
    pub lambda1: f32,
    /// Weight of the action-consistency term.
    pub lambda2: f32,
    /// Contrastive temperature.
    pub tau_c: f32,
    /// Global gradient-norm clip.
    pub max_grad_norm: f32,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            cosine_decay: true,
            lambda1: 0.8,
            lambda2: 1.0,
            tau_c: 0.07,
            max_grad_norm: 10.0,
        }
    }
}

impl AdapterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 2 for the contrastive term".into(),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            return Err(Error::InvalidArgument(format!(
                "lambda1 {} must lie in [0, 1]",
                self.lambda1
            )));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda2 {} must be non-negative",
                self.lambda2
            )));
        }
        if self.tau_c <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be positive",
                self.tau_c
            )));
        }
        if self.max_grad_norm <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "gradient clip {} must be positive",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// Mean training losses over one epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss, weighted by batch size.
    pub loss: f64,
    /// Mean contrastive component; zero for the action-cloning head.
    pub contrast: f64,
    /// Mean latent regression component; zero for the action-cloning head.
    pub latent_mse: f64,
    /// Mean action component: suffix consistency, or plain cloning error.
    pub action_mse: f64,
    /// Learning rate at the epoch's first optimizer step.
    pub lr: f32,
}

/// Outcome of one adapter training run.
#[derive(Debug, Clone)]
pub struct AdapterTrainReport {
    pub epochs: Vec<EpochStats>,
    /// Non-fatal configuration warnings, e.g. a flat early loss.
    pub diagnostics: Vec<String>,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// A trained head and its parameters.
#[derive(Debug, Clone)]
pub enum TrainedAdapter {
    Lclaa(LclaaParams),
    Lcbc(LcbcParams),
    Pela(PelaParams),
}

impl TrainedAdapter {
    pub fn kind(&self) -> HeadKind {
        match self {
            TrainedAdapter::Lclaa(_) => HeadKind::Lclaa,
            TrainedAdapter::Lcbc(_) => HeadKind::Lcbc,
            TrainedAdapter::Pela(_) => HeadKind::Pela,
        }
    }

    pub fn cfg(&self) -> &AdapterConfig {
        match self {
            TrainedAdapter::Lclaa(p) => p.cfg(),
            TrainedAdapter::Lcbc(p) => p.cfg(),
            TrainedAdapter::Pela(p) => p.cfg(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TrainedAdapter::Lclaa(p) => p.param_count(),
            TrainedAdapter::Lcbc(p) => p.param_count(),
            TrainedAdapter::Pela(p) => p.param_count(),
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        match self {
            TrainedAdapter::Lclaa(p) => p.flatten(),
            TrainedAdapter::Lcbc(p) => p.flatten(),
            TrainedAdapter::Pela(p) => p.flatten(),
        }
    }

    pub fn load_flat(&mut self, data: &[f32]) -> Result<()> {
        match self {
            TrainedAdapter::Lclaa(p) => p.load_flat(data),
            TrainedAdapter::Lcbc(p) => p.load_flat(data),
            TrainedAdapter::Pela(p) => p.load_flat(data),
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            TrainedAdapter::Lclaa(p) => p.fingerprint(),
            TrainedAdapter::Lcbc(p) => p.fingerprint(),
            TrainedAdapter::Pela(p) => p.fingerprint(),
        }
    }

    /// Predicted latents for a feature batch; None for the action head.
    ///
    /// `features` stacks `NUM_PATCHES` rows per sample, `text` holds one row
    /// per sample.
    pub fn predict_latents(&self, features: &Tensor, text: &Tensor) -> Result<Option<Tensor>> {
        let batch = text.rows();
        match self {
            TrainedAdapter::Lclaa(p) => {
                let (z, _) = crate::adapter::lclaa_eval(p, features, text)?;
                Ok(Some(Tensor::new(vec![batch, p.cfg().d_z], z)?))
            }
            TrainedAdapter::Pela(p) => {
                let mut tape = Tape::new_inference();
                let vars = p.register(&mut tape);
                let f = tape.constant_from(features);
                let t = tape.constant_from(text);
                let z = pela_forward(&mut tape, &vars, f, t, batch)?;
                Ok(Some(Tensor::new(
                    vec![batch, p.cfg().d_z],
                    tape.value(z).to_vec(),
                )?))
            }
            TrainedAdapter::Lcbc(_) => Ok(None),
        }
    }

    /// Actions for a feature batch: latent heads run the frozen suffix, the
    /// action-cloning head predicts directly.
    pub fn predict_actions(
        &self,
        expert: &ExpertPolicy,
        features: &Tensor,
        text: &Tensor,
    ) -> Result<Tensor> {
        match self {
            TrainedAdapter::Lclaa(_) | TrainedAdapter::Pela(_) => {
                let z = self
                    .predict_latents(features, text)?
                    .expect("latent heads produce latents");
                let tap = TapDim::from_dim(self.cfg().d_z)?;
                expert.suffix_forward(tap, &z)
            }
            TrainedAdapter::Lcbc(p) => {
                let batch = text.rows();
                let mut tape = Tape::new_inference();
                let vars = p.register(&mut tape);
                let f = tape.constant_from(features);
                let t = tape.constant_from(text);
                let mut rng = rand::rngs::mock::StepRng::new(0, 1);
                let a = lcbc_forward(&mut tape, &vars, f, t, batch, Mode::Eval, &mut rng)?;
                Tensor::new(vec![batch, ACTION_DIM], tape.value(a).to_vec())
            }
        }
    }
}

/// Symmetric InfoNCE over cosine similarities.
///
/// Rows of `zhat` and `z` at the same index are positive pairs; every other
/// row is a negative except those sharing an id in `same`, whose logits are
/// pushed out of the softmax so augmented views of one state are not treated
/// as false negatives. Both softmax directions are averaged.
pub fn info_nce_symmetric(
    tape: &mut Tape,
    zhat: Var,
    z: Var,
    tau_c: f32,
    same: Option<&[u32]>,
) -> Result<Var> {
    let b = tape.rows(zhat);
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive batch needs at least 2 rows, got {b}"
        )));
    }
    if tau_c <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {tau_c} must be positive"
        )));
    }
    if let Some(ids) = same {
        if ids.len() != b {
            return Err(Error::InvalidArgument(format!(
                "{} group ids for a batch of {b} rows",
                ids.len()
            )));
        }
    }
    let zh = tape.normalize_rows(zhat, COSINE_EPS);
    let zn = tape.normalize_rows(z, COSINE_EPS);
    let sims = tape.matmul_nt(zh, zn)?;
    let mut logits = tape.scale(sims, 1.0 / tau_c);
    if let Some(ids) = same {
        let mut mask = vec![0.0f32; b * b];
        let mut any = false;
        for i in 0..b {
            for j in 0..b {
                if i != j && ids[i] == ids[j] {
                    mask[i * b + j] = NEGATIVE_MASK;
                    any = true;
                }
            }
        }
        if any {
            let m = tape.constant(b, b, mask)?;
            logits = tape.add(logits, m)?;
        }
    }
    let forward = tape.log_softmax_rows(logits);
    let fdiag = tape.mean_diag(forward)?;
    let transposed = tape.transpose_var(logits);
    let backward = tape.log_softmax_rows(transposed);
    let bdiag = tape.mean_diag(backward)?;
    let both = tape.add(fdiag, bdiag)?;
    Ok(tape.scale(both, -0.5))
}

/// Combined alignment objective and its components, all tape scalars.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentLoss {
    pub total: Var,
    pub contrast: Var,
    pub latent_mse: Var,
    pub action_mse: Var,
}

/// Builds the combined objective on the tape.
///
/// `z` should enter as a constant so gradients reach the prediction only.
/// Regression terms are element means, keeping the weights comparable
/// across latent widths. The action term pushes both latents through the
/// frozen suffix, whose weights join the tape as constants.
pub fn alignment_loss(
    tape: &mut Tape,
    expert: &ExpertPolicy,
    tap: TapDim,
    zhat: Var,
    z: Var,
    cfg: &AdapterTrainConfig,
    same: Option<&[u32]>,
) -> Result<AlignmentLoss> {
    let contrast = info_nce_symmetric(tape, zhat, z, cfg.tau_c, same)?;
    let diff = tape.sub(zhat, z)?;
    let sq = tape.square(diff);
    let latent_mse = tape.mean_all(sq);
    let ahat = expert.suffix_tape(tape, tap, zhat)?;
    let aref = expert.suffix_tape(tape, tap, z)?;
    let adiff = tape.sub(ahat, aref)?;
    let asq = tape.square(adiff);
    let action_mse = tape.mean_all(asq);
    let wc = tape.scale(contrast, cfg.lambda1);
    let wm = tape.scale(latent_mse, 1.0 - cfg.lambda1);
    let wa = tape.scale(action_mse, cfg.lambda2);
    let partial = tape.add(wc, wm)?;
    let total = tape.add(partial, wa)?;
    Ok(AlignmentLoss {
        total,
        contrast,
        latent_mse,
        action_mse,
    })
}

struct BatchValues {
    total: f64,
    contrast: f64,
    latent: f64,
    action: f64,
}

struct Batch {
    features: Tensor,
    text: Tensor,
    latents: Tensor,
    actions: Tensor,
    raw_ids: Vec<u32>,
    len: usize,
}

fn assemble(ds: &AlignmentDataset, idx: &[usize], tap: TapDim) -> Result<Batch> {
    let b = idx.len();
    let d = tap.dim();
    let mut features = Vec::with_capacity(b * SAMPLE_FEATURE_LEN);
    let mut text = Vec::with_capacity(b * D_TXT);
    let mut latents = Vec::with_capacity(b * d);
    let mut actions = Vec::with_capacity(b * ACTION_DIM);
    let mut raw_ids = Vec::with_capacity(b);
    for &i in idx {
        let raw = ds.raw_of(i);
        features.extend_from_slice(ds.features(i));
        text.extend_from_slice(ds.embedding(raw));
        latents.extend_from_slice(ds.latents(tap, raw));
        actions.extend_from_slice(ds.action(raw));
        raw_ids.push(raw as u32);
    }
    Ok(Batch {
        features: Tensor::new(vec![b * NUM_PATCHES, D_IMG], features)?,
        text: Tensor::new(vec![b, D_TXT], text)?,
        latents: Tensor::new(vec![b, d], latents)?,
        actions: Tensor::new(vec![b, ACTION_DIM], actions)?,
        raw_ids,
        len: b,
    })
}

/// Reads out the components, checks the decomposition identity and the
/// contrastive bound, and rejects non-finite losses.
fn audit_batch(
    tape: &Tape,
    loss: &AlignmentLoss,
    cfg: &AdapterTrainConfig,
    batch: usize,
) -> Result<BatchValues> {
    let total = tape.scalar(loss.total)?;
    let contrast = tape.scalar(loss.contrast)?;
    let latent = tape.scalar(loss.latent_mse)?;
    let action = tape.scalar(loss.action_mse)?;
    let recomposed = cfg.lambda1 as f64 * contrast
        + (1.0 - cfg.lambda1) as f64 * latent
        + cfg.lambda2 as f64 * action;
    assert!(
        (total - recomposed).abs() <= 1e-6 * total.abs().max(1.0),
        "loss decomposition drifted: total {total} vs recomposed {recomposed}"
    );
    let bound = (batch as f64).ln() + 1.0 / cfg.tau_c as f64;
    if contrast > bound + 1e-4 {
        return Err(Error::Divergence(format!(
            "contrastive loss {contrast:.4} exceeded its similarity-range bound {bound:.4}"
        )));
    }
    Ok(BatchValues {
        total,
        contrast,
        latent,
        action,
    })
}

fn lclaa_step<R: Rng>(
    p: &mut LclaaParams,
    expert: &ExpertPolicy,
    tap: TapDim,
    batch: &Batch,
    cfg: &AdapterTrainConfig,
    rng: &mut R,
) -> Result<BatchValues> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let f = tape.constant_from(&batch.features);
    let t = tape.constant_from(&batch.text);
    let z = tape.constant_from(&batch.latents);
    let fwd = lclaa_forward(&mut tape, &vars, f, t, batch.len, Mode::Train, rng)?;
    let loss = alignment_loss(&mut tape, expert, tap, fwd.z, z, cfg, Some(&batch.raw_ids))?;
    let values = audit_batch(&tape, &loss, cfg, batch.len)?;
    let grads = tape.backward(loss.total)?;
    for t in p.tensors_mut() {
        t.zero_grad();
    }
    p.apply_grads(&vars, &grads);
    Ok(values)
}

fn pela_step(
    p: &mut PelaParams,
    expert: &ExpertPolicy,
    tap: TapDim,
    batch: &Batch,
    cfg: &AdapterTrainConfig,
) -> Result<BatchValues> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let f = tape.constant_from(&batch.features);
    let t = tape.constant_from(&batch.text);
    let z = tape.constant_from(&batch.latents);
    let zhat = pela_forward(&mut tape, &vars, f, t, batch.len)?;
    let loss = alignment_loss(&mut tape, expert, tap, zhat, z, cfg, Some(&batch.raw_ids))?;
    let values = audit_batch(&tape, &loss, cfg, batch.len)?;
    let grads = tape.backward(loss.total)?;
    for t in p.tensors_mut() {
        t.zero_grad();
    }
    p.apply_grads(&vars, &grads);
    Ok(values)
}

fn lcbc_step<R: Rng>(
    p: &mut LcbcParams,
    batch: &Batch,
    rng: &mut R,
) -> Result<BatchValues> {
    let mut tape = Tape::new();
    let vars = p.register(&mut tape);
    let f = tape.constant_from(&batch.features);
    let t = tape.constant_from(&batch.text);
    let a = tape.constant_from(&batch.actions);
    let ahat = lcbc_forward(&mut tape, &vars, f, t, batch.len, Mode::Train, rng)?;
    let diff = tape.sub(ahat, a)?;
    let sq = tape.square(diff);
    let loss = tape.mean_all(sq);
    let total = tape.scalar(loss)?;
    let grads = tape.backward(loss)?;
    for t in p.tensors_mut() {
        t.zero_grad();
    }
    p.apply_grads(&vars, &grads);
    Ok(BatchValues {
        total,
        contrast: 0.0,
        latent: 0.0,
        action: total,
    })
}

fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    let t = step as f32 / total.max(1) as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
}

/// Fingerprint of the frozen perception stack via a fixed probe image.
fn perception_fingerprint() -> String {
    let probe = EgoRaster::filled([0.25, 0.5, 0.75]);
    fingerprint_tensors(&[&encode_patches(&probe).features])
}

/// Trains one adapter head on a collected corpus.
///
/// Latent heads optimize the combined objective at the tap selected by the
/// adapter config; the action-cloning head regresses teacher actions with a
/// plain mean squared error. Only adapter parameters are updated: the expert
/// and the perception stack are fingerprinted before and after as a freeze
/// check. A flat loss over the first three epochs is reported as a
/// diagnostic rather than an error.
pub fn train_adapter(
    dataset: &AlignmentDataset,
    expert: &ExpertPolicy,
    kind: HeadKind,
    adapter_cfg: &AdapterConfig,
    cfg: &AdapterTrainConfig,
    seed: u64,
) -> Result<(TrainedAdapter, AdapterTrainReport)> {
    adapter_cfg.validate()?;
    cfg.validate()?;
    let tap = TapDim::from_dim(adapter_cfg.d_z)?;
    let n = dataset.effective_len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least 2 effective samples, got {n}"
        )));
    }
    let expert_before = expert.fingerprint();
    let perception_before = perception_fingerprint();

    let mut model = match kind {
        HeadKind::Lclaa => TrainedAdapter::Lclaa(LclaaParams::new(*adapter_cfg, seed)),
        HeadKind::Lcbc => TrainedAdapter::Lcbc(LcbcParams::new(*adapter_cfg, seed)),
        HeadKind::Pela => TrainedAdapter::Pela(PelaParams::new(*adapter_cfg, seed)),
    };
    let sizes = match &model {
        TrainedAdapter::Lclaa(p) => p.param_sizes(),
        TrainedAdapter::Lcbc(p) => p.param_sizes(),
        TrainedAdapter::Pela(p) => p.param_sizes(),
    };
    let mut adam = Adam::new(&sizes, cfg.lr);
    // Decorrelate the shuffle and noise stream from the init stream.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let full = n / cfg.batch_size;
    let trailer = usize::from(n % cfg.batch_size >= 2);
    let total_steps = cfg.epochs * (full + trailer).max(1);

    let mut indices: Vec<usize> = (0..n).collect();
    let mut epochs_log = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut sums = BatchValues {
            total: 0.0,
            contrast: 0.0,
            latent: 0.0,
            action: 0.0,
        };
        let mut counted = 0usize;
        let mut epoch_lr = cfg.lr;
        let mut first = true;
        for chunk in indices.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let lr_now = if cfg.cosine_decay {
                cosine_lr(cfg.lr, steps, total_steps)
            } else {
                cfg.lr
            };
            if first {
                epoch_lr = lr_now;
                first = false;
            }
            adam.set_lr(lr_now);

            let batch = assemble(dataset, chunk, tap)?;
            let values = match &mut model {
                TrainedAdapter::Lclaa(p) => lclaa_step(p, expert, tap, &batch, cfg, &mut rng)?,
                TrainedAdapter::Lcbc(p) => lcbc_step(p, &batch, &mut rng)?,
                TrainedAdapter::Pela(p) => pela_step(p, expert, tap, &batch, cfg)?,
            };
            let mut tensors = match &mut model {
                TrainedAdapter::Lclaa(p) => p.tensors_mut(),
                TrainedAdapter::Lcbc(p) => p.tensors_mut(),
                TrainedAdapter::Pela(p) => p.tensors_mut(),
            };
            clip_grad_norm(&mut tensors, cfg.max_grad_norm);
            adam.step(&mut tensors)?;
            steps += 1;

            let w = chunk.len() as f64;
            sums.total += values.total * w;
            sums.contrast += values.contrast * w;
            sums.latent += values.latent * w;
            sums.action += values.action * w;
            counted += chunk.len();
        }
        let w = counted.max(1) as f64;
        epochs_log.push(EpochStats {
            epoch: epoch + 1,
            loss: sums.total / w,
            contrast: sums.contrast / w,
            latent_mse: sums.latent / w,
            action_mse: sums.action / w,
            lr: epoch_lr,
        });
    }

    let mut diagnostics = Vec::new();
    if epochs_log.len() >= 3 {
        let (l0, l1, l2) = (epochs_log[0].loss, epochs_log[1].loss, epochs_log[2].loss);
        if l1 >= l0 && l2 >= l1 {
            diagnostics.push(format!(
                "train loss did not decrease over the first 3 epochs \
                 ({l0:.6} -> {l1:.6} -> {l2:.6}); check the learning rate and batch size"
            ));
        }
    }

    assert_eq!(
        expert.fingerprint(),
        expert_before,
        "the expert must stay frozen during adapter training"
    );
    assert_eq!(
        perception_fingerprint(),
        perception_before,
        "the perception stack must stay frozen during adapter training"
    );

    Ok((
        model,
        AdapterTrainReport {
            epochs: epochs_log,
            diagnostics,
            steps,
        },
    ))
}
