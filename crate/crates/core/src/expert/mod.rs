//! Privileged navigation expert: MLP policy with exposed latent taps, a
//! separate value head, and frozen action-head suffixes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::OBS_DIM;
use crate::tensor::{Gradients, Tape, Var};
use crate::tensor::{matmul_acc, Tensor};

mod gae;
mod ppo;

pub use gae::compute_gae;
pub use ppo::{
    greedy_success_rate, ppo_update, train_expert, CurvePoint, ExpertTrainReport, LossReport,
    PpoConfig, RolloutBuffer,
};

/// Action dimensionality (left and right wheel commands).
pub const ACTION_DIM: usize = 2;
/// Trunk widths, which double as the latent tap dimensions.
pub const TAP_DIMS: [usize; 3] = [512, 256, 128];
const VALUE_HIDDEN: usize = 256;
const LOG_STD_INIT: f32 = -0.5;
const LOG_STD_MIN: f32 = -4.0;
const LOG_STD_MAX: f32 = 1.0;

/// Identifies one of the three trunk layers whose post-activation output is
/// exposed as a teacher latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TapDim {
    D512,
    D256,
    D128,
}

impl TapDim {
    pub fn dim(self) -> usize {
        match self {
            TapDim::D512 => 512,
            TapDim::D256 => 256,
            TapDim::D128 => 128,
        }
    }

    pub fn from_dim(d: usize) -> Result<Self> {
        match d {
            512 => Ok(TapDim::D512),
            256 => Ok(TapDim::D256),
            128 => Ok(TapDim::D128),
            other => Err(Error::InvalidArgument(format!(
                "no latent tap of dimension {other}; taps are 512, 256, 128"
            ))),
        }
    }

    pub fn all() -> [TapDim; 3] {
        [TapDim::D512, TapDim::D256, TapDim::D128]
    }
}

/// Result of a batched policy forward pass.
pub struct PolicyOutput {
    /// Action mean, one row per observation.
    pub mean: Tensor,
    /// Diagonal Gaussian standard deviation, shared across the batch.
    pub std: [f32; 2],
    /// State value estimates, one row per observation.
    pub value: Tensor,
    /// Post-activation trunk outputs at widths 512, 256, 128.
    pub latents: [Tensor; 3],
}

/// The privileged expert: trunk 159 -> 512 -> 256 -> 128 with tanh
/// activations, a linear action-mean head, two learned log-std scalars, and
/// a separate tanh MLP value head 159 -> 256 -> 256 -> 1.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    w_head: Tensor,
    b_head: Tensor,
    log_std: Tensor,
    vw1: Tensor,
    vb1: Tensor,
    vw2: Tensor,
    vb2: Tensor,
    vw3: Tensor,
    vb3: Tensor,
}

/// Tape handles for every trainable parameter, in checkpoint order.
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub w_head: Var,
    pub b_head: Var,
    pub log_std: Var,
    pub vw1: Var,
    pub vb1: Var,
    pub vw2: Var,
    pub vb2: Var,
    pub vw3: Var,
    pub vb3: Var,
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (x.rows(), w.rows(), w.cols());
    let mut out = vec![0.0f32; m * n];
    matmul_acc(x.data(), w.data(), m, k, n, &mut out);
    for row in out.chunks_mut(n) {
        for (o, bias) in row.iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    Tensor::new(vec![m, n], out).expect("shape is consistent by construction")
}

fn tanh_inplace(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.tanh();
    }
}

impl ExpertPolicy {
    /// Fresh policy with orthogonal init. The input layers use a small gain
    /// because raw observations reach magnitude ~20; the action head starts
    /// near zero so early rollouts are driven by exploration noise.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2, h3] = TAP_DIMS;
        ExpertPolicy {
            w1: Tensor::orthogonal(OBS_DIM, h1, 0.5, &mut rng),
            b1: Tensor::zeros(vec![1, h1]),
            w2: Tensor::orthogonal(h1, h2, 1.0, &mut rng),
            b2: Tensor::zeros(vec![1, h2]),
            w3: Tensor::orthogonal(h2, h3, 1.0, &mut rng),
            b3: Tensor::zeros(vec![1, h3]),
            w_head: Tensor::orthogonal(h3, ACTION_DIM, 0.01, &mut rng),
            b_head: Tensor::zeros(vec![1, ACTION_DIM]),
            log_std: Tensor::full(vec![1, ACTION_DIM], LOG_STD_INIT),
            vw1: Tensor::orthogonal(OBS_DIM, VALUE_HIDDEN, 0.5, &mut rng),
            vb1: Tensor::zeros(vec![1, VALUE_HIDDEN]),
            vw2: Tensor::orthogonal(VALUE_HIDDEN, VALUE_HIDDEN, 1.0, &mut rng),
            vb2: Tensor::zeros(vec![1, VALUE_HIDDEN]),
            vw3: Tensor::orthogonal(VALUE_HIDDEN, 1, 1.0, &mut rng),
            vb3: Tensor::zeros(vec![1, 1]),
        }
    }

    /// Architecture tag stored in checkpoints.
    pub const ARCHITECTURE: &'static str = "expert-mlp-159-512-256-128-2/value-256-256-1";

    /// Current action standard deviation after log-std clamping.
    pub fn action_std(&self) -> [f32; 2] {
        let d = self.log_std.data();
        [
            d[0].clamp(LOG_STD_MIN, LOG_STD_MAX).exp(),
            d[1].clamp(LOG_STD_MIN, LOG_STD_MAX).exp(),
        ]
    }

    /// Batched forward pass outside the tape.
    pub fn forward(&self, obs: &Tensor) -> Result<PolicyOutput> {
        if obs.cols() != OBS_DIM {
            return Err(Error::ShapeMismatch(format!(
                "expected observations of width {OBS_DIM}, got {}",
                obs.cols()
            )));
        }
        let mut h1 = linear(obs, &self.w1, &self.b1);
        tanh_inplace(&mut h1);
        let mut h2 = linear(&h1, &self.w2, &self.b2);
        tanh_inplace(&mut h2);
        let mut h3 = linear(&h2, &self.w3, &self.b3);
        tanh_inplace(&mut h3);
        let mean = linear(&h3, &self.w_head, &self.b_head);

        let mut v1 = linear(obs, &self.vw1, &self.vb1);
        tanh_inplace(&mut v1);
        let mut v2 = linear(&v1, &self.vw2, &self.vb2);
        tanh_inplace(&mut v2);
        let value = linear(&v2, &self.vw3, &self.vb3);

        Ok(PolicyOutput {
            mean,
            std: self.action_std(),
            value,
            latents: [h1, h2, h3],
        })
    }

    /// Runs the frozen remainder of the trunk from a tap latent to the
    /// action mean, outside the tape.
    pub fn suffix_forward(&self, tap: TapDim, z: &Tensor) -> Result<Tensor> {
        if z.cols() != tap.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latent width {} does not match tap {}",
                z.cols(),
                tap.dim()
            )));
        }
        let mut h = z.clone();
        if tap == TapDim::D512 {
            h = linear(&h, &self.w2, &self.b2);
            tanh_inplace(&mut h);
        }
        if tap != TapDim::D128 {
            h = linear(&h, &self.w3, &self.b3);
            tanh_inplace(&mut h);
        }
        Ok(linear(&h, &self.w_head, &self.b_head))
    }

    /// Registers every parameter on a tape for a training step.
    pub fn register_params(&self, tape: &mut Tape) -> ExpertVars {
        ExpertVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
            w3: tape.param(&self.w3),
            b3: tape.param(&self.b3),
            w_head: tape.param(&self.w_head),
            b_head: tape.param(&self.b_head),
            log_std: tape.param(&self.log_std),
            vw1: tape.param(&self.vw1),
            vb1: tape.param(&self.vb1),
            vw2: tape.param(&self.vw2),
            vb2: tape.param(&self.vb2),
            vw3: tape.param(&self.vw3),
            vb3: tape.param(&self.vb3),
        }
    }

    /// Trunk on the tape; returns the action mean and the tap latents.
    pub fn trunk_tape(
        &self,
        tape: &mut Tape,
        vars: &ExpertVars,
        obs: Var,
    ) -> Result<(Var, [Var; 3])> {
        let a1 = tape.matmul(obs, vars.w1)?;
        let a1 = tape.add_row(a1, vars.b1)?;
        let h1 = tape.tanh(a1);
        let a2 = tape.matmul(h1, vars.w2)?;
        let a2 = tape.add_row(a2, vars.b2)?;
        let h2 = tape.tanh(a2);
        let a3 = tape.matmul(h2, vars.w3)?;
        let a3 = tape.add_row(a3, vars.b3)?;
        let h3 = tape.tanh(a3);
        let mean = tape.matmul(h3, vars.w_head)?;
        let mean = tape.add_row(mean, vars.b_head)?;
        Ok((mean, [h1, h2, h3]))
    }

    /// Value head on the tape.
    pub fn value_tape(&self, tape: &mut Tape, vars: &ExpertVars, obs: Var) -> Result<Var> {
        let a1 = tape.matmul(obs, vars.vw1)?;
        let a1 = tape.add_row(a1, vars.vb1)?;
        let h1 = tape.tanh(a1);
        let a2 = tape.matmul(h1, vars.vw2)?;
        let a2 = tape.add_row(a2, vars.vb2)?;
        let h2 = tape.tanh(a2);
        let v = tape.matmul(h2, vars.vw3)?;
        tape.add_row(v, vars.vb3)
    }

    /// Clamped log-std as a tape variable.
    pub fn log_std_tape(&self, tape: &mut Tape, vars: &ExpertVars) -> Var {
        tape.clamp(vars.log_std, LOG_STD_MIN, LOG_STD_MAX)
    }

    /// Frozen suffix on a tape: weights enter as constants so gradients flow
    /// into the latent argument only, never into the expert.
    pub fn suffix_tape(&self, tape: &mut Tape, tap: TapDim, z: Var) -> Result<Var> {
        if tape.cols(z) != tap.dim() {
            return Err(Error::ShapeMismatch(format!(
                "latent width {} does not match tap {}",
                tape.cols(z),
                tap.dim()
            )));
        }
        let mut h = z;
        if tap == TapDim::D512 {
            let w = tape.constant_from(&self.w2);
            let b = tape.constant_from(&self.b2);
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = tape.tanh(a);
        }
        if tap != TapDim::D128 {
            let w = tape.constant_from(&self.w3);
            let b = tape.constant_from(&self.b3);
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = tape.tanh(a);
        }
        let w = tape.constant_from(&self.w_head);
        let b = tape.constant_from(&self.b_head);
        let a = tape.matmul(h, w)?;
        tape.add_row(a, b)
    }

    /// Copies gradients from a backward pass into parameter `.grad` slots.
    pub fn apply_grads(&mut self, vars: &ExpertVars, grads: &Gradients) {
        grads.apply_to(vars.w1, &mut self.w1);
        grads.apply_to(vars.b1, &mut self.b1);
        grads.apply_to(vars.w2, &mut self.w2);
        grads.apply_to(vars.b2, &mut self.b2);
        grads.apply_to(vars.w3, &mut self.w3);
        grads.apply_to(vars.b3, &mut self.b3);
        grads.apply_to(vars.w_head, &mut self.w_head);
        grads.apply_to(vars.b_head, &mut self.b_head);
        grads.apply_to(vars.log_std, &mut self.log_std);
        grads.apply_to(vars.vw1, &mut self.vw1);
        grads.apply_to(vars.vb1, &mut self.vb1);
        grads.apply_to(vars.vw2, &mut self.vw2);
        grads.apply_to(vars.vb2, &mut self.vb2);
        grads.apply_to(vars.vw3, &mut self.vw3);
        grads.apply_to(vars.vb3, &mut self.vb3);
    }

    /// Mutable parameter references. Order defines the checkpoint payload:
    /// w1, b1, w2, b2, w3, b3, w_head, b_head, log_std, vw1, vb1, vw2, vb2,
    /// vw3, vb3.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w_head,
            &mut self.b_head,
            &mut self.log_std,
            &mut self.vw1,
            &mut self.vb1,
            &mut self.vw2,
            &mut self.vb2,
            &mut self.vw3,
            &mut self.vb3,
        ]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w3,
            &self.b3,
            &self.w_head,
            &self.b_head,
            &self.log_std,
            &self.vw1,
            &self.vb1,
            &self.vw2,
            &self.vb2,
            &self.vw3,
            &self.vb3,
        ]
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.numel()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// All parameters concatenated in checkpoint order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in self.params() {
            out.extend_from_slice(p.data());
        }
        out
    }

    /// Loads a flat payload written by [`flatten`].
    pub fn load_flat(&mut self, data: &[f32]) -> Result<()> {
        if data.len() != self.param_count() {
            return Err(Error::ArchitectureMismatch(format!(
                "payload has {} values, architecture needs {}",
                data.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&data[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes in checkpoint order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Log density of a diagonal Gaussian at `action`.
pub fn gaussian_log_prob(mean: &[f32], std: [f32; 2], action: &[f32]) -> f32 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    let mut lp = 0.0f64;
    for d in 0..ACTION_DIM {
        let z = ((action[d] - mean[d]) / std[d]) as f64;
        lp += -0.5 * z * z - (std[d] as f64).ln() - HALF_LN_2PI;
    }
    lp as f32
}

/// Draws a raw (unclipped) action from the policy Gaussian.
pub fn sample_action<R: rand::Rng>(mean: &[f32], std: [f32; 2], rng: &mut R) -> [f32; 2] {
    use rand_distr::StandardNormal;
    let z0: f32 = rng.sample(StandardNormal);
    let z1: f32 = rng.sample(StandardNormal);
    [mean[0] + std[0] * z0, mean[1] + std[1] * z1]
}
