//! Language-conditioned latent alignment adapter and its ablation heads.
//!
//! The LCLAA maps frozen patch features and an instruction embedding to a
//! predicted expert latent: patches are projected and contextualized with
//! self-attention, collapsed into a single instruction-scored bottleneck
//! token, refined by cross-attention queries, fused with the text residual
//! through a sigmoid gate, and projected to the latent width. Two ablations
//! share the encoder: LCBC regresses actions directly and PELA replaces the
//! whole mechanism with an MLP over pooled features.

mod lcbc;
mod pela;

pub use lcbc::{lcbc_forward, LcbcParams, LcbcVars};
pub use pela::{mean_pool_rows, pela_forward, PelaParams, PelaVars};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::perception::{D_IMG, D_TXT};
use crate::tensor::{Gradients, Tape, Tensor, Var};

const LN_EPS: f32 = 1e-5;

/// Architecture knobs shared by the adapter heads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Shared hidden width H.
    pub h: usize,
    /// Number of learnable query tokens M.
    pub m: usize,
    /// Number of stacked cross-attention blocks B.
    pub blocks: usize,
    /// Attention heads in both self- and cross-attention.
    pub heads: usize,
    /// Bottleneck softmax temperature.
    pub tau: f32,
    /// Gumbel noise scale applied to bottleneck scores in train mode.
    pub gumbel_scale: f32,
    /// Output latent width; must match one of the expert tap widths.
    pub d_z: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            h: 128,
            m: 4,
            blocks: 2,
            heads: 4,
            tau: 1.0,
            gumbel_scale: 0.5,
            d_z: 256,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if ![128usize, 256, 512].contains(&self.d_z) {
            return Err(Error::InvalidArgument(format!(
                "latent width {} is not an expert tap width (128, 256 or 512)",
                self.d_z
            )));
        }
        if self.h == 0 || self.heads == 0 || self.h % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden width {} must be a positive multiple of {} heads",
                self.h, self.heads
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidArgument("need at least one learnable query".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Whether the bottleneck injects Gumbel noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn orth<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::orthogonal(rows, cols, 1.0, rng)
}

fn zeros_row(cols: usize) -> Tensor {
    Tensor::zeros(vec![1, cols])
}

fn ones_row(cols: usize) -> Tensor {
    Tensor::new(vec![1, cols], vec![1.0; cols]).expect("fixed shape")
}

/// One cross-attention block: attention, feed-forward, two layer norms.
#[derive(Debug, Clone)]
pub struct CrossBlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
    pub ln_attn_gamma: Tensor,
    pub ln_attn_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln_ff_gamma: Tensor,
    pub ln_ff_beta: Tensor,
}

impl CrossBlockParams {
    fn new<R: Rng>(h: usize, rng: &mut R) -> Self {
        CrossBlockParams {
            wq: orth(h, h, rng),
            wk: orth(h, h, rng),
            wv: orth(h, h, rng),
            wo: orth(h, h, rng),
            bq: zeros_row(h),
            bk: zeros_row(h),
            bv: zeros_row(h),
            bo: zeros_row(h),
            ln_attn_gamma: ones_row(h),
            ln_attn_beta: zeros_row(h),
            ff_w1: orth(h, 2 * h, rng),
            ff_b1: zeros_row(2 * h),
            ff_w2: orth(2 * h, h, rng),
            ff_b2: zeros_row(h),
            ln_ff_gamma: ones_row(h),
            ln_ff_beta: zeros_row(h),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.bq,
            &self.bk,
            &self.bv,
            &self.bo,
            &self.ln_attn_gamma,
            &self.ln_attn_beta,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
            &self.ln_ff_gamma,
            &self.ln_ff_beta,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bq,
            &mut self.bk,
            &mut self.bv,
            &mut self.bo,
            &mut self.ln_attn_gamma,
            &mut self.ln_attn_beta,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
            &mut self.ln_ff_gamma,
            &mut self.ln_ff_beta,
        ]
    }
}

/// Shared encoder: everything from patch projection through gated fusion.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: AdapterConfig,
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub sa_wq: Tensor,
    pub sa_wk: Tensor,
    pub sa_wv: Tensor,
    pub sa_wo: Tensor,
    pub sa_bq: Tensor,
    pub sa_bk: Tensor,
    pub sa_bv: Tensor,
    pub sa_bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub g_w1: Tensor,
    pub g_b1: Tensor,
    pub g_w2: Tensor,
    pub g_b2: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub queries: Tensor,
    pub cross: Vec<CrossBlockParams>,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_t: Tensor,
    pub b_t: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
}

impl EncoderParams {
    pub fn new<R: Rng>(cfg: AdapterConfig, rng: &mut R) -> Self {
        let h = cfg.h;
        EncoderParams {
            cfg,
            w_p: orth(D_IMG, h, rng),
            b_p: zeros_row(h),
            sa_wq: orth(h, h, rng),
            sa_wk: orth(h, h, rng),
            sa_wv: orth(h, h, rng),
            sa_wo: orth(h, h, rng),
            sa_bq: zeros_row(h),
            sa_bk: zeros_row(h),
            sa_bv: zeros_row(h),
            sa_bo: zeros_row(h),
            ln1_gamma: ones_row(h),
            ln1_beta: zeros_row(h),
            w_s: orth(D_TXT, h, rng),
            b_s: zeros_row(h),
            g_w1: orth(2 * h, h, rng),
            g_b1: zeros_row(h),
            g_w2: orth(h, 1, rng),
            g_b2: zeros_row(1),
            w_q: orth(D_TXT, h, rng),
            b_q: zeros_row(h),
            queries: orth(cfg.m, h, rng),
            cross: (0..cfg.blocks).map(|_| CrossBlockParams::new(h, rng)).collect(),
            w_h: orth((cfg.m + 1) * h, h, rng),
            b_h: zeros_row(h),
            w_t: orth(D_TXT, h, rng),
            b_t: zeros_row(h),
            w_g: orth(2 * h, h, rng),
            b_g: zeros_row(h),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.w_p,
            &self.b_p,
            &self.sa_wq,
            &self.sa_wk,
            &self.sa_wv,
            &self.sa_wo,
            &self.sa_bq,
            &self.sa_bk,
            &self.sa_bv,
            &self.sa_bo,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_s,
            &self.b_s,
            &self.g_w1,
            &self.g_b1,
            &self.g_w2,
            &self.g_b2,
            &self.w_q,
            &self.b_q,
            &self.queries,
        ];
        for c in &self.cross {
            v.extend(c.tensors());
        }
        v.extend([&self.w_h, &self.b_h, &self.w_t, &self.b_t, &self.w_g, &self.b_g]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.w_p,
            &mut self.b_p,
            &mut self.sa_wq,
            &mut self.sa_wk,
            &mut self.sa_wv,
            &mut self.sa_wo,
            &mut self.sa_bq,
            &mut self.sa_bk,
            &mut self.sa_bv,
            &mut self.sa_bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_s,
            &mut self.b_s,
            &mut self.g_w1,
            &mut self.g_b1,
            &mut self.g_w2,
            &mut self.g_b2,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.queries,
        ];
        for c in &mut self.cross {
            v.extend(c.tensors_mut());
        }
        v.extend([
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_t,
            &mut self.b_t,
            &mut self.w_g,
            &mut self.b_g,
        ]);
        v
    }
}

/// Tape handles for one cross-attention block.
#[derive(Debug, Clone, Copy)]
pub struct CrossBlockVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Var,
    pub bk: Var,
    pub bv: Var,
    pub bo: Var,
    pub ln_attn_gamma: Var,
    pub ln_attn_beta: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub ln_ff_gamma: Var,
    pub ln_ff_beta: Var,
}

/// Tape handles for the shared encoder, in `EncoderParams::tensors` order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub cfg: AdapterConfig,
    pub w_p: Var,
    pub b_p: Var,
    pub sa_wq: Var,
    pub sa_wk: Var,
    pub sa_wv: Var,
    pub sa_wo: Var,
    pub sa_bq: Var,
    pub sa_bk: Var,
    pub sa_bv: Var,
    pub sa_bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_s: Var,
    pub b_s: Var,
    pub g_w1: Var,
    pub g_b1: Var,
    pub g_w2: Var,
    pub g_b2: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub queries: Var,
    pub cross: Vec<CrossBlockVars>,
    pub w_h: Var,
    pub b_h: Var,
    pub w_t: Var,
    pub b_t: Var,
    pub w_g: Var,
    pub b_g: Var,
}

impl EncoderVars {
    /// Rebuilds the structured view from a flat var list in canonical order.
    pub fn from_slice(cfg: AdapterConfig, vars: &[Var]) -> Result<(Self, usize)> {
        let need = 27 + 16 * cfg.blocks;
        if vars.len() < need {
            return Err(Error::InvalidArgument(format!(
                "encoder needs {need} vars, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let head = EncoderVars {
            cfg,
            w_p: next(),
            b_p: next(),
            sa_wq: next(),
            sa_wk: next(),
            sa_wv: next(),
            sa_wo: next(),
            sa_bq: next(),
            sa_bk: next(),
            sa_bv: next(),
            sa_bo: next(),
            ln1_gamma: next(),
            ln1_beta: next(),
            w_s: next(),
            b_s: next(),
            g_w1: next(),
            g_b1: next(),
            g_w2: next(),
            g_b2: next(),
            w_q: next(),
            b_q: next(),
            queries: next(),
            cross: (0..cfg.blocks)
                .map(|_| CrossBlockVars {
                    wq: next(),
                    wk: next(),
                    wv: next(),
                    wo: next(),
                    bq: next(),
                    bk: next(),
                    bv: next(),
                    bo: next(),
                    ln_attn_gamma: next(),
                    ln_attn_beta: next(),
                    ff_w1: next(),
                    ff_b1: next(),
                    ff_w2: next(),
                    ff_b2: next(),
                    ln_ff_gamma: next(),
                    ln_ff_beta: next(),
                })
                .collect(),
            w_h: next(),
            b_h: next(),
            w_t: next(),
            b_t: next(),
            w_g: next(),
            b_g: next(),
        };
        Ok((head, need))
    }

    /// Flat var list in canonical order, inverse of `from_slice`.
    pub fn list(&self) -> Vec<Var> {
        let mut v = vec![
            self.w_p,
            self.b_p,
            self.sa_wq,
            self.sa_wk,
            self.sa_wv,
            self.sa_wo,
            self.sa_bq,
            self.sa_bk,
            self.sa_bv,
            self.sa_bo,
            self.ln1_gamma,
            self.ln1_beta,
            self.w_s,
            self.b_s,
            self.g_w1,
            self.g_b1,
            self.g_w2,
            self.g_b2,
            self.w_q,
            self.b_q,
            self.queries,
        ];
        for c in &self.cross {
            v.extend([
                c.wq,
                c.wk,
                c.wv,
                c.wo,
                c.bq,
                c.bk,
                c.bv,
                c.bo,
                c.ln_attn_gamma,
                c.ln_attn_beta,
                c.ff_w1,
                c.ff_b1,
                c.ff_w2,
                c.ff_b2,
                c.ln_ff_gamma,
                c.ln_ff_beta,
            ]);
        }
        v.extend([self.w_h, self.b_h, self.w_t, self.b_t, self.w_g, self.b_g]);
        v
    }
}

/// Full LCLAA: shared encoder plus the latent projection MLP.
#[derive(Debug, Clone)]
pub struct LclaaParams {
    pub enc: EncoderParams,
    pub out_w1: Tensor,
    pub out_b1: Tensor,
    pub out_w2: Tensor,
    pub out_b2: Tensor,
}

/// Tape handles for the full LCLAA.
#[derive(Debug, Clone)]
pub struct LclaaVars {
    pub enc: EncoderVars,
    pub out_w1: Var,
    pub out_b1: Var,
    pub out_w2: Var,
    pub out_b2: Var,
}

impl LclaaParams {
    pub fn new(cfg: AdapterConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::new(cfg, &mut rng);
        let h = cfg.h;
        LclaaParams {
            enc,
            out_w1: orth(h, h, &mut rng),
            out_b1: zeros_row(h),
            out_w2: orth(h, cfg.d_z, &mut rng),
            out_b2: zeros_row(cfg.d_z),
        }
    }

    pub fn cfg(&self) -> &AdapterConfig {
        &self.enc.cfg
    }

    /// Canonical parameter order; defines the checkpoint payload.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.enc.tensors();
        v.extend([&self.out_w1, &self.out_b1, &self.out_w2, &self.out_b2]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.enc.tensors_mut();
        v.extend([&mut self.out_w1, &mut self.out_b1, &mut self.out_w2, &mut self.out_b2]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.numel()).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> LclaaVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        LclaaVars::from_slice(self.enc.cfg, &vars).expect("canonical order")
    }

    pub fn apply_grads(&mut self, vars: &LclaaVars, grads: &Gradients) {
        for (var, t) in vars.list().into_iter().zip(self.tensors_mut()) {
            grads.apply_to(var, t);
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        flatten_tensors(&self.tensors())
    }

    pub fn load_flat(&mut self, data: &[f32]) -> Result<()> {
        load_flat_tensors(&mut self.tensors_mut(), data)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_tensors(&self.tensors())
    }
}

impl LclaaVars {
    pub fn from_slice(cfg: AdapterConfig, vars: &[Var]) -> Result<Self> {
        let (enc, used) = EncoderVars::from_slice(cfg, vars)?;
        if vars.len() != used + 4 {
            return Err(Error::InvalidArgument(format!(
                "LCLAA needs {} vars, got {}",
                used + 4,
                vars.len()
            )));
        }
        Ok(LclaaVars {
            enc,
            out_w1: vars[used],
            out_b1: vars[used + 1],
            out_w2: vars[used + 2],
            out_b2: vars[used + 3],
        })
    }

    pub fn list(&self) -> Vec<Var> {
        let mut v = self.enc.list();
        v.extend([self.out_w1, self.out_b1, self.out_w2, self.out_b2]);
        v
    }
}

pub(crate) fn flatten_tensors(ts: &[&Tensor]) -> Vec<f32> {
    let mut out = Vec::with_capacity(ts.iter().map(|t| t.numel()).sum());
    for t in ts {
        out.extend_from_slice(t.data());
    }
    out
}

pub(crate) fn load_flat_tensors(ts: &mut [&mut Tensor], data: &[f32]) -> Result<()> {
    let total: usize = ts.iter().map(|t| t.numel()).sum();
    if data.len() != total {
        return Err(Error::ArchitectureMismatch(format!(
            "parameter payload holds {} values, model needs {total}",
            data.len()
        )));
    }
    let mut off = 0;
    for t in ts.iter_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&data[off..off + n]);
        off += n;
    }
    Ok(())
}

pub(crate) fn fingerprint_tensors(ts: &[&Tensor]) -> String {
    let mut hasher = Sha256::new();
    for t in ts {
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn layer_norm_affine(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let scaled = tape.mul_row(n, gamma)?;
    tape.add_row(scaled, beta)
}

/// Projects patches to width H and contextualizes them with residual
/// multi-head self-attention and layer norm.
///
/// `patches` is (batch * N) x D_img; returns (batch * N) x H.
pub fn contextualize_patches(
    tape: &mut Tape,
    enc: &EncoderVars,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let x0 = linear(tape, patches, enc.w_p, enc.b_p)?;
    let q = linear(tape, x0, enc.sa_wq, enc.sa_bq)?;
    let k = linear(tape, x0, enc.sa_wk, enc.sa_bk)?;
    let v = linear(tape, x0, enc.sa_wv, enc.sa_bv)?;
    let attn = tape.attention(q, k, v, batch, enc.cfg.heads)?;
    let attn_o = linear(tape, attn, enc.sa_wo, enc.sa_bo)?;
    let res = tape.add(x0, attn_o)?;
    layer_norm_affine(tape, res, enc.ln1_gamma, enc.ln1_beta)
}

/// Bottleneck stage outputs, kept as graph nodes so losses and regularizers
/// can attach to them.
#[derive(Debug, Clone, Copy)]
pub struct Bottleneck {
    /// Pre-noise scores, batch x N.
    pub scores: Var,
    /// Softmax attention weights, batch x N.
    pub alpha: Var,
    /// Convex aggregate of contextualized patches, batch x H.
    pub xbar: Var,
}

/// Scores each contextualized patch against the projected instruction and
/// collapses the patch set into one convex-combination token.
///
/// In train mode, Gumbel noise of the configured scale perturbs the scores
/// before normalization; eval mode is deterministic and ignores `rng`.
pub fn language_bottleneck<R: Rng>(
    tape: &mut Tape,
    enc: &EncoderVars,
    x: Var,
    text: Var,
    batch: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Bottleneck> {
    let n = tape.rows(x) / batch;
    let t_tilde = linear(tape, text, enc.w_s, enc.b_s)?;
    let t_rep = tape.repeat_row_per_block(t_tilde, n);
    let joint = tape.concat_cols(x, t_rep)?;
    let hidden = linear(tape, joint, enc.g_w1, enc.g_b1)?;
    let hidden = tape.tanh(hidden);
    let s = linear(tape, hidden, enc.g_w2, enc.g_b2)?;
    let scores = tape.reshape(s, batch, n)?;

    let noisy = if mode == Mode::Train && enc.cfg.gumbel_scale > 0.0 {
        let noise: Vec<f32> = (0..batch * n)
            .map(|_| {
                let u: f64 = rng.gen_range(1e-9..1.0);
                (-(-u.ln()).ln() * enc.cfg.gumbel_scale as f64) as f32
            })
            .collect();
        let g = tape.constant(batch, n, noise)?;
        tape.add(scores, g)?
    } else {
        scores
    };
    let alpha = tape.softmax_rows(noisy, enc.cfg.tau)?;
    let xbar = tape.weighted_block_sum(alpha, x)?;
    Ok(Bottleneck { scores, alpha, xbar })
}

/// Builds the query stack [text query; M learnable queries] and refines it
/// with B cross-attention blocks over the bottleneck token.
///
/// Returns (batch * (M+1)) x H refined queries.
pub fn refine_queries(
    tape: &mut Tape,
    enc: &EncoderVars,
    xbar: Var,
    text: Var,
    batch: usize,
) -> Result<Var> {
    let cfg = enc.cfg;
    let q0 = linear(tape, text, enc.w_q, enc.b_q)?;
    let learned = tape.tile_rows(enc.queries, batch);
    let learned = tape.reshape(learned, batch, cfg.m * cfg.h)?;
    let stacked = tape.concat_cols(q0, learned)?;
    let mut q = tape.reshape(stacked, batch * (cfg.m + 1), cfg.h)?;

    for block in &enc.cross {
        let qq = linear(tape, q, block.wq, block.bq)?;
        let kk = linear(tape, xbar, block.wk, block.bk)?;
        let vv = linear(tape, xbar, block.wv, block.bv)?;
        let attn = tape.attention(qq, kk, vv, batch, cfg.heads)?;
        let attn_o = linear(tape, attn, block.wo, block.bo)?;
        let res = tape.add(q, attn_o)?;
        let normed = layer_norm_affine(tape, res, block.ln_attn_gamma, block.ln_attn_beta)?;
        let ff = linear(tape, normed, block.ff_w1, block.ff_b1)?;
        let ff = tape.tanh(ff);
        let ff = linear(tape, ff, block.ff_w2, block.ff_b2)?;
        let res2 = tape.add(normed, ff)?;
        q = layer_norm_affine(tape, res2, block.ln_ff_gamma, block.ln_ff_beta)?;
    }
    Ok(q)
}

/// Gated fusion of the flattened queries with the text residual.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    /// Fused representation h, batch x H.
    pub fused: Var,
    /// Sigmoid gate g, batch x H.
    pub gate: Var,
    /// Projected query path h-tilde, batch x H.
    pub query_path: Var,
    /// Projected text residual t, batch x H.
    pub text_path: Var,
}

/// Flattens the refined queries and gates them against the projected text:
/// h = g * h_tilde + (1 - g) * t.
pub fn fuse_queries(
    tape: &mut Tape,
    enc: &EncoderVars,
    queries: Var,
    text: Var,
    batch: usize,
) -> Result<Fusion> {
    let cfg = enc.cfg;
    let flat = tape.reshape(queries, batch, (cfg.m + 1) * cfg.h)?;
    let h_tilde = linear(tape, flat, enc.w_h, enc.b_h)?;
    let t_proj = linear(tape, text, enc.w_t, enc.b_t)?;
    let joint = tape.concat_cols(h_tilde, t_proj)?;
    let gate_pre = linear(tape, joint, enc.w_g, enc.b_g)?;
    let gate = tape.sigmoid(gate_pre);
    let diff = tape.sub(h_tilde, t_proj)?;
    let gated = tape.mul(gate, diff)?;
    let fused = tape.add(t_proj, gated)?;
    Ok(Fusion {
        fused,
        gate,
        query_path: h_tilde,
        text_path: t_proj,
    })
}

/// Latent projection MLP applied to the fused representation.
pub fn project_latent(tape: &mut Tape, vars: &LclaaVars, fused: Var) -> Result<Var> {
    let h1 = linear(tape, fused, vars.out_w1, vars.out_b1)?;
    let h1 = tape.tanh(h1);
    linear(tape, h1, vars.out_w2, vars.out_b2)
}

/// Gated fusion followed by the latent projection, returning z-hat.
pub fn fuse_and_project(
    tape: &mut Tape,
    vars: &LclaaVars,
    queries: Var,
    text: Var,
    batch: usize,
) -> Result<Var> {
    let fusion = fuse_queries(tape, &vars.enc, queries, text, batch)?;
    project_latent(tape, vars, fusion.fused)
}

/// All graph nodes of one LCLAA forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LclaaForward {
    pub z: Var,
    pub scores: Var,
    pub alpha: Var,
    pub xbar: Var,
    pub fused: Var,
    pub gate: Var,
}

/// Full adapter forward: contextualize, bottleneck, refine, fuse, project.
///
/// `patches` is (batch * N) x D_img and `text` is batch x D_txt. Eval mode
/// is a pure function of the inputs and parameters.
pub fn lclaa_forward<R: Rng>(
    tape: &mut Tape,
    vars: &LclaaVars,
    patches: Var,
    text: Var,
    batch: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<LclaaForward> {
    let x = contextualize_patches(tape, &vars.enc, patches, batch)?;
    let bottleneck = language_bottleneck(tape, &vars.enc, x, text, batch, mode, rng)?;
    let queries = refine_queries(tape, &vars.enc, bottleneck.xbar, text, batch)?;
    let fusion = fuse_queries(tape, &vars.enc, queries, text, batch)?;
    let z = project_latent(tape, vars, fusion.fused)?;
    Ok(LclaaForward {
        z,
        scores: bottleneck.scores,
        alpha: bottleneck.alpha,
        xbar: bottleneck.xbar,
        fused: fusion.fused,
        gate: fusion.gate,
    })
}

/// Concrete bottleneck values extracted from a forward pass.
#[derive(Debug, Clone)]
pub struct BottleneckTrace {
    /// Pre-noise scores, batch x N.
    pub scores: Tensor,
    /// Attention weights, batch x N; each row is nonnegative and sums to 1.
    pub alpha: Tensor,
    /// Aggregated token, batch x H.
    pub xbar: Tensor,
}

impl BottleneckTrace {
    pub fn from_tape(tape: &Tape, fwd: &LclaaForward) -> Self {
        let grab = |v: Var| {
            let cols = tape.cols(v);
            let data = tape.value(v).to_vec();
            Tensor::new(vec![data.len() / cols, cols], data).expect("tape shape")
        };
        BottleneckTrace {
            scores: grab(fwd.scores),
            alpha: grab(fwd.alpha),
            xbar: grab(fwd.xbar),
        }
    }
}

/// Convenience single-batch eval forward on an inference tape.
pub fn lclaa_eval(params: &LclaaParams, patches: &Tensor, text: &Tensor) -> Result<(Vec<f32>, BottleneckTrace)> {
    let batch = text.rows();
    let mut tape = Tape::new_inference();
    let vars = params.register(&mut tape);
    let p = tape.constant_from(patches);
    let t = tape.constant_from(text);
    let mut rng = rand::rngs::mock::StepRng::new(0, 1);
    let fwd = lclaa_forward(&mut tape, &vars, p, t, batch, Mode::Eval, &mut rng)?;
    let trace = BottleneckTrace::from_tape(&tape, &fwd);
    Ok((tape.value(fwd.z).to_vec(), trace))
}
