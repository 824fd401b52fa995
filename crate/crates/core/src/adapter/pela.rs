//! Pooled-embedding ablation: an MLP over mean-pooled patch features.
//!
//! PELA discards token-level conditioning entirely. The patch features are
//! averaged into a single vector, concatenated with the instruction
//! embedding, and pushed through a plain MLP to the latent width. It is the
//! "no structure" baseline the bottleneck architecture is measured against.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::perception::{D_IMG, D_TXT};
use crate::tensor::{Gradients, Tape, Tensor, Var};

use super::{fingerprint_tensors, flatten_tensors, load_flat_tensors, AdapterConfig};

const HIDDEN: usize = 512;

/// Three-layer MLP from pooled features to the latent width.
#[derive(Debug, Clone)]
pub struct PelaParams {
    pub cfg: AdapterConfig,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

/// Tape handles for `PelaParams`.
#[derive(Debug, Clone, Copy)]
pub struct PelaVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl PelaParams {
    pub fn new(cfg: AdapterConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PelaParams {
            cfg,
            w1: Tensor::orthogonal(D_IMG + D_TXT, HIDDEN, 1.0, &mut rng),
            b1: Tensor::zeros(vec![1, HIDDEN]),
            w2: Tensor::orthogonal(HIDDEN, HIDDEN, 1.0, &mut rng),
            b2: Tensor::zeros(vec![1, HIDDEN]),
            w3: Tensor::orthogonal(HIDDEN, cfg.d_z, 1.0, &mut rng),
            b3: Tensor::zeros(vec![1, cfg.d_z]),
        }
    }

    pub fn cfg(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.numel()).collect()
    }

    pub fn register(&self, tape: &mut Tape) -> PelaVars {
        let vars: Vec<Var> = self.tensors().into_iter().map(|t| tape.param(t)).collect();
        PelaVars::from_slice(&vars).expect("canonical order")
    }

    pub fn apply_grads(&mut self, vars: &PelaVars, grads: &Gradients) {
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

impl PelaVars {
    pub fn from_slice(vars: &[Var]) -> Result<Self> {
        if vars.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "PELA needs 6 vars, got {}",
                vars.len()
            )));
        }
        Ok(PelaVars {
            w1: vars[0],
            b1: vars[1],
            w2: vars[2],
            b2: vars[3],
            w3: vars[4],
            b3: vars[5],
        })
    }

    pub fn list(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Averages n rows per block: (batch * n) x C collapses to batch x C.
pub fn mean_pool_rows(tape: &mut Tape, x: Var, batch: usize) -> Result<Var> {
    let n = tape.rows(x) / batch;
    if n == 0 || tape.rows(x) != batch * n {
        return Err(Error::ShapeMismatch(format!(
            "cannot pool {} rows into {batch} blocks",
            tape.rows(x)
        )));
    }
    let weights = tape.constant(batch, n, vec![1.0 / n as f32; batch * n])?;
    tape.weighted_block_sum(weights, x)
}

/// PELA forward: mean-pool patches, concatenate text, run the MLP.
///
/// `patches` is (batch * N) x D_img, `text` is batch x D_txt; returns
/// batch x d_z.
pub fn pela_forward(
    tape: &mut Tape,
    vars: &PelaVars,
    patches: Var,
    text: Var,
    batch: usize,
) -> Result<Var> {
    let pooled = mean_pool_rows(tape, patches, batch)?;
    let joint = tape.concat_cols(pooled, text)?;
    let h1 = tape.matmul(joint, vars.w1)?;
    let h1 = tape.add_row(h1, vars.b1)?;
    let h1 = tape.tanh(h1);
    let h2 = tape.matmul(h1, vars.w2)?;
    let h2 = tape.add_row(h2, vars.b2)?;
    let h2 = tape.tanh(h2);
    let out = tape.matmul(h2, vars.w3)?;
    tape.add_row(out, vars.b3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::LclaaParams;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};

    fn rand_mat<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn widths_and_parameter_count_match_the_fixed_architecture() {
        for d_z in [128usize, 256, 512] {
            let cfg = AdapterConfig {
                d_z,
                ..AdapterConfig::default()
            };
            let params = PelaParams::new(cfg, 0);
            assert_eq!(params.w1.shape(), &[128, 512]);
            assert_eq!(params.w2.shape(), &[512, 512]);
            assert_eq!(params.w3.shape(), &[512, d_z]);
            let want = 128 * 512 + 512 + 512 * 512 + 512 + 512 * d_z + d_z;
            assert_eq!(params.param_count(), want);
        }
    }

    #[test]
    fn zeroed_final_layer_outputs_zero_latents() {
        let cfg = AdapterConfig::default();
        let mut params = PelaParams::new(cfg, 1);
        for v in params.w3.data_mut() {
            *v = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = 2;
        let patches = rand_mat(batch * 5, D_IMG, &mut rng);
        let text = rand_mat(batch, D_TXT, &mut rng);

        let mut tape = Tape::new_inference();
        let vars = params.register(&mut tape);
        let p = tape.constant_from(&patches);
        let t = tape.constant_from(&text);
        let out = pela_forward(&mut tape, &vars, p, t, batch).unwrap();
        assert_eq!(tape.rows(out), batch);
        assert_eq!(tape.cols(out), cfg.d_z);
        assert!(tape.value(out).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn patch_order_does_not_change_the_output() {
        let cfg = AdapterConfig::default();
        let params = PelaParams::new(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6;
        let patches = rand_mat(n, D_IMG, &mut rng);
        let text = rand_mat(1, D_TXT, &mut rng);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let mut shuffled = vec![0.0f32; n * D_IMG];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled[dst * D_IMG..(dst + 1) * D_IMG]
                .copy_from_slice(&patches.data()[src * D_IMG..(src + 1) * D_IMG]);
        }
        let shuffled = Tensor::new(vec![n, D_IMG], shuffled).unwrap();

        let run = |input: &Tensor| -> Vec<f32> {
            let mut tape = Tape::new_inference();
            let vars = params.register(&mut tape);
            let p = tape.constant_from(input);
            let t = tape.constant_from(&text);
            let out = pela_forward(&mut tape, &vars, p, t, 1).unwrap();
            tape.value(out).to_vec()
        };
        let a = run(&patches);
        let b = run(&shuffled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_pool_matches_the_direct_average() {
        let mut tape = Tape::new_inference();
        let x = tape
            .constant(4, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0])
            .unwrap();
        let pooled = mean_pool_rows(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(pooled), &[2.0, 3.0, 20.0, 30.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Shapes live on the tape, so a narrow stand-in checks the same graph
        // construction without perturbing four hundred thousand weights.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = 2;
        let n = 3;
        let pc = 4;
        let tc = 3;
        let patches = rand_mat(batch * n, pc, &mut rng);
        let text = rand_mat(batch, tc, &mut rng);
        let tensors = vec![
            rand_mat(pc + tc, 5, &mut rng),
            rand_mat(1, 5, &mut rng),
            rand_mat(5, 5, &mut rng),
            rand_mat(1, 5, &mut rng),
            rand_mat(5, 2, &mut rng),
            rand_mat(1, 2, &mut rng),
        ];
        let report = grad_check(
            &tensors,
            |tape, vars| {
                let v = PelaVars::from_slice(vars)?;
                let p = tape.constant_from(&patches);
                let t = tape.constant_from(&text);
                let out = pela_forward(tape, &v, p, t, batch)?;
                let sq = tape.square(out);
                Ok(tape.mean_all(sq))
            },
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn bottleneck_adapter_has_more_parameters_than_the_pooled_baseline() {
        for d_z in [128usize, 256, 512] {
            let cfg = AdapterConfig {
                d_z,
                ..AdapterConfig::default()
            };
            let lclaa = LclaaParams::new(cfg, 0);
            let pela = PelaParams::new(cfg, 0);
            assert!(
                lclaa.param_count() > pela.param_count(),
                "d_z {d_z}: {} <= {}",
                lclaa.param_count(),
                pela.param_count()
            );
        }
    }

    #[test]
    fn flatten_round_trips() {
        let cfg = AdapterConfig::default();
        let a = PelaParams::new(cfg, 7);
        let mut b = PelaParams::new(cfg, 8);
        assert_ne!(a.fingerprint(), b.fingerprint());
        b.load_flat(&a.flatten()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }
}
