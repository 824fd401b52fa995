//! Latent-space stability analyses of the frozen action head.
//!
//! Two empirical probes: a sampled Lipschitz estimate of the head as a map
//! from latents to wheel commands, and closed-loop noise injection where
//! isotropic Gaussian noise is added to the expert's own latent at every
//! control step before the frozen suffix decodes it. Noise scales are
//! expressed as multiples of the corpus latent standard deviation so the
//! sweep transfers across training runs; passing a scale of one recovers
//! absolute units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{ExpertPolicy, TapDim};
use crate::featurize::{build_privileged_obs, layout_clusters, NUM_CLUSTERS, OBS_DIM};
use crate::sim::{NavEnv, Outcome, RewardParams, RoomLayout, SimParams};
use crate::tensor::Tensor;

/// Pairs below this separation are treated as coincident and skipped.
const COINCIDENT_EPS: f64 = 1e-9;

/// Relative step size for local-slope perturbation pairs.
const LOCAL_STEP: f64 = 1e-3;

/// Smallest pair budget that gives a stable max-ratio estimate.
pub const MIN_LIPSCHITZ_PAIRS: usize = 1000;

/// Sampled Lipschitz statistics of a latent-to-action map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    /// Pairs that actually entered the estimate after skipping coincident
    /// samples.
    pub pairs: usize,
    pub mean: f64,
    pub max: f64,
    pub d_z: usize,
    pub seed: u64,
}

/// Closed-loop success rates under latent noise of increasing scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    /// Noise scales as multiples of `zeta`, ascending.
    pub sigmas: Vec<f32>,
    /// Success rate in percent, one entry per sigma.
    pub sr: Vec<f32>,
    pub episodes_per_point: usize,
    /// Corpus latent standard deviation the scales multiply.
    pub zeta: f32,
    pub seed: u64,
}

impl NoiseSweepReport {
    pub fn csv_header() -> &'static str {
        "sigma,sr,episodes,zeta,seed"
    }

    pub fn csv_rows(&self) -> String {
        self.sigmas
            .iter()
            .zip(&self.sr)
            .map(|(s, r)| {
                format!(
                    "{s},{r:.3},{},{},{}",
                    self.episodes_per_point, self.zeta, self.seed
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Standard deviation of all corpus entries, used as the latent unit.
pub fn latent_std(corpus: &Tensor) -> f32 {
    let data = corpus.data();
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|v| {
            let d = *v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt() as f32
}

/// Estimates the Lipschitz constant of `head` over a latent corpus.
///
/// Half the budget samples random corpus pairs for global smoothness, half
/// perturbs single corpus rows by a step of `1e-3` times the corpus
/// standard deviation for the local slope. Ratios are
/// `|head(z1) - head(z2)| / |z1 - z2|` in f64; coincident pairs are
/// skipped rather than resampled.
pub fn estimate_lipschitz(
    head: &dyn Fn(&Tensor) -> Result<Tensor>,
    corpus: &Tensor,
    n_pairs: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    if n_pairs < MIN_LIPSCHITZ_PAIRS {
        return Err(Error::InvalidArgument(format!(
            "{n_pairs} pairs is below the minimum of {MIN_LIPSCHITZ_PAIRS}"
        )));
    }
    let rows = corpus.rows();
    let d = corpus.cols();
    if rows < 2 {
        return Err(Error::InvalidArgument(format!(
            "latent corpus needs at least 2 rows, got {rows}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = LOCAL_STEP * latent_std(corpus) as f64;
    let data = corpus.data();
    let row = |i: usize| &data[i * d..(i + 1) * d];

    let n_corpus = n_pairs / 2;
    let mut z1 = Vec::with_capacity(n_pairs * d);
    let mut z2 = Vec::with_capacity(n_pairs * d);
    for _ in 0..n_corpus {
        let i = rng.gen_range(0..rows);
        let j = rng.gen_range(0..rows);
        z1.extend_from_slice(row(i));
        z2.extend_from_slice(row(j));
    }
    for _ in 0..n_pairs - n_corpus {
        let i = rng.gen_range(0..rows);
        let dir: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        z1.extend_from_slice(row(i));
        for (k, g) in dir.iter().enumerate() {
            z2.push(row(i)[k] + (step * g / norm) as f32);
        }
    }

    let a1 = head(&Tensor::new(vec![n_pairs, d], z1.clone())?)?;
    let a2 = head(&Tensor::new(vec![n_pairs, d], z2.clone())?)?;
    if a1.rows() != n_pairs || a2.rows() != n_pairs || a1.cols() != a2.cols() {
        return Err(Error::ShapeMismatch(format!(
            "head mapped {n_pairs}x{d} to {}x{} and {}x{}",
            a1.rows(),
            a1.cols(),
            a2.rows(),
            a2.cols()
        )));
    }

    let m = a1.cols();
    let mut used = 0usize;
    let mut sum = 0.0f64;
    let mut max = 0.0f64;
    for p in 0..n_pairs {
        let den = norm_diff(&z1[p * d..(p + 1) * d], &z2[p * d..(p + 1) * d]);
        if den < COINCIDENT_EPS {
            continue;
        }
        let num = norm_diff(
            &a1.data()[p * m..(p + 1) * m],
            &a2.data()[p * m..(p + 1) * m],
        );
        let ratio = num / den;
        if !ratio.is_finite() {
            return Err(Error::NonFinite("lipschitz ratio".into()));
        }
        sum += ratio;
        max = max.max(ratio);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "every sampled pair was coincident; the corpus has no spread".into(),
        ));
    }
    Ok(LipschitzReport {
        pairs: used,
        mean: sum / used as f64,
        max,
        d_z: d,
        seed,
    })
}

fn norm_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Closed-loop expert evaluation with Gaussian noise on the 256-wide latent.
///
/// At every control step the expert's own `z` at the 256 tap is perturbed by
/// `sigma * zeta` isotropic noise and decoded through the frozen suffix.
/// Environment randomness is seeded independently of the noise stream, so
/// `sigma = 0` reproduces the clean greedy rollout exactly and larger sigmas
/// face identical episode initializations.
pub fn noise_injection_eval(
    expert: &ExpertPolicy,
    layout: &RoomLayout,
    sigmas: &[f32],
    zeta: f32,
    episodes_per_goal: usize,
    seed: u64,
) -> Result<NoiseSweepReport> {
    if sigmas.is_empty() {
        return Err(Error::InvalidArgument("empty sigma list".into()));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) || sigmas[0] < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigmas must be non-negative and strictly ascending, got {sigmas:?}"
        )));
    }
    if !(zeta > 0.0) || !zeta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "latent unit zeta must be positive and finite, got {zeta}"
        )));
    }
    if episodes_per_goal == 0 {
        return Err(Error::InvalidArgument(
            "noise sweep needs at least one episode per goal".into(),
        ));
    }

    let fingerprint_before = expert.fingerprint();
    let clusters = layout_clusters(layout, NUM_CLUSTERS, 0);
    let mut env = NavEnv::new(
        layout.clone(),
        clusters.centroids.clone(),
        SimParams::default(),
        RewardParams::default(),
    )?;

    let episodes_per_point = layout.goals.len() * episodes_per_goal;
    let mut sr = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65u64);
        let scale = sigma * zeta;
        let mut successes = 0usize;
        for g in 0..layout.goals.len() {
            for _ in 0..episodes_per_goal {
                env.reset_to_goal(g, &mut env_rng)?;
                loop {
                    let obs =
                        build_privileged_obs(env.state(), env.goal_position(), &clusters);
                    let obs_t = Tensor::new(vec![1, OBS_DIM], obs)?;
                    let out = expert.forward(&obs_t)?;
                    let mut z = out.latents[1].data().to_vec();
                    if sigma > 0.0 {
                        for v in &mut z {
                            *v += scale * noise_rng.sample::<f32, _>(StandardNormal);
                        }
                    }
                    let z_t = Tensor::new(vec![1, TapDim::D256.dim()], z)?;
                    let action = expert.suffix_forward(TapDim::D256, &z_t)?;
                    let a = action.data();
                    let tr = env.step([a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]);
                    if let Some(outcome) = tr.outcome {
                        if outcome == Outcome::Success {
                            successes += 1;
                        }
                        break;
                    }
                }
            }
        }
        sr.push(100.0 * successes as f32 / episodes_per_point as f32);
    }
    assert_eq!(
        expert.fingerprint(),
        fingerprint_before,
        "noise injection must not mutate the expert"
    );

    Ok(NoiseSweepReport {
        sigmas: sigmas.to_vec(),
        sr,
        episodes_per_point,
        zeta,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::greedy_success_rate;
    use crate::sim::{GoalSpec, Obstacle, Prompt};

    fn random_corpus(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn identity_head_ratios_are_exactly_one() {
        let corpus = random_corpus(40, 8, 1);
        let head = |z: &Tensor| Ok(z.clone());
        let report = estimate_lipschitz(&head, &corpus, 1000, 3).unwrap();
        assert_eq!(report.mean, 1.0);
        assert_eq!(report.max, 1.0);
        assert_eq!(report.d_z, 8);
        assert!(report.pairs > 900);
    }

    /// Spectral norm of a small matrix by power iteration on `W^T W`.
    fn spectral_norm(w: &[Vec<f64>]) -> f64 {
        let d = w[0].len();
        let mut v = vec![1.0f64; d];
        for _ in 0..200 {
            // u = W v, then v = W^T u, renormalized.
            let u: Vec<f64> = w.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
            let mut next = vec![0.0f64; d];
            for (ri, r) in w.iter().enumerate() {
                for (ci, c) in r.iter().enumerate() {
                    next[ci] += c * u[ri];
                }
            }
            let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = next.iter().map(|x| x / n).collect();
        }
        let u: Vec<f64> = w.iter().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        u.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn linear_head_approaches_the_spectral_norm() {
        let w = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 1.0, 1.5]];
        let sigma1 = spectral_norm(&w);
        let head = move |z: &Tensor| {
            let rows = z.rows();
            let mut out = Vec::with_capacity(rows * 2);
            for r in 0..rows {
                let zr = &z.data()[r * 3..(r + 1) * 3];
                for wr in &w {
                    out.push(
                        wr.iter()
                            .zip(zr)
                            .map(|(a, b)| (*a as f32) * b)
                            .sum::<f32>(),
                    );
                }
            }
            Tensor::new(vec![rows, 2], out)
        };
        let corpus = random_corpus(100, 3, 2);
        let report = estimate_lipschitz(&head, &corpus, 2000, 5).unwrap();
        assert!(report.max <= sigma1 * 1.0001, "{} vs {sigma1}", report.max);
        assert!(report.max >= sigma1 * 0.99, "{} vs {sigma1}", report.max);
        assert!(report.mean <= report.max);
        assert!(report.mean >= 0.0);
    }

    #[test]
    fn reports_are_seed_stable_and_ordered() {
        let corpus = random_corpus(60, 6, 3);
        let head = |z: &Tensor| {
            let scaled: Vec<f32> = z.data().iter().map(|v| 0.5 * v).collect();
            Tensor::new(vec![z.rows(), z.cols()], scaled)
        };
        let a = estimate_lipschitz(&head, &corpus, 1200, 9).unwrap();
        let b = estimate_lipschitz(&head, &corpus, 1200, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.mean <= a.max);
        assert!((a.mean - 0.5).abs() < 1e-6);
    }

    #[test]
    fn coincident_pairs_are_skipped_not_counted() {
        // Two point masses: same-cluster pairs are coincident and must be
        // dropped while cross-cluster and perturbation pairs survive.
        let mut data = vec![0.5f32; 5 * 4];
        data.extend(vec![-0.5f32; 5 * 4]);
        let corpus = Tensor::new(vec![10, 4], data).unwrap();
        let head = |z: &Tensor| Ok(z.clone());
        let report = estimate_lipschitz(&head, &corpus, 1000, 4).unwrap();
        assert!(report.pairs < 1000, "{}", report.pairs);
        assert!(report.pairs > 500);
        assert_eq!(report.max, 1.0);
    }

    #[test]
    fn degenerate_lipschitz_inputs_are_rejected() {
        let corpus = random_corpus(10, 4, 0);
        let head = |z: &Tensor| Ok(z.clone());
        assert!(estimate_lipschitz(&head, &corpus, 999, 0).is_err());

        let single = random_corpus(1, 4, 0);
        assert!(estimate_lipschitz(&head, &single, 1000, 0).is_err());

        let flat = Tensor::new(vec![4, 2], vec![0.25; 8]).unwrap();
        let err = estimate_lipschitz(&head, &flat, 1000, 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))), "{err:?}");
    }

    fn noise_layout() -> RoomLayout {
        RoomLayout {
            name: "noise".into(),
            bounds: [-4.0, -3.0, 4.0, 3.0],
            start: [0.0, 0.0],
            obstacles: vec![Obstacle {
                name: "target".into(),
                rect: [2.3, -0.2, 2.7, 0.2],
                color: [0.9, 0.1, 0.1],
                height: 0.5,
            }],
            goals: vec![GoalSpec {
                category: "target".into(),
                color: [0.9, 0.1, 0.1],
                positions: vec![[2.5, 0.0]],
                clearance: 0.3,
                prompts: vec![Prompt {
                    text: "go to the target".into(),
                    family: "plain".into(),
                }],
            }],
        }
    }

    #[test]
    fn zero_sigma_matches_the_clean_greedy_rollout() {
        let layout = noise_layout();
        let expert = ExpertPolicy::new(7);
        let clusters = layout_clusters(&layout, NUM_CLUSTERS, 0);
        let clean = greedy_success_rate(&expert, &layout, &clusters, 4, 21).unwrap();
        let sweep =
            noise_injection_eval(&expert, &layout, &[0.0, 2.0], 1.0, 4, 21).unwrap();
        assert_eq!(sweep.sr[0], clean * 100.0);
        assert_eq!(sweep.episodes_per_point, 4);
        assert_eq!(sweep.sigmas, vec![0.0, 2.0]);
    }

    #[test]
    fn sweeps_are_deterministic_and_validated() {
        let layout = noise_layout();
        let expert = ExpertPolicy::new(7);
        let a = noise_injection_eval(&expert, &layout, &[0.0, 1.0], 0.8, 2, 5).unwrap();
        let b = noise_injection_eval(&expert, &layout, &[0.0, 1.0], 0.8, 2, 5).unwrap();
        assert_eq!(a, b);
        for r in &a.sr {
            assert!((0.0..=100.0).contains(r));
        }

        assert!(noise_injection_eval(&expert, &layout, &[], 1.0, 2, 5).is_err());
        assert!(noise_injection_eval(&expert, &layout, &[1.0, 0.5], 1.0, 2, 5).is_err());
        assert!(noise_injection_eval(&expert, &layout, &[-0.5, 1.0], 1.0, 2, 5).is_err());
        assert!(noise_injection_eval(&expert, &layout, &[0.0, 1.0], 0.0, 2, 5).is_err());
        assert!(noise_injection_eval(&expert, &layout, &[0.0], 1.0, 0, 5).is_err());
    }

    #[test]
    fn csv_rows_align_with_the_header() {
        let report = NoiseSweepReport {
            sigmas: vec![0.0, 1.0],
            sr: vec![100.0, 87.5],
            episodes_per_point: 8,
            zeta: 0.42,
            seed: 3,
        };
        let header_fields = NoiseSweepReport::csv_header().split(',').count();
        for line in report.csv_rows().lines() {
            assert_eq!(line.split(',').count(), header_fields);
        }
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<NoiseSweepReport>(&json).unwrap(), report);
    }

    #[test]
    fn latent_std_matches_a_direct_computation() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -1.0, 3.0, -3.0]).unwrap();
        // Mean 0, variance (1 + 1 + 9 + 9) / 4 = 5.
        assert!((latent_std(&t) - 5.0f32.sqrt()).abs() < 1e-6);
    }
}
