//! Generalized advantage estimation.

/// Computes GAE advantages and discounted returns for one trajectory
/// segment.
///
/// `dones[t]` marks that the episode terminated after step `t`; both the
/// value bootstrap and the advantage recursion are cut there. `next_value`
/// bootstraps the value of the state following the final step when the
/// segment ends mid-episode. Truncated episodes should fold their terminal
/// value into the reward before calling this.
pub fn compute_gae(
    rewards: &[f32],
    values: &[f32],
    dones: &[bool],
    next_value: f32,
    gamma: f32,
    lambda: f32,
) -> (Vec<f32>, Vec<f32>) {
    assert_eq!(rewards.len(), values.len());
    assert_eq!(rewards.len(), dones.len());
    let n = rewards.len();
    let mut advantages = vec![0.0f32; n];
    let mut gae = 0.0f32;
    for t in (0..n).rev() {
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let v_next = if t + 1 < n { values[t + 1] } else { next_value };
        let delta = rewards[t] + gamma * not_done * v_next - values[t];
        gae = delta + gamma * lambda * not_done * gae;
        advantages[t] = gae;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rewards_and_values_give_zero_advantages() {
        let (adv, ret) = compute_gae(&[0.0; 4], &[0.0; 4], &[false; 4], 0.0, 0.99, 0.95);
        assert!(adv.iter().all(|a| *a == 0.0));
        assert!(ret.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn three_step_terminal_sequence_matches_hand_computation() {
        let (adv, ret) = compute_gae(
            &[1.0, 1.0, 1.0],
            &[0.0, 0.0, 0.0],
            &[false, false, true],
            123.0,
            0.99,
            0.95,
        );
        // delta_t = 1 throughout (values zero, terminal cut); the recursion
        // gives 1, 1 + 0.9405, 1 + 0.9405 * 1.9405.
        assert!((adv[2] - 1.0).abs() < 1e-6);
        assert!((adv[1] - 1.9405).abs() < 1e-5);
        assert!((adv[0] - 2.82504025).abs() < 1e-5);
        for (a, r) in adv.iter().zip(&ret) {
            assert_eq!(a, r);
        }
    }

    #[test]
    fn done_flag_cuts_the_bootstrap_and_the_chain() {
        // Step 0 ends an episode; its advantage must ignore both v[1] and
        // the later advantages.
        let (adv, _) = compute_gae(
            &[2.0, 5.0],
            &[1.0, 100.0],
            &[true, false],
            50.0,
            0.99,
            0.95,
        );
        assert!((adv[0] - (2.0 - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn final_step_without_done_bootstraps_next_value() {
        let (adv, _) = compute_gae(&[0.0], &[0.0], &[false], 10.0, 0.99, 0.95);
        assert!((adv[0] - 9.9).abs() < 1e-5);
    }

    #[test]
    fn matches_brute_force_discounted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (gamma, lambda) = (0.99f32, 0.95f32);
        for _ in 0..200 {
            let n = rng.gen_range(1..=5);
            let rewards: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let next_value: f32 = rng.gen_range(-2.0..2.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, next_value, gamma, lambda);

            for t in 0..n {
                // Brute force: sum (gamma*lambda)^l * delta_{t+l} until the
                // first done at or after t.
                let mut want = 0.0f64;
                let mut w = 1.0f64;
                for l in t..n {
                    let v_next = if dones[l] {
                        0.0
                    } else if l + 1 < n {
                        values[l + 1] as f64
                    } else {
                        next_value as f64
                    };
                    let delta = rewards[l] as f64 + gamma as f64 * v_next - values[l] as f64;
                    want += w * delta;
                    if dones[l] {
                        break;
                    }
                    w *= (gamma * lambda) as f64;
                }
                assert!(
                    (adv[t] as f64 - want).abs() < 1e-4,
                    "t={t}: {} vs {want}",
                    adv[t]
                );
                assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-6);
            }
        }
    }
}
