use itergrid::ppo::{compute_gae, RolloutBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, n_envs: usize, t_len: usize) -> RolloutBatch {
    let n = n_envs * t_len;
    RolloutBatch {
        obs_shape: vec![1],
        n_envs,
        frames_per_env: t_len,
        observations: vec![0.0; n],
        actions: vec![0; n],
        behaviour_log_probs: vec![0.0; n],
        rewards: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        dones: (0..n).map(|_| rng.random_bool(0.2)).collect(),
        values: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bootstrap_values: (0..n_envs).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bootstrap_observations: vec![0.0; n_envs],
        advantages: vec![],
        returns: vec![],
        finished: vec![],
    }
}

/// Discounted return from `t` to the episode end or the rollout horizon, minus `V(s_t)`.
fn brute_force(b: &RolloutBatch, env: usize, t: usize, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut discount = 1.0;
    for s in t..b.frames_per_env {
        let i = s * b.n_envs + env;
        total += discount * b.rewards[i];
        discount *= gamma;
        if b.dones[i] {
            return total - b.values[t * b.n_envs + env];
        }
    }
    total + discount * b.bootstrap_values[env] - b.values[t * b.n_envs + env]
}

#[test]
fn lambda_one_matches_discounted_return_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let t_len = rng.random_range(1..=10);
        let n_envs = rng.random_range(1..=3);
        let gamma = rng.random_range(0.5..1.0);
        let mut b = random_batch(&mut rng, n_envs, t_len);
        compute_gae(&mut b, gamma, 1.0);
        for env in 0..n_envs {
            for t in 0..t_len {
                let i = t * n_envs + env;
                let oracle = brute_force(&b, env, t, gamma);
                assert!((b.advantages[i] - oracle).abs() < 1e-9, "env {env} t {t}: {} vs {oracle}", b.advantages[i]);
                assert!((b.returns[i] - b.advantages[i] - b.values[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lambda_zero_is_the_one_step_td_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = random_batch(&mut rng, 2, 6);
    compute_gae(&mut b, 0.9, 0.0);
    for t in 0..6 {
        for env in 0..2 {
            let i = t * 2 + env;
            let next = if t + 1 < 6 { b.values[i + 2] } else { b.bootstrap_values[env] };
            let live = if b.dones[i] { 0.0 } else { 1.0 };
            let delta = b.rewards[i] + 0.9 * next * live - b.values[i];
            assert!((b.advantages[i] - delta).abs() < 1e-12);
        }
    }
}
