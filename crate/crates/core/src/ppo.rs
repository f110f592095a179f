//! PPO: rollout collection, generalised advantage estimation and clipped updates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{entropy, log_softmax_row, softmax_row, Tape, Var};
use crate::env::{EnvConfig, Episode, VecEnv};
use crate::error::{Error, Result};
use crate::nn::PolicyValueNet;
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda_gae: f64,
    pub clip_epsilon: f64,
    pub entropy_coeff: f64,
    /// Weight of the squared value error (`λ_TD` for the student).
    pub value_coeff: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub n_envs: usize,
    pub frames_per_env: usize,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub optimizer: OptimizerConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lambda_gae: 0.95,
            clip_epsilon: 0.2,
            entropy_coeff: 0.01,
            value_coeff: 0.5,
            ppo_epochs: 4,
            minibatch_size: 512,
            n_envs: 32,
            frames_per_env: 128,
            normalize_advantages: true,
            max_grad_norm: Some(0.5),
            optimizer: OptimizerConfig::adam(3e-4),
        }
    }
}

impl PpoConfig {
    /// Defaults with the reduced Boxoban learning rate of 1e-4.
    pub fn boxoban() -> Self {
        PpoConfig { optimizer: OptimizerConfig::adam(1e-4), ..Default::default() }
    }

    /// Frames collected per update, `n_envs * frames_per_env`.
    pub fn batch_size(&self) -> usize {
        self.n_envs * self.frames_per_env
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::config(format!("lambda_gae must lie in [0, 1], got {}", self.lambda_gae)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::config(format!("clip_epsilon must be > 0, got {}", self.clip_epsilon)));
        }
        if self.ppo_epochs == 0 || self.minibatch_size == 0 || self.n_envs == 0 || self.frames_per_env == 0 {
            return Err(Error::config("ppo_epochs, minibatch_size, n_envs and frames_per_env must be positive"));
        }
        if self.max_grad_norm.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::config("max_grad_norm must be positive"));
        }
        self.optimizer.validate()
    }
}

/// On-policy trajectories in time-major order: index `t * n_envs + env`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub obs_shape: Vec<usize>,
    pub n_envs: usize,
    pub frames_per_env: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub behaviour_log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// Values of the observations following the last step, one per env.
    pub bootstrap_values: Vec<f64>,
    /// Observations following the last step, `[n_envs, ...obs_shape]` flattened.
    pub bootstrap_observations: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// `(env, return, success)` for episodes that ended during collection.
    pub finished: Vec<(usize, f64, bool)>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        let l = self.obs_len();
        &self.observations[i * l..(i + 1) * l]
    }

    /// Observation after transition `i`: the next row of the same env, or the
    /// bootstrap observation for the last frame. Meaningless when `dones[i]`.
    pub fn next_observation(&self, i: usize) -> &[f64] {
        let l = self.obs_len();
        let (t, env) = (i / self.n_envs, i % self.n_envs);
        if t + 1 < self.frames_per_env {
            self.observation(i + self.n_envs)
        } else {
            &self.bootstrap_observations[env * l..(env + 1) * l]
        }
    }

    /// Stacks the given rows into a `[rows, ...obs_shape]` tensor.
    pub fn gather_observations(&self, idx: &[usize]) -> Tensor {
        stack(&self.obs_shape, idx.iter().map(|&i| self.observation(i)))
    }

    pub fn mean_finished_return(&self) -> Option<f64> {
        (!self.finished.is_empty())
            .then(|| self.finished.iter().map(|f| f.1).sum::<f64>() / self.finished.len() as f64)
    }
}

pub(crate) fn stack<'a>(obs_shape: &[usize], rows: impl Iterator<Item = &'a [f64]>) -> Tensor {
    let mut values = Vec::new();
    let mut n = 0;
    for r in rows {
        values.extend_from_slice(r);
        n += 1;
    }
    let mut shape = vec![n];
    shape.extend_from_slice(obs_shape);
    Tensor::new(shape, values).expect("stacked observation shape")
}

/// Samples an index from a categorical distribution given by `probs`.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn obs_tensor(env: &VecEnv, values: Vec<f64>) -> Tensor {
    let [c, h, w] = env.observation_shape();
    Tensor::new(vec![env.len(), c, h, w], values).expect("observation shape")
}

/// Runs `policy` in `env` for `frames_per_env` steps per sub-environment.
pub fn collect_rollout(
    policy: &PolicyValueNet,
    env: &mut VecEnv,
    frames_per_env: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    if policy.n_actions() != env.n_actions() {
        return Err(Error::config(format!(
            "policy has {} actions but the environment has {}",
            policy.n_actions(),
            env.n_actions()
        )));
    }
    let n = env.len();
    let obs_shape = env.observation_shape().to_vec();
    let total = n * frames_per_env;
    let mut batch = RolloutBatch {
        obs_shape,
        n_envs: n,
        frames_per_env,
        observations: Vec::with_capacity(total * env.observation_shape().iter().product::<usize>()),
        actions: Vec::with_capacity(total),
        behaviour_log_probs: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        dones: Vec::with_capacity(total),
        values: Vec::with_capacity(total),
        bootstrap_values: Vec::new(),
        bootstrap_observations: Vec::new(),
        advantages: Vec::new(),
        returns: Vec::new(),
        finished: Vec::new(),
    };
    let k = policy.n_actions();
    let mut obs = env.observations();
    for _ in 0..frames_per_env {
        let (logits, values) = policy.infer(&obs_tensor(env, obs.clone()))?;
        let mut actions = Vec::with_capacity(n);
        for row in logits.values().chunks(k) {
            let probs = softmax_row(row);
            let a = sample_categorical(&probs, rng);
            let logp: Vec<f64> = log_softmax_row(row).collect();
            actions.push(a);
            batch.behaviour_log_probs.push(logp[a]);
        }
        let out = env.step_all(&actions)?;
        batch.observations.extend_from_slice(&obs);
        batch.actions.extend_from_slice(&actions);
        batch.rewards.extend_from_slice(&out.rewards);
        batch.dones.extend_from_slice(&out.dones);
        batch.values.extend_from_slice(&values);
        batch.finished.extend(out.finished);
        obs = out.observations;
    }
    let (_, bootstrap) = policy.infer(&obs_tensor(env, obs.clone()))?;
    batch.bootstrap_values = bootstrap;
    batch.bootstrap_observations = obs;
    Ok(batch)
}

/// Fills `advantages` and `returns` by the GAE recursion, never bootstrapping across a done.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    let (n, t_len) = (batch.n_envs, batch.frames_per_env);
    batch.advantages = vec![0.0; n * t_len];
    for env in 0..n {
        let mut next_adv = 0.0;
        let mut next_value = batch.bootstrap_values[env];
        for t in (0..t_len).rev() {
            let i = t * n + env;
            let live = if batch.dones[i] { 0.0 } else { 1.0 };
            let delta = batch.rewards[i] + gamma * next_value * live - batch.values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            batch.advantages[i] = next_adv;
            next_value = batch.values[i];
        }
    }
    batch.returns = batch.advantages.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
}

/// Zero-mean, unit-variance copy of `x` (population variance, `1e-8` floor).
pub fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    x.iter().map(|v| (v - mean) / std).collect()
}

/// Per-minibatch inputs to the PPO loss.
pub struct Minibatch<'a> {
    pub observations: &'a Tensor,
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Scalar diagnostics of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Clipped surrogate `-mean(min(r A, clip(r, 1-ε, 1+ε) A))`; `A` is data.
pub(crate) fn clipped_surrogate<'t>(ratio: Var<'t>, adv: Var<'t>, eps: f64) -> Var<'t> {
    let unclipped = ratio.mul(adv);
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps).mul(adv);
    unclipped.minimum(clipped).mean().neg()
}

pub(crate) fn clip_fraction(ratio: &[f64], eps: f64) -> f64 {
    ratio.iter().filter(|r| (**r - 1.0).abs() > eps).count() as f64 / ratio.len() as f64
}

/// Builds the PPO loss `-surrogate + value_coeff * mean((V - R)^2) - entropy_coeff * H` on `tape`.
pub fn ppo_loss<'t>(
    tape: &'t Tape,
    net: &PolicyValueNet,
    mb: &Minibatch<'_>,
    config: &PpoConfig,
) -> Result<(Var<'t>, crate::nn::ParamVars<'t>, LossStats)> {
    let rows = mb.actions.len();
    let out = net.forward(tape, mb.observations, true)?;
    let logp = out.logits.log_softmax();
    let new_logp = logp.gather(mb.actions);
    let old = tape.constant(&[rows], mb.old_log_probs.to_vec());
    let ratio = new_logp.sub(old).exp();
    let adv = tape.constant(&[rows], mb.advantages.to_vec());
    let policy_loss = clipped_surrogate(ratio, adv, config.clip_epsilon);
    let returns = tape.constant(&[rows], mb.returns.to_vec());
    let value_loss = out.values.sub(returns).square().mean();
    let ent = entropy(logp);
    let loss = policy_loss
        .add(value_loss.scale(config.value_coeff))
        .sub(ent.scale(config.entropy_coeff));

    let ratio_v = ratio.value();
    let new_v = new_logp.value();
    let stats = LossStats {
        loss: loss.item(),
        policy_loss: policy_loss.item(),
        value_loss: value_loss.item(),
        entropy: ent.item(),
        clip_fraction: clip_fraction(&ratio_v, config.clip_epsilon),
        approx_kl: mb.old_log_probs.iter().zip(&new_v).map(|(o, n)| o - n).sum::<f64>() / rows as f64,
    };
    Ok((loss, out.params, stats))
}

/// Averages of the per-minibatch statistics of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

impl UpdateStats {
    pub(crate) fn add(&mut self, s: &LossStats, grad_norm: f64) {
        self.policy_loss += s.policy_loss;
        self.value_loss += s.value_loss;
        self.entropy += s.entropy;
        self.clip_fraction += s.clip_fraction;
        self.approx_kl += s.approx_kl;
        self.grad_norm += grad_norm;
        self.minibatches += 1;
    }

    pub(crate) fn finish(mut self) -> Self {
        let n = self.minibatches.max(1) as f64;
        self.policy_loss /= n;
        self.value_loss /= n;
        self.entropy /= n;
        self.clip_fraction /= n;
        self.approx_kl /= n;
        self.grad_norm /= n;
        self
    }
}

/// Shuffled minibatch index lists covering `0..n` once.
pub(crate) fn minibatches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.min(n).max(1)).map(|c| c.to_vec()).collect()
}

/// Backpropagates `loss`, clips and applies one optimizer step; returns the pre-clip gradient norm.
pub(crate) fn apply_gradients(
    tape: &Tape,
    loss: Var<'_>,
    params: &crate::nn::ParamVars<'_>,
    net: &mut crate::nn::Network,
    optimizer: &mut Optimizer,
    max_grad_norm: Option<f64>,
) -> Result<f64> {
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::numerical(format!("loss is {value}; update aborted")));
    }
    tape.backward(loss)?;
    net.zero_grad();
    net.accumulate_grads(tape, params);
    let norm = match max_grad_norm {
        Some(max) => clip_grad_norm(net.params_mut(), max),
        None => crate::optim::grad_norm(net.params()),
    };
    optimizer.step(net.params_mut())?;
    Ok(norm)
}

/// `ppo_epochs` passes of shuffled minibatch updates over `batch`.
pub fn ppo_update(
    batch: &RolloutBatch,
    net: &mut PolicyValueNet,
    optimizer: &mut Optimizer,
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if batch.advantages.len() != batch.len() {
        return Err(Error::usage("ppo_update needs advantages; call compute_gae first"));
    }
    let adv = if config.normalize_advantages { normalize(&batch.advantages) } else { batch.advantages.clone() };
    let mut stats = UpdateStats::default();
    for _ in 0..config.ppo_epochs {
        for idx in minibatches(batch.len(), config.minibatch_size, rng) {
            let obs = batch.gather_observations(&idx);
            let actions: Vec<usize> = idx.iter().map(|&i| batch.actions[i]).collect();
            let old: Vec<f64> = idx.iter().map(|&i| batch.behaviour_log_probs[i]).collect();
            let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let r: Vec<f64> = idx.iter().map(|&i| batch.returns[i]).collect();
            let mb = Minibatch { observations: &obs, actions: &actions, old_log_probs: &old, advantages: &a, returns: &r };
            let tape = Tape::new();
            let (loss, params, s) = ppo_loss(&tape, net, &mb, config)?;
            let norm = apply_gradients(&tape, loss, &params, net.network_mut(), optimizer, config.max_grad_norm)
                .map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!(
                        "{m} (policy_loss={}, value_loss={}, entropy={})",
                        s.policy_loss, s.value_loss, s.entropy
                    )),
                    other => other,
                })?;
            stats.add(&s, norm);
        }
    }
    Ok(stats.finish())
}

/// Mean KL `E_b[log b - log π]` between the recorded behaviour log-probs and `net`.
pub fn approx_kl(batch: &RolloutBatch, net: &PolicyValueNet) -> Result<f64> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let (logits, _) = net.infer(&batch.gather_observations(chunk))?;
        let k = net.n_actions();
        for (row, &i) in logits.values().chunks(k).zip(chunk) {
            let logp: Vec<f64> = log_softmax_row(row).collect();
            total += batch.behaviour_log_probs[i] - logp[batch.actions[i]];
        }
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
    pub mean_return: f64,
    pub success_rate: f64,
}

/// Plays one episode per level seed, all in lockstep, and aggregates the outcomes.
///
/// Sampled actions come from a stream seeded by `sample_seed`, so repeated
/// calls with the same arguments give identical results.
pub fn evaluate(
    policy: &PolicyValueNet,
    env: &EnvConfig,
    level_seeds: &[u64],
    mode: EvalMode,
    sample_seed: u64,
) -> Result<EvalResult> {
    if level_seeds.is_empty() {
        return Err(Error::usage("evaluate needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut episodes: Vec<Episode> = level_seeds
        .iter()
        .map(|&s| Ok(Episode::new(&env.generate(s)?, env.max_steps())))
        .collect::<Result<_>>()?;
    let mut returns = vec![0.0; episodes.len()];
    let obs_shape = env.observation_shape();
    let obs_len: usize = obs_shape.iter().product();
    let k = policy.n_actions();
    loop {
        let live: Vec<usize> = (0..episodes.len()).filter(|&i| !episodes[i].is_done()).collect();
        if live.is_empty() {
            break;
        }
        let mut values = vec![0.0; live.len() * obs_len];
        for (chunk, &i) in values.chunks_mut(obs_len).zip(&live) {
            episodes[i].encode_into(chunk);
        }
        let mut shape = vec![live.len()];
        shape.extend_from_slice(&obs_shape);
        let (logits, _) = policy.infer(&Tensor::new(shape, values)?)?;
        for (row, &i) in logits.values().chunks(k).zip(&live) {
            let a = match mode {
                EvalMode::Greedy => argmax(row),
                EvalMode::Sampled => sample_categorical(&softmax_row(row), &mut rng),
            };
            returns[i] += episodes[i].step(a)?.reward;
        }
    }
    let successes: Vec<bool> = episodes.iter().map(|e| e.is_success()).collect();
    let n = returns.len() as f64;
    Ok(EvalResult {
        mean_return: returns.iter().sum::<f64>() / n,
        success_rate: successes.iter().filter(|s| **s).count() as f64 / n,
        returns,
        successes,
    })
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch_from(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64) -> RolloutBatch {
        let n = rewards.len();
        RolloutBatch {
            obs_shape: vec![1],
            n_envs: 1,
            frames_per_env: n,
            observations: vec![0.0; n],
            actions: vec![0; n],
            behaviour_log_probs: vec![0.0; n],
            rewards: rewards.to_vec(),
            dones: dones.to_vec(),
            values: values.to_vec(),
            bootstrap_values: vec![bootstrap],
            bootstrap_observations: vec![0.0],
            advantages: Vec::new(),
            returns: Vec::new(),
            finished: Vec::new(),
        }
    }

    #[test]
    fn gae_hand_recursion() {
        let mut b = batch_from(&[0.0, 0.0, 1.0], &[0.0; 3], &[false; 3], 0.0);
        compute_gae(&mut b, 0.99, 0.95);
        assert!((b.advantages[0] - 0.88454).abs() < 1e-5, "{}", b.advantages[0]);
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let mut b = batch_from(&[0.5, -1.0, 2.0], &[0.1, 0.2, 0.3], &[false, true, false], 0.7);
        compute_gae(&mut b, 0.9, 0.0);
        let expect = [0.5 + 0.9 * 0.2 - 0.1, -1.0 - 0.2, 2.0 + 0.9 * 0.7 - 0.3];
        for (a, e) in b.advantages.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn done_flag_cuts_dependence_on_the_future() {
        let mut a = batch_from(&[1.0, 2.0, 3.0, 4.0], &[0.5; 4], &[false, true, false, false], 9.0);
        let mut b = batch_from(&[1.0, 2.0, -30.0, 7.0], &[0.5, 0.5, 4.0, 1.0], &[false, true, false, false], -9.0);
        compute_gae(&mut a, 0.99, 0.95);
        compute_gae(&mut b, 0.99, 0.95);
        assert_eq!(a.advantages[..2], b.advantages[..2]);
    }

    #[test]
    fn uniform_sampling_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&[0.25; 4], &mut rng)] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 4.0).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn config_validation() {
        PpoConfig::default().validate().unwrap();
        assert!(PpoConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { lambda_gae: 1.5, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { clip_epsilon: 0.0, ..Default::default() }.validate().is_err());
    }
}
