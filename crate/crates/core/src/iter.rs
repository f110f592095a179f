//! Iterated relearning: periodic distillation of the agent into a fresh network.
//!
//! A run starts with `t_init` frames of plain PPO. Every distillation phase
//! creates a freshly initialised student, trains it against the current
//! teacher and then promotes it. In parallel mode the teacher keeps learning
//! during the phase and the student is updated on the teacher's batches; in
//! sequential mode the teacher is frozen and the student learns from a store of
//! the teacher's most recent transitions.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{entropy, Tape, Var};
use crate::env::{mix_seed, LevelSet, VecEnv};
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ParamVars, PolicyValueNet};
use crate::optim::{Optimizer, OptimizerState};
use crate::ppo::{
    apply_gradients, clip_fraction, clipped_surrogate, collect_rollout, compute_gae, evaluate, minibatches,
    ppo_update, stack, EvalMode, PpoConfig, RolloutBatch, UpdateStats,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterMode {
    Parallel,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSchedule {
    /// Frames of plain PPO before the first distillation phase.
    pub t_init: u64,
    /// Frames per distillation phase.
    pub t_distill: u64,
    pub alpha_pi: f64,
    pub alpha_v: f64,
    /// Value the `α_V` annealing ends at.
    pub alpha_v_end: f64,
    pub lambda_td: f64,
    pub mode: IterMode,
    /// Transition store capacity for sequential mode.
    pub store_capacity: usize,
    /// Stop replacing after this many iterations.
    pub max_iterations: Option<usize>,
}

impl Default for DistillSchedule {
    fn default() -> Self {
        DistillSchedule {
            t_init: 1_000_000,
            t_distill: 500_000,
            alpha_pi: 1.0,
            alpha_v: 0.5,
            alpha_v_end: 0.0,
            lambda_td: 0.5,
            mode: IterMode::Parallel,
            store_capacity: 16_384,
            max_iterations: None,
        }
    }
}

impl DistillSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_init == 0 || self.t_distill == 0 {
            return Err(Error::config("t_init and t_distill must be positive"));
        }
        if self.alpha_pi < 0.0 || self.alpha_v < 0.0 || self.alpha_v_end < 0.0 || self.lambda_td < 0.0 {
            return Err(Error::config("distillation coefficients must be non-negative"));
        }
        if self.mode == IterMode::Sequential && self.store_capacity == 0 {
            return Err(Error::config("store_capacity must be positive in sequential mode"));
        }
        Ok(())
    }

    /// `(α_π, α_V)` at `step` frames into a phase.
    pub fn coefficients(&self, step: f64) -> (f64, f64) {
        let t = self.t_distill as f64;
        let pi = anneal(step, t, self.alpha_pi);
        let frac = (step / t).clamp(0.0, 1.0);
        let v = self.alpha_v + (self.alpha_v_end - self.alpha_v) * frac;
        (pi, v)
    }
}

/// Linear annealing `alpha_init * (1 - step / t_distill)`, clamped at zero.
pub fn anneal(step: f64, t_distill: f64, alpha_init: f64) -> f64 {
    (alpha_init * (1.0 - step / t_distill)).max(0.0)
}

/// Inputs of the distillation loss; teacher outputs are recomputed from the networks.
pub struct DistillBatch {
    pub observations: Tensor,
    /// Observations after each transition, needed for the one-step advantage.
    pub next_observations: Option<Tensor>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl DistillBatch {
    /// Rows `idx` of a rollout, with next observations taken from the rollout.
    pub fn from_rollout(batch: &RolloutBatch, idx: &[usize]) -> Self {
        DistillBatch {
            observations: batch.gather_observations(idx),
            next_observations: Some(stack(&batch.obs_shape, idx.iter().map(|&i| batch.next_observation(i)))),
            actions: idx.iter().map(|&i| batch.actions[i]).collect(),
            rewards: idx.iter().map(|&i| batch.rewards[i]).collect(),
            dones: idx.iter().map(|&i| batch.dones[i]).collect(),
        }
    }
}

/// Weights and RL constants of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillCoefficients {
    pub alpha_pi: f64,
    pub alpha_v: f64,
    pub lambda_td: f64,
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub entropy_coeff: f64,
}

impl DistillCoefficients {
    pub fn new(alpha_pi: f64, alpha_v: f64, lambda_td: f64, ppo: &PpoConfig) -> Self {
        DistillCoefficients {
            alpha_pi,
            alpha_v,
            lambda_td,
            gamma: ppo.gamma,
            clip_epsilon: ppo.clip_epsilon,
            entropy_coeff: ppo.entropy_coeff,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    pub loss: f64,
    pub l_pi: f64,
    pub l_v: f64,
    pub l_pg: f64,
    pub l_td: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Tape handles produced by [`distill_loss`].
pub struct DistillVars<'t> {
    pub loss: Var<'t>,
    pub student: ParamVars<'t>,
    pub teacher: ParamVars<'t>,
    pub l_pi: Var<'t>,
    pub l_v: Var<'t>,
    pub l_pg: Var<'t>,
    pub l_td: Var<'t>,
}

/// Combined loss `α_π L_π + α_V L_V + L_PG + λ_TD L_TD` for the student.
///
/// `L_π` is the mean KL from teacher to student policy and `L_V` the mean
/// squared value difference. `L_PG` is the clipped surrogate on the ratio
/// `π_student(a|s) / π_teacher(a|s)` weighted by the detached one-step
/// advantage `r + γ V_s(s') - V_s(s)`, minus the entropy bonus. `L_TD` is the
/// mean squared advantage weighted by the detached ratio, with `V_s(s')`
/// detached. Teacher outputs pass through `stop_gradient`; `teacher_on_tape`
/// registers the teacher parameters as variables so that isolation can be
/// checked, otherwise they are constants.
pub fn distill_loss<'t>(
    tape: &'t Tape,
    batch: &DistillBatch,
    teacher: &PolicyValueNet,
    student: &PolicyValueNet,
    c: &DistillCoefficients,
    teacher_on_tape: bool,
) -> Result<(DistillVars<'t>, DistillStats)> {
    let next_obs = batch
        .next_observations
        .as_ref()
        .ok_or_else(|| Error::usage("distill_loss needs next observations for the one-step advantage"))?;
    let rows = batch.actions.len();
    if teacher.n_actions() != student.n_actions() {
        return Err(Error::config("teacher and student action counts differ"));
    }

    let t_out = teacher.forward(tape, &batch.observations, teacher_on_tape)?;
    let t_logp = t_out.logits.stop_gradient().log_softmax();
    let t_probs = t_logp.exp();
    let t_values = t_out.values.stop_gradient();

    let s_out = student.forward(tape, &batch.observations, true)?;
    let s_logp = s_out.logits.log_softmax();
    let (_, s_next) = student.infer(next_obs)?;

    let l_pi = t_probs.mul(t_logp.sub(s_logp)).sum_rows().mean();
    let l_v = t_values.sub(s_out.values).square().mean();

    let live: Vec<f64> = batch.dones.iter().map(|d| if *d { 0.0 } else { 1.0 }).collect();
    let target: Vec<f64> = (0..rows).map(|i| batch.rewards[i] + c.gamma * live[i] * s_next[i]).collect();
    let target = tape.constant(&[rows], target);
    let advantage = target.sub(s_out.values);

    let ratio = s_logp.gather(&batch.actions).sub(t_logp.gather(&batch.actions)).exp();
    let ent = entropy(s_logp);
    let l_pg = clipped_surrogate(ratio, advantage.stop_gradient(), c.clip_epsilon).sub(ent.scale(c.entropy_coeff));
    let l_td = ratio.stop_gradient().mul(advantage.square()).mean();

    let loss = l_pi
        .scale(c.alpha_pi)
        .add(l_v.scale(c.alpha_v))
        .add(l_pg)
        .add(l_td.scale(c.lambda_td));
    let stats = DistillStats {
        loss: loss.item(),
        l_pi: l_pi.item(),
        l_v: l_v.item(),
        l_pg: l_pg.item(),
        l_td: l_td.item(),
        entropy: ent.item(),
        clip_fraction: clip_fraction(&ratio.value(), c.clip_epsilon),
    };
    let vars = DistillVars { loss, student: s_out.params, teacher: t_out.params, l_pi, l_v, l_pg, l_td };
    Ok((vars, stats))
}

/// The networks of iteration `k` (teacher) and `k + 1` (student).
#[derive(Clone, Debug)]
pub struct TeacherStudentPair {
    pub teacher: PolicyValueNet,
    pub teacher_opt: Optimizer,
    pub student: PolicyValueNet,
    pub student_opt: Optimizer,
    pub k: usize,
    seed: u64,
}

impl TeacherStudentPair {
    /// Wraps `teacher` and creates the first student from a seed derived from `seed`.
    pub fn new(teacher: PolicyValueNet, teacher_opt: Optimizer, seed: u64) -> Result<Self> {
        let student = fresh_like(&teacher, mix_seed(seed, 1))?;
        let student_opt = Optimizer::new(teacher_opt.config.clone())?;
        Ok(TeacherStudentPair { teacher, teacher_opt, student, student_opt, k: 0, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Promotes the student; the old teacher is dropped and a new student is initialised.
    pub fn replace_teacher(&mut self) -> Result<()> {
        let fresh = fresh_like(&self.student, mix_seed(self.seed, self.k as u64 + 2))?;
        let fresh_opt = Optimizer::new(self.student_opt.config.clone())?;
        self.teacher = std::mem::replace(&mut self.student, fresh);
        self.teacher_opt = std::mem::replace(&mut self.student_opt, fresh_opt);
        self.k += 1;
        Ok(())
    }

    /// Discards the current student and starts again from a fresh init.
    pub fn reset_student(&mut self) -> Result<()> {
        self.student = fresh_like(&self.student, mix_seed(self.seed, self.k as u64 + 1))?;
        self.student_opt = Optimizer::new(self.student_opt.config.clone())?;
        Ok(())
    }
}

fn fresh_like(net: &PolicyValueNet, seed: u64) -> Result<PolicyValueNet> {
    PolicyValueNet::new(net.network().spec(), net.network().input_shape(), net.n_actions(), seed)
}

/// One student gradient step on `batch`.
fn student_step(
    pair: &mut TeacherStudentPair,
    batch: &DistillBatch,
    coeffs: &DistillCoefficients,
    max_grad_norm: Option<f64>,
) -> Result<DistillStats> {
    let tape = Tape::new();
    let (vars, stats) = distill_loss(&tape, batch, &pair.teacher, &pair.student, coeffs, false)?;
    apply_gradients(&tape, vars.loss, &vars.student, pair.student.network_mut(), &mut pair.student_opt, max_grad_norm)
        .map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!("student: {m} ({stats:?})")),
            other => other,
        })?;
    Ok(stats)
}

fn mean_stats(all: &[DistillStats]) -> DistillStats {
    let n = all.len().max(1) as f64;
    let mut m = DistillStats::default();
    for s in all {
        m.loss += s.loss / n;
        m.l_pi += s.l_pi / n;
        m.l_v += s.l_v / n;
        m.l_pg += s.l_pg / n;
        m.l_td += s.l_td / n;
        m.entropy += s.entropy / n;
        m.clip_fraction += s.clip_fraction / n;
    }
    m
}

/// Teacher PPO update on `batch`, then student distillation on the same batch
/// against the updated teacher. The batch must already carry advantages.
pub fn parallel_iter_step(
    batch: &RolloutBatch,
    pair: &mut TeacherStudentPair,
    ppo: &PpoConfig,
    schedule: &DistillSchedule,
    step_in_phase: f64,
    teacher_rng: &mut ChaCha8Rng,
    student_rng: &mut ChaCha8Rng,
) -> Result<(UpdateStats, DistillStats)> {
    let teacher_stats = ppo_update(batch, &mut pair.teacher, &mut pair.teacher_opt, ppo, teacher_rng)?;
    let (alpha_pi, alpha_v) = schedule.coefficients(step_in_phase);
    let coeffs = DistillCoefficients::new(alpha_pi, alpha_v, schedule.lambda_td, ppo);
    let mut all = Vec::new();
    for _ in 0..ppo.ppo_epochs {
        for idx in minibatches(batch.len(), ppo.minibatch_size, student_rng) {
            let db = DistillBatch::from_rollout(batch, &idx);
            all.push(student_step(pair, &db, &coeffs, ppo.max_grad_norm)?);
        }
    }
    Ok((teacher_stats, mean_stats(&all)))
}

/// One stored teacher transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
    pub next_observation: Vec<f64>,
    pub behaviour_log_prob: f64,
}

/// FIFO buffer of the most recent teacher transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionStore {
    capacity: usize,
    obs_shape: Vec<usize>,
    items: VecDeque<Transition>,
}

impl TransitionStore {
    pub fn new(capacity: usize, obs_shape: &[usize]) -> Self {
        TransitionStore { capacity, obs_shape: obs_shape.to_vec(), items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn obs_shape(&self) -> &[usize] {
        &self.obs_shape
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    /// Appends a rollout in time order.
    pub fn push_rollout(&mut self, batch: &RolloutBatch) {
        for i in 0..batch.len() {
            self.push(Transition {
                observation: batch.observation(i).to_vec(),
                action: batch.actions[i],
                reward: batch.rewards[i],
                done: batch.dones[i],
                next_observation: batch.next_observation(i).to_vec(),
                behaviour_log_prob: batch.behaviour_log_probs[i],
            });
        }
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn distill_batch(&self, idx: &[usize]) -> DistillBatch {
        DistillBatch {
            observations: stack(&self.obs_shape, idx.iter().map(|&i| self.items[i].observation.as_slice())),
            next_observations: Some(stack(
                &self.obs_shape,
                idx.iter().map(|&i| self.items[i].next_observation.as_slice()),
            )),
            actions: idx.iter().map(|&i| self.items[i].action).collect(),
            rewards: idx.iter().map(|&i| self.items[i].reward).collect(),
            dones: idx.iter().map(|&i| self.items[i].done).collect(),
        }
    }

    /// Packs the store into tensors for checkpointing.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let n = self.items.len();
        let mut obs_shape = vec![n];
        obs_shape.extend_from_slice(&self.obs_shape);
        let obs: Vec<f64> = self.items.iter().flat_map(|t| t.observation.iter().copied()).collect();
        let next: Vec<f64> = self.items.iter().flat_map(|t| t.next_observation.iter().copied()).collect();
        let scalars: Vec<f64> = self
            .items
            .iter()
            .flat_map(|t| [t.action as f64, t.reward, if t.done { 1.0 } else { 0.0 }, t.behaviour_log_prob])
            .collect();
        let tensor = |shape: Vec<usize>, v: Vec<f64>| {
            if n == 0 {
                Tensor::new(vec![1], vec![0.0]).expect("placeholder")
            } else {
                Tensor::new(shape, v).expect("store tensor")
            }
        };
        vec![
            ("store.observations".into(), tensor(obs_shape.clone(), obs)),
            ("store.next_observations".into(), tensor(obs_shape, next)),
            ("store.scalars".into(), tensor(vec![n, 4], scalars)),
        ]
    }

    pub fn from_tensors(capacity: usize, obs_shape: &[usize], len: usize, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut store = TransitionStore::new(capacity, obs_shape);
        if len == 0 {
            return Ok(store);
        }
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
        };
        let (obs, next, sc) = (find("store.observations")?, find("store.next_observations")?, find("store.scalars")?);
        let l: usize = obs_shape.iter().product();
        if obs.numel() != len * l || next.numel() != len * l || sc.numel() != len * 4 {
            return Err(Error::Format("transition store tensors have the wrong size".into()));
        }
        for i in 0..len {
            let s = &sc.values()[i * 4..i * 4 + 4];
            store.push(Transition {
                observation: obs.values()[i * l..(i + 1) * l].to_vec(),
                action: s[0] as usize,
                reward: s[1],
                done: s[2] != 0.0,
                next_observation: next.values()[i * l..(i + 1) * l].to_vec(),
                behaviour_log_prob: s[3],
            });
        }
        Ok(store)
    }
}

/// Trains the student for `n_updates` minibatches drawn from `store`; the teacher is untouched.
pub fn sequential_distill(
    store: &TransitionStore,
    pair: &mut TeacherStudentPair,
    ppo: &PpoConfig,
    schedule: &DistillSchedule,
    n_updates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DistillStats> {
    if store.len() < ppo.minibatch_size {
        return Err(Error::usage(format!(
            "transition store holds {} transitions, fewer than one minibatch of {}",
            store.len(),
            ppo.minibatch_size
        )));
    }
    let mut all = Vec::with_capacity(n_updates);
    for u in 0..n_updates {
        let step = u as f64 / n_updates as f64 * schedule.t_distill as f64;
        let (alpha_pi, alpha_v) = schedule.coefficients(step);
        let coeffs = DistillCoefficients::new(alpha_pi, alpha_v, schedule.lambda_td, ppo);
        let idx = store.sample_indices(ppo.minibatch_size, rng);
        all.push(student_step(pair, &store.distill_batch(&idx), &coeffs, ppo.max_grad_norm)?);
    }
    Ok(mean_stats(&all))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Levels per evaluation, the first seeds of the chosen split.
    pub episodes: usize,
    pub split: EvalSplit,
    /// Evaluate every this many updates.
    pub interval: usize,
    pub mode: EvalMode,
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 64, split: EvalSplit::Test, interval: 1, mode: EvalMode::Sampled, sample_seed: 0 }
    }
}

/// Everything a reinforcement learning run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub levels: LevelSet,
    pub ppo: PpoConfig,
    pub network: NetworkSpec,
    pub total_frames: u64,
    pub eval: EvalConfig,
    /// Distillation schedule; `None` runs plain PPO.
    pub iter: Option<DistillSchedule>,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            levels: LevelSet::default(),
            ppo: PpoConfig::default(),
            network: NetworkSpec::small_cnn(),
            total_frames: 1_000_000,
            eval: EvalConfig::default(),
            iter: None,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.levels.validate()?;
        self.ppo.validate()?;
        if self.total_frames == 0 {
            return Err(Error::config("total_frames must be positive"));
        }
        if self.eval.episodes == 0 || self.eval.interval == 0 {
            return Err(Error::config("eval.episodes and eval.interval must be positive"));
        }
        if let Some(s) = &self.iter {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Distill,
}

/// One metrics record, written after every update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub update: u64,
    pub frames: u64,
    pub iteration_k: usize,
    pub phase: Phase,
    pub mean_return_train: f64,
    pub mean_return_test: f64,
    pub success_rate_test: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub grad_norm: f64,
    pub distill_loss: f64,
    pub distill_kl: f64,
}

/// A teacher replacement and the evaluated returns on either side of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementEvent {
    pub frames: u64,
    pub update: u64,
    /// Iteration index after the replacement.
    pub iteration_k: usize,
    pub pre_return: f64,
    pub post_return: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub events: Vec<ReplacementEvent>,
}

/// Output of a single [`RlTrainer::step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub rows: Vec<HistoryRow>,
    pub events: Vec<ReplacementEvent>,
}

/// Counters and RNG streams of a run, persisted alongside parameter checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub frames: u64,
    pub updates: u64,
    pub k: usize,
    pub phase_start: u64,
    pub teacher_opt: OptimizerState,
    pub student_opt: OptimizerState,
    pub env: VecEnv,
    pub rng: ChaCha8Rng,
    pub student_rng: ChaCha8Rng,
    pub last_train_return: f64,
    pub last_test_return: f64,
    pub last_test_success: f64,
    pub store_len: usize,
}

/// Drives PPO or ITER training one update at a time.
pub struct RlTrainer {
    config: RlConfig,
    pair: TeacherStudentPair,
    env: VecEnv,
    rng: ChaCha8Rng,
    student_rng: ChaCha8Rng,
    frames: u64,
    updates: u64,
    phase_start: u64,
    store: Option<TransitionStore>,
    eval_seeds: Vec<u64>,
    last_train_return: f64,
    last_test_return: f64,
    last_test_success: f64,
}

impl RlTrainer {
    pub fn new(config: &RlConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env_cfg = &config.levels.env;
        let teacher = PolicyValueNet::new(
            &config.network,
            &env_cfg.observation_shape(),
            env_cfg.n_actions(),
            mix_seed(seed, 0x7e),
        )?;
        let teacher_opt = Optimizer::new(config.ppo.optimizer.clone())?;
        let pair = TeacherStudentPair::new(teacher, teacher_opt, mix_seed(seed, 0x57))?;
        let env = VecEnv::new(env_cfg, config.levels.train, config.ppo.n_envs, mix_seed(seed, 0xe1))?;
        let store = config
            .iter
            .as_ref()
            .filter(|s| s.mode == IterMode::Sequential)
            .map(|s| TransitionStore::new(s.store_capacity, &env_cfg.observation_shape()));
        Ok(RlTrainer {
            config: config.clone(),
            pair,
            env,
            rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x99)),
            student_rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5d)),
            frames: 0,
            updates: 0,
            phase_start: 0,
            store,
            eval_seeds: match config.eval.split {
                EvalSplit::Train => config.levels.train.first(config.eval.episodes),
                EvalSplit::Test => config.levels.test.first(config.eval.episodes),
            },
            last_train_return: 0.0,
            last_test_return: 0.0,
            last_test_success: 0.0,
        })
    }

    pub fn config(&self) -> &RlConfig {
        &self.config
    }

    pub fn pair(&self) -> &TeacherStudentPair {
        &self.pair
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn is_done(&self) -> bool {
        self.frames >= self.config.total_frames
    }

    pub fn store(&self) -> Option<&TransitionStore> {
        self.store.as_ref()
    }

    /// Evaluates `net` on the fixed evaluation seeds.
    pub fn evaluate(&self, net: &PolicyValueNet) -> Result<(f64, f64)> {
        let e = &self.config.eval;
        let r = evaluate(net, &self.config.levels.env, &self.eval_seeds, e.mode, e.sample_seed)?;
        Ok((r.mean_return, r.success_rate))
    }

    fn replacements_left(&self) -> bool {
        match &self.config.iter {
            Some(s) => s.max_iterations.is_none_or(|m| self.pair.k < m),
            None => false,
        }
    }

    fn in_distill_phase(&self) -> bool {
        match &self.config.iter {
            Some(s) => self.frames >= s.t_init && self.replacements_left(),
            None => false,
        }
    }

    fn replace(&mut self) -> Result<ReplacementEvent> {
        let (pre, _) = self.evaluate(&self.pair.teacher)?;
        let (post, _) = self.evaluate(&self.pair.student)?;
        self.pair.replace_teacher()?;
        Ok(ReplacementEvent { frames: self.frames, update: self.updates, iteration_k: self.pair.k, pre_return: pre, post_return: post })
    }

    /// Collects one batch, applies one update and any replacement due at its end.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::usage("training budget already exhausted"));
        }
        let mut report = StepReport::default();
        let ppo = self.config.ppo.clone();
        let batch_frames = ppo.batch_size() as u64;
        let schedule = self.config.iter.clone();
        let sequential = schedule.as_ref().is_some_and(|s| s.mode == IterMode::Sequential);

        // Sequential mode distils from the store at each phase boundary before collecting more data.
        if let (true, Some(s)) = (sequential, &schedule) {
            let boundary = if self.pair.k == 0 { s.t_init } else { self.phase_start + s.t_distill };
            if self.frames >= boundary && self.frames >= s.t_init && self.replacements_left() {
                let store = self.store.as_ref().expect("sequential store");
                let mb = ppo.minibatch_size.min(ppo.batch_size());
                let n_updates = s.t_distill.div_ceil(batch_frames) as usize * ppo.ppo_epochs * ppo.batch_size().div_ceil(mb);
                sequential_distill(store, &mut self.pair, &ppo, s, n_updates, &mut self.student_rng)?;
                report.events.push(self.replace()?);
                self.phase_start = self.frames;
            }
        }

        let distilling = self.in_distill_phase();
        let mut batch = collect_rollout(&self.pair.teacher, &mut self.env, ppo.frames_per_env, &mut self.rng)?;
        compute_gae(&mut batch, ppo.gamma, ppo.lambda_gae);
        let mut distill = None;
        let stats = match (&schedule, distilling, sequential) {
            (Some(s), true, false) => {
                let step = (self.frames - self.phase_start) as f64;
                let (t, d) = parallel_iter_step(
                    &batch,
                    &mut self.pair,
                    &ppo,
                    s,
                    step,
                    &mut self.rng,
                    &mut self.student_rng,
                )?;
                distill = Some(d);
                t
            }
            _ => ppo_update(&batch, &mut self.pair.teacher, &mut self.pair.teacher_opt, &ppo, &mut self.rng)?,
        };
        if let Some(store) = self.store.as_mut() {
            store.push_rollout(&batch);
        }
        self.frames += batch_frames;
        self.updates += 1;
        if let Some(r) = batch.mean_finished_return() {
            self.last_train_return = r;
        }
        if self.updates % self.config.eval.interval as u64 == 0 || self.is_done() {
            let (r, s) = self.evaluate(&self.pair.teacher)?;
            self.last_test_return = r;
            self.last_test_success = s;
        }
        report.rows.push(HistoryRow {
            update: self.updates,
            frames: self.frames,
            iteration_k: self.pair.k,
            phase: if distilling { Phase::Distill } else { Phase::Init },
            mean_return_train: self.last_train_return,
            mean_return_test: self.last_test_return,
            success_rate_test: self.last_test_success,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            grad_norm: stats.grad_norm,
            distill_loss: distill.map_or(f64::NAN, |d| d.loss),
            distill_kl: distill.map_or(f64::NAN, |d| d.l_pi),
        });

        // Parallel mode replaces the teacher once a full phase of batches has been distilled.
        if let (Some(s), true, false) = (&schedule, distilling, sequential) {
            if self.frames - self.phase_start >= s.t_distill {
                report.events.push(self.replace()?);
                self.phase_start = self.frames;
            }
        } else if let (Some(s), false) = (&schedule, sequential) {
            // The first phase starts at the first update boundary at or after `t_init`.
            if self.frames >= s.t_init && self.frames - batch_frames < s.t_init {
                self.phase_start = self.frames;
            }
        }
        Ok(report)
    }

    /// Serialisable counters, optimizer buffers and RNG streams.
    pub fn state(&self) -> TrainerState {
        TrainerState {
            frames: self.frames,
            updates: self.updates,
            k: self.pair.k,
            phase_start: self.phase_start,
            teacher_opt: self.pair.teacher_opt.state.clone(),
            student_opt: self.pair.student_opt.state.clone(),
            env: self.env.clone(),
            rng: self.rng.clone(),
            student_rng: self.student_rng.clone(),
            last_train_return: self.last_train_return,
            last_test_return: self.last_test_return,
            last_test_success: self.last_test_success,
            store_len: self.store.as_ref().map_or(0, |s| s.len()),
        }
    }

    /// Restores a trainer from a state snapshot plus the network parameters.
    pub fn restore(
        config: &RlConfig,
        seed: u64,
        state: TrainerState,
        teacher: &[crate::nn::Param],
        student: &[crate::nn::Param],
        store: Option<&[(String, Tensor)]>,
    ) -> Result<Self> {
        let mut t = RlTrainer::new(config, seed)?;
        crate::checkpoint::assign(t.pair.teacher.network_mut(), teacher)?;
        crate::checkpoint::assign(t.pair.student.network_mut(), student)?;
        t.pair.teacher_opt.state = state.teacher_opt;
        t.pair.student_opt.state = state.student_opt;
        t.pair.k = state.k;
        t.frames = state.frames;
        t.updates = state.updates;
        t.phase_start = state.phase_start;
        t.env = state.env;
        t.rng = state.rng;
        t.student_rng = state.student_rng;
        t.last_train_return = state.last_train_return;
        t.last_test_return = state.last_test_return;
        t.last_test_success = state.last_test_success;
        if let (Some(s), Some(tensors)) = (t.store.as_ref(), store) {
            t.store = Some(TransitionStore::from_tensors(s.capacity(), s.obs_shape(), state.store_len, tensors)?);
        }
        Ok(t)
    }
}

/// Runs a full training job for one seed and returns its history.
pub fn run_iter(config: &RlConfig, seed: u64) -> Result<History> {
    let mut trainer = RlTrainer::new(config, seed)?;
    let mut history = History::default();
    while !trainer.is_done() {
        let report = trainer.step()?;
        history.rows.extend(report.rows);
        history.events.extend(report.events);
    }
    Ok(history)
}
