use itergrid::autodiff::{log_softmax, softmax};
use itergrid::env::{EnvConfig, LevelSet, SeedRange, VecEnv};
use itergrid::iter::{
    distill_loss, run_iter, sequential_distill, DistillBatch, DistillCoefficients, DistillSchedule, EvalConfig,
    IterMode, Phase, RlConfig, TeacherStudentPair, Transition, TransitionStore,
};
use itergrid::nn::{NetworkSpec, PolicyValueNet};
use itergrid::ppo::{approx_kl, collect_rollout, compute_gae, ppo_loss, ppo_update, Minibatch, PpoConfig, RolloutBatch};
use itergrid::{Error, Optimizer, OptimizerConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_env() -> EnvConfig {
    EnvConfig { room_count: (1, 1), max_steps: Some(30), ..EnvConfig::multiroom() }
}

fn small_ppo() -> PpoConfig {
    PpoConfig { n_envs: 4, frames_per_env: 32, minibatch_size: 32, optimizer: OptimizerConfig::adam(1e-3), ..PpoConfig::default() }
}

fn small_net(seed: u64) -> PolicyValueNet {
    let env = small_env();
    PolicyValueNet::new(&NetworkSpec::mlp(&[16]), &env.observation_shape(), env.n_actions(), seed).unwrap()
}

fn rollout(net: &PolicyValueNet, ppo: &PpoConfig, seed: u64) -> RolloutBatch {
    let mut env = VecEnv::new(&small_env(), SeedRange::new(0, 50), ppo.n_envs, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = collect_rollout(net, &mut env, ppo.frames_per_env, &mut rng).unwrap();
    compute_gae(&mut batch, ppo.gamma, ppo.lambda_gae);
    batch
}

fn full_minibatch_loss(net: &PolicyValueNet, batch: &RolloutBatch, config: &PpoConfig, adv: &[f64]) -> itergrid::ppo::LossStats {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let obs = batch.gather_observations(&idx);
    let mb = Minibatch {
        observations: &obs,
        actions: &batch.actions,
        old_log_probs: &batch.behaviour_log_probs,
        advantages: adv,
        returns: &batch.returns,
    };
    let tape = Tape::new();
    ppo_loss(&tape, net, &mb, config).unwrap().2
}

fn tiny_rl(iter: Option<DistillSchedule>, updates: u64) -> RlConfig {
    let ppo = small_ppo();
    RlConfig {
        levels: LevelSet { train: SeedRange::new(0, 100), ..LevelSet::new(small_env()) },
        total_frames: updates * ppo.batch_size() as u64,
        ppo,
        network: NetworkSpec::mlp(&[16]),
        eval: EvalConfig { episodes: 4, ..EvalConfig::default() },
        iter,
    }
}

#[test]
fn bandit_policy_concentrates_on_the_advantaged_action() {
    let config = PpoConfig {
        n_envs: 64,
        frames_per_env: 1,
        minibatch_size: 64,
        optimizer: OptimizerConfig::adam(1e-2),
        ..PpoConfig::default()
    };
    let mut net = PolicyValueNet::new(&NetworkSpec::mlp(&[]), &[1], 3, 0).unwrap();
    let mut opt = Optimizer::new(config.optimizer.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let obs = Tensor::new(vec![64, 1], vec![1.0; 64]).unwrap();
    for _ in 0..200 {
        let (logits, values) = net.infer(&obs).unwrap();
        let logp = log_softmax(&logits);
        let probs = softmax(&logits);
        let actions: Vec<usize> =
            probs.values().chunks(3).map(|p| itergrid::ppo::sample_categorical(p, &mut rng)).collect();
        let mut batch = RolloutBatch {
            obs_shape: vec![1],
            n_envs: 64,
            frames_per_env: 1,
            observations: vec![1.0; 64],
            behaviour_log_probs: actions.iter().enumerate().map(|(i, &a)| logp.values()[i * 3 + a]).collect(),
            rewards: actions.iter().map(|&a| if a == 0 { 1.0 } else { 0.0 }).collect(),
            actions,
            dones: vec![true; 64],
            values,
            bootstrap_values: vec![0.0; 64],
            bootstrap_observations: vec![1.0; 64],
            advantages: Vec::new(),
            returns: Vec::new(),
            finished: Vec::new(),
        };
        compute_gae(&mut batch, config.gamma, config.lambda_gae);
        ppo_update(&batch, &mut net, &mut opt, &config, &mut rng).unwrap();
    }
    let (logits, _) = net.infer(&Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
    let p = softmax(&logits);
    assert!(p.values()[0] > 0.95, "probabilities {:?}", p.values());
}

#[test]
fn rollout_log_probs_match_re_evaluation_and_first_ratio_is_one() {
    let config = small_ppo();
    let net = small_net(3);
    let batch = rollout(&net, &config, 5);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (logits, _) = net.infer(&batch.gather_observations(&idx)).unwrap();
    let logp = log_softmax(&logits);
    let k = net.n_actions();
    for i in 0..batch.len() {
        let fresh = logp.values()[i * k + batch.actions[i]];
        assert!((fresh - batch.behaviour_log_probs[i]).abs() < 1e-9);
    }
    let stats = full_minibatch_loss(&net, &batch, &config, &batch.advantages);
    assert_eq!(stats.clip_fraction, 0.0);
    assert!(stats.approx_kl.abs() < 1e-12);
    assert!(approx_kl(&batch, &net).unwrap().abs() < 1e-12);
}

#[test]
fn zero_advantages_leave_value_and_entropy_terms() {
    let config = small_ppo();
    let net = small_net(4);
    let batch = rollout(&net, &config, 6);
    let zeros = vec![0.0; batch.len()];
    let s = full_minibatch_loss(&net, &batch, &config, &zeros);
    assert_eq!(s.policy_loss, 0.0);
    let expected = config.value_coeff * s.value_loss - config.entropy_coeff * s.entropy;
    assert!((s.loss - expected).abs() < 1e-12, "{} vs {expected}", s.loss);
}

#[test]
fn infinite_clip_gives_importance_weighted_policy_gradient() {
    let config = PpoConfig { clip_epsilon: f64::INFINITY, entropy_coeff: 0.0, value_coeff: 0.0, ..small_ppo() };
    let behaviour = small_net(7);
    let batch = rollout(&behaviour, &config, 8);
    let net = small_net(9);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let obs = batch.gather_observations(&idx);
    let mb = Minibatch {
        observations: &obs,
        actions: &batch.actions,
        old_log_probs: &batch.behaviour_log_probs,
        advantages: &batch.advantages,
        returns: &batch.returns,
    };
    let tape = Tape::new();
    let (loss, params, _) = ppo_loss(&tape, &net, &mb, &config).unwrap();
    tape.backward(loss).unwrap();
    let ppo_grads: Vec<Vec<f64>> = params.0.iter().map(|v| tape.grad(*v).unwrap()).collect();

    let tape2 = Tape::new();
    let out = net.forward(&tape2, &obs, true).unwrap();
    let old = tape2.constant(&[batch.len()], batch.behaviour_log_probs.clone());
    let adv = tape2.constant(&[batch.len()], batch.advantages.clone());
    let vanilla = out.logits.log_softmax().gather(&batch.actions).sub(old).exp().mul(adv).mean().neg();
    tape2.backward(vanilla).unwrap();
    assert!((vanilla.item() - loss.item()).abs() < 1e-12);
    for (g, v) in ppo_grads.iter().zip(&out.params.0) {
        let h = tape2.grad(*v).unwrap_or_else(|| vec![0.0; g.len()]);
        for (a, b) in g.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn distill_loss_with_copied_student_equals_ppo_loss() {
    let config = PpoConfig { lambda_gae: 0.0, normalize_advantages: false, ..small_ppo() };
    let teacher = small_net(11);
    let student = teacher.clone();
    let batch = rollout(&teacher, &config, 12);
    let ppo_value = full_minibatch_loss(&teacher, &batch, &config, &batch.advantages).loss;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let db = DistillBatch::from_rollout(&batch, &idx);
    let coeffs = DistillCoefficients::new(0.0, 0.0, config.value_coeff, &config);
    let tape = Tape::new();
    let (_, stats) = distill_loss(&tape, &db, &teacher, &student, &coeffs, false).unwrap();
    assert!((stats.loss - ppo_value).abs() < 1e-9, "{} vs {ppo_value}", stats.loss);
}

#[test]
fn scaling_alpha_pi_scales_its_gradient_contribution() {
    let config = small_ppo();
    let teacher = small_net(13);
    let student = small_net(14);
    let batch = rollout(&teacher, &config, 15);
    let idx: Vec<usize> = (0..64).collect();
    let db = DistillBatch::from_rollout(&batch, &idx);
    let grads = |alpha_pi: f64| -> Vec<f64> {
        let tape = Tape::new();
        let c = DistillCoefficients::new(alpha_pi, 0.5, 0.5, &config);
        let (vars, _) = distill_loss(&tape, &db, &teacher, &student, &c, false).unwrap();
        tape.backward(vars.loss).unwrap();
        vars.student.0.iter().flat_map(|v| tape.grad(*v).unwrap()).collect()
    };
    let (g0, g1, g10) = (grads(0.0), grads(0.3), grads(3.0));
    let scale = g1.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..g0.len() {
        let (d1, d10) = (g1[i] - g0[i], g10[i] - g0[i]);
        assert!((d10 - 10.0 * d1).abs() < 1e-9 * scale.max(1.0), "coordinate {i}: {d10} vs {}", 10.0 * d1);
    }
}

/// Networks without hidden layers on one-hot inputs: logits and values are table lookups.
fn table_net(logits: [[f64; 2]; 2], values: [f64; 2]) -> PolicyValueNet {
    let mut net = PolicyValueNet::new(&NetworkSpec { layers: vec![] }, &[2], 2, 0).unwrap();
    let params = net.network_mut().params_mut();
    params[0].tensor.values_mut().copy_from_slice(&[logits[0][0], logits[0][1], logits[1][0], logits[1][1]]);
    params[1].tensor.values_mut().copy_from_slice(&[0.0, 0.0]);
    params[2].tensor.values_mut().copy_from_slice(&values);
    params[3].tensor.values_mut().copy_from_slice(&[0.0]);
    net
}

#[test]
fn two_state_distillation_terms_match_hand_computation() {
    let teacher = table_net([[1.0, -1.0], [0.0, 2.0]], [0.5, -0.25]);
    let student = table_net([[0.0, 0.0], [0.5, 0.0]], [0.1, 0.3]);
    let batch = DistillBatch {
        observations: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        next_observations: Some(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()),
        actions: vec![0, 1],
        rewards: vec![1.0, 0.0],
        dones: vec![false, true],
    };
    let config = PpoConfig { gamma: 0.9, clip_epsilon: 0.2, entropy_coeff: 0.01, ..PpoConfig::default() };
    let c = DistillCoefficients::new(1.0, 0.5, 0.5, &config);
    let tape = Tape::new();
    let (vars, stats) = distill_loss(&tape, &batch, &teacher, &student, &c, false).unwrap();

    let sm = |a: f64, b: f64| {
        let z = a.exp() + b.exp();
        [a.exp() / z, b.exp() / z]
    };
    let (p0, p1) = (sm(1.0, -1.0), sm(0.0, 2.0));
    let (q0, q1) = ([0.5, 0.5], sm(0.5, 0.0));
    let kl = |p: [f64; 2], q: [f64; 2]| p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
    let l_pi = (kl(p0, q0) + kl(p1, q1)) / 2.0;
    let l_v = ((0.5f64 - 0.1).powi(2) + (-0.25f64 - 0.3).powi(2)) / 2.0;
    // State 0 continues into state 1 (student value 0.3); state 1 terminates.
    let adv = [1.0 + 0.9 * 0.3 - 0.1, 0.0 - 0.3];
    let ratio = [q0[0] / p0[0], q1[1] / p1[1]];
    let surr = |r: f64, a: f64| (r * a).min(r.clamp(0.8, 1.2) * a);
    let ent = |q: [f64; 2]| -(q[0] * q[0].ln() + q[1] * q[1].ln());
    let l_pg = -(surr(ratio[0], adv[0]) + surr(ratio[1], adv[1])) / 2.0 - 0.01 * (ent(q0) + ent(q1)) / 2.0;
    let l_td = (ratio[0] * adv[0] * adv[0] + ratio[1] * adv[1] * adv[1]) / 2.0;

    for (name, got, want) in [
        ("l_pi", stats.l_pi, l_pi),
        ("l_v", stats.l_v, l_v),
        ("l_pg", stats.l_pg, l_pg),
        ("l_td", stats.l_td, l_td),
        ("loss", vars.loss.item(), l_pi + 0.5 * l_v + l_pg + 0.5 * l_td),
    ] {
        assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
    }
}

#[test]
fn teacher_receives_no_gradient_from_the_distillation_loss() {
    let config = small_ppo();
    let teacher = small_net(21);
    let student = small_net(22);
    let batch = rollout(&teacher, &config, 23);
    let db = DistillBatch::from_rollout(&batch, &(0..32).collect::<Vec<_>>());
    let tape = Tape::new();
    let c = DistillCoefficients::new(1.0, 0.5, 0.5, &config);
    let (vars, _) = distill_loss(&tape, &db, &teacher, &student, &c, true).unwrap();
    tape.backward(vars.loss).unwrap();
    for v in &vars.teacher.0 {
        assert!(tape.grad(*v).is_none_or(|g| g.iter().all(|x| *x == 0.0)));
    }
    assert!(vars.student.0.iter().any(|v| tape.grad(*v).is_some_and(|g| g.iter().any(|x| *x != 0.0))));
}

fn store_from(batch: &RolloutBatch, n: usize) -> TransitionStore {
    let mut store = TransitionStore::new(n, &batch.obs_shape);
    store.push_rollout(batch);
    store
}

#[test]
fn sequential_distillation_leaves_the_teacher_untouched() {
    let config = small_ppo();
    let teacher = small_net(31);
    let batch = rollout(&teacher, &config, 32);
    let store = store_from(&batch, 128);
    let mut pair = TeacherStudentPair::new(teacher, Optimizer::new(config.optimizer.clone()).unwrap(), 5).unwrap();
    let before = pair.teacher.network().checksum();
    let student_before = pair.student.network().checksum();
    let schedule = DistillSchedule { t_init: 128, t_distill: 128, mode: IterMode::Sequential, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    sequential_distill(&store, &mut pair, &config, &schedule, 10, &mut rng).unwrap();
    assert_eq!(pair.teacher.network().checksum(), before);
    assert_ne!(pair.student.network().checksum(), student_before);
}

#[test]
fn store_of_one_transition_with_unit_minibatch() {
    let config = PpoConfig { minibatch_size: 1, ..small_ppo() };
    let teacher = small_net(41);
    let batch = rollout(&teacher, &config, 42);
    let store = store_from(&batch, 1);
    assert_eq!(store.len(), 1);
    let mut pair = TeacherStudentPair::new(teacher, Optimizer::new(config.optimizer.clone()).unwrap(), 6).unwrap();
    let schedule = DistillSchedule { t_init: 128, t_distill: 128, mode: IterMode::Sequential, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stats = sequential_distill(&store, &mut pair, &config, &schedule, 5, &mut rng).unwrap();
    assert!(stats.loss.is_finite());

    let too_small = PpoConfig { minibatch_size: 2, ..config };
    let err = sequential_distill(&store, &mut pair, &too_small, &schedule, 5, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn policy_distillation_converges_on_a_repeated_transition() {
    let config = PpoConfig { entropy_coeff: 0.0, ..small_ppo() };
    let teacher = table_net([[2.0, -1.0], [0.0, 0.0]], [0.0, 0.0]);
    let mut student = table_net([[0.0, 0.0], [0.0, 0.0]], [0.0, 0.0]);
    let mut store = TransitionStore::new(1, &[2]);
    store.push(Transition {
        observation: vec![1.0, 0.0],
        action: 0,
        reward: 0.0,
        done: true,
        next_observation: vec![1.0, 0.0],
        behaviour_log_prob: 0.0,
    });
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.05)).unwrap();
    let c = DistillCoefficients::new(1.0, 0.0, 0.0, &config);
    let mut last = f64::INFINITY;
    for _ in 0..400 {
        let tape = Tape::new();
        let db = store.distill_batch(&[0]);
        let (vars, stats) = distill_loss(&tape, &db, &teacher, &student, &c, false).unwrap();
        tape.backward(vars.l_pi).unwrap();
        let net = student.network_mut();
        net.zero_grad();
        net.accumulate_grads(&tape, &vars.student);
        opt.step(net.params_mut()).unwrap();
        last = stats.l_pi;
    }
    assert!(last < 1e-4, "final KL {last}");
}

#[test]
fn replacement_promotes_the_student_and_reinitialises() {
    let config = small_ppo();
    let make = || TeacherStudentPair::new(small_net(51), Optimizer::new(config.optimizer.clone()).unwrap(), 8).unwrap();
    let mut pair = make();
    let student = pair.student.network().checksum();
    let teacher = pair.teacher.network().checksum();
    assert_ne!(student, teacher);
    pair.replace_teacher().unwrap();
    assert_eq!(pair.k, 1);
    assert_eq!(pair.teacher.network().checksum(), student);
    assert_ne!(pair.student.network().checksum(), student);
    assert_ne!(pair.student.network().checksum(), teacher);
    assert_eq!(pair.teacher_opt.state.step, 0);

    let mut again = make();
    again.replace_teacher().unwrap();
    assert_eq!(again.student.network().checksum(), pair.student.network().checksum());
}

#[test]
fn init_phase_covering_the_budget_reproduces_plain_ppo() {
    let plain = run_iter(&tiny_rl(None, 4), 3).unwrap();
    let batch = small_ppo().batch_size() as u64;
    let schedule = DistillSchedule { t_init: 4 * batch, t_distill: batch, ..Default::default() };
    let iter = run_iter(&tiny_rl(Some(schedule), 4), 3).unwrap();
    assert_eq!(format!("{:?}", plain.rows), format!("{:?}", iter.rows));
    assert!(iter.events.is_empty());
}

#[test]
fn budget_for_two_phases_gives_two_replacements() {
    let batch = small_ppo().batch_size() as u64;
    for mode in [IterMode::Parallel, IterMode::Sequential] {
        let schedule = DistillSchedule { t_init: 2 * batch, t_distill: 2 * batch, mode, store_capacity: 256, ..Default::default() };
        let h = run_iter(&tiny_rl(Some(schedule), 6), 1).unwrap();
        assert_eq!(h.events.len(), 2, "{mode:?}");
        assert_eq!(h.events.iter().map(|e| e.iteration_k).collect::<Vec<_>>(), vec![1, 2]);
    }
}

#[test]
fn phase_lengths_round_up_to_update_boundaries() {
    let batch = small_ppo().batch_size() as u64;
    let schedule = DistillSchedule { t_init: batch + 1, t_distill: batch + 1, ..Default::default() };
    let h = run_iter(&tiny_rl(Some(schedule.clone()), 6), 2).unwrap();
    assert_eq!(h.events.iter().map(|e| e.update).collect::<Vec<_>>(), vec![4, 6]);
    let phases: Vec<Phase> = h.rows.iter().map(|r| r.phase).collect();
    assert_eq!(phases[..3], [Phase::Init, Phase::Init, Phase::Distill]);
    let seq = DistillSchedule { mode: IterMode::Sequential, store_capacity: 256, ..schedule };
    let h = run_iter(&tiny_rl(Some(seq), 6), 2).unwrap();
    assert_eq!(h.events.iter().map(|e| e.update).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn student_training_does_not_perturb_the_teacher() {
    let batch = small_ppo().batch_size() as u64;
    let plain = run_iter(&tiny_rl(None, 4), 9).unwrap();
    // The phase would end after the budget, so no replacement happens.
    let schedule = DistillSchedule { t_init: batch, t_distill: 10 * batch, ..Default::default() };
    let iter = run_iter(&tiny_rl(Some(schedule), 4), 9).unwrap();
    assert!(iter.events.is_empty());
    assert!(iter.rows.iter().skip(1).all(|r| r.distill_loss.is_finite()));
    for (a, b) in plain.rows.iter().zip(&iter.rows) {
        assert_eq!(
            (a.policy_loss, a.value_loss, a.entropy, a.grad_norm, a.mean_return_test),
            (b.policy_loss, b.value_loss, b.entropy, b.grad_norm, b.mean_return_test)
        );
    }

    let disabled = DistillSchedule { t_init: batch, t_distill: batch, max_iterations: Some(0), ..Default::default() };
    let h = run_iter(&tiny_rl(Some(disabled), 4), 9).unwrap();
    assert_eq!(format!("{:?}", plain.rows), format!("{:?}", h.rows));
}

#[test]
fn distill_loss_requires_next_observations() {
    let teacher = small_net(61);
    let batch = DistillBatch {
        observations: Tensor::zeros(&[1, 3, 15, 15]),
        next_observations: None,
        actions: vec![0],
        rewards: vec![0.0],
        dones: vec![false],
    };
    let c = DistillCoefficients::new(1.0, 0.5, 0.5, &small_ppo());
    let tape = Tape::new();
    assert!(matches!(distill_loss(&tape, &batch, &teacher, &teacher, &c, false), Err(Error::Usage(_))));
}

#[test]
fn layer_spec_without_hidden_layers_is_linear() {
    let net = table_net([[1.0, 2.0], [3.0, 4.0]], [5.0, 6.0]);
    let (logits, values) = net.infer(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    assert_eq!(logits.values(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(values, vec![5.0, 6.0]);
}
