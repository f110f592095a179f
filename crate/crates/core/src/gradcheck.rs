//! Central finite-difference checks of tape gradients.
//!
//! The relative error of one coordinate is `|g - n| / max(|g|, |n|, FLOOR)`
//! with `g` the tape gradient and `n` the central difference estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{cross_entropy, entropy, kl_divergence, mse, softmax, Tape, Var};
use crate::env::mix_seed;
use crate::error::Result;
use crate::iter::{distill_loss, DistillBatch, DistillCoefficients};
use crate::nn::{LayerSpec, NetworkSpec, Param, ParamVars, PolicyValueNet};
use crate::ppo::{ppo_loss, Minibatch, PpoConfig};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-4;

fn rel_error(g: f64, n: f64) -> f64 {
    (g - n).abs() / g.abs().max(n.abs()).max(FLOOR)
}

/// Max relative error of `f` with respect to every coordinate of every input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.shape(), t.values().to_vec())).collect();
    let loss = f(&tape, &vars);
    tape.backward(loss)?;
    let eval = |inputs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.shape(), t.values().to_vec())).collect();
        f(&tape, &vars).item()
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let grad = tape.grad(*v).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].values()[j];
            work[i].values_mut()[j] = x + STEP;
            let up = eval(&work);
            work[i].values_mut()[j] = x - STEP;
            let down = eval(&work);
            work[i].values_mut()[j] = x;
            worst = worst.max(rel_error(grad[j], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Max relative error of a loss with respect to the parameters of a model.
///
/// `loss` builds the loss on a tape and returns it with the parameter handles
/// in parameter order; `params` exposes the parameters for perturbation.
pub fn check_params<M, L, P>(model: &mut M, params: P, loss: L) -> Result<f64>
where
    L: for<'t> Fn(&'t Tape, &M) -> Result<(Var<'t>, ParamVars<'t>)>,
    P: Fn(&mut M) -> &mut [Param],
{
    check_params_against(model, params, &loss, |m| Ok(loss(&Tape::new(), m)?.0.item()))
}

/// Like [`check_params`], but the finite differences are taken of `reference`.
///
/// Losses with detached terms have semi-gradients; `reference` evaluates the
/// same loss with the detached quantities frozen at the unperturbed model.
pub fn check_params_against<M, L, P, R>(model: &mut M, params: P, loss: L, reference: R) -> Result<f64>
where
    L: for<'t> Fn(&'t Tape, &M) -> Result<(Var<'t>, ParamVars<'t>)>,
    P: Fn(&mut M) -> &mut [Param],
    R: Fn(&M) -> Result<f64>,
{
    let tape = Tape::new();
    let (l, vars) = loss(&tape, model)?;
    tape.backward(l)?;
    let grads: Vec<Vec<f64>> = vars
        .0
        .iter()
        .zip(params(model).iter())
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();
    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        for j in 0..grad.len() {
            let x = params(model)[pi].tensor.values()[j];
            params(model)[pi].tensor.values_mut()[j] = x + STEP;
            let up = reference(model)?;
            params(model)[pi].tensor.values_mut()[j] = x - STEP;
            let down = reference(model)?;
            params(model)[pi].tensor.values_mut()[j] = x;
            worst = worst.max(rel_error(grad[j], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(worst)
}

/// Operations and losses covered by [`random_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Linear,
    Conv2d,
    MaxPool,
    Relu,
    Tanh,
    ExpLog,
    Clamp,
    Minimum,
    LogSoftmax,
    Softmax,
    CrossEntropy,
    Mse,
    KlDivergence,
    Entropy,
    ConvNet,
    PpoLoss,
    DistillLoss,
}

impl CheckKind {
    pub const ALL: [CheckKind; 17] = [
        CheckKind::Linear,
        CheckKind::Conv2d,
        CheckKind::MaxPool,
        CheckKind::Relu,
        CheckKind::Tanh,
        CheckKind::ExpLog,
        CheckKind::Clamp,
        CheckKind::Minimum,
        CheckKind::LogSoftmax,
        CheckKind::Softmax,
        CheckKind::CrossEntropy,
        CheckKind::Mse,
        CheckKind::KlDivergence,
        CheckKind::Entropy,
        CheckKind::ConvNet,
        CheckKind::PpoLoss,
        CheckKind::DistillLoss,
    ];
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values at least `margin` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], margin: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).expect("shape")
}

/// Weighted sum with fixed random weights, so every output coordinate matters.
fn project<'t>(tape: &'t Tape, x: Var<'t>, rng_seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = (0..x.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    x.mul(tape.constant(&x.shape(), w)).sum()
}

fn labels(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Vec<usize> {
    (0..rows).map(|_| rng.random_range(0..k)).collect()
}

/// One randomised gradient check of `kind`; returns the max relative error.
pub fn random_check(kind: CheckKind, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..5);
    let k = rng.random_range(2..6);
    let ps = mix_seed(seed, 1);
    match kind {
        CheckKind::Linear => {
            let inner = rng.random_range(1..6);
            let x = uniform(&mut rng, &[rows, inner], -1.0, 1.0);
            let w = uniform(&mut rng, &[inner, k], -1.0, 1.0);
            let b = uniform(&mut rng, &[k], -1.0, 1.0);
            check_inputs(&[x, w, b], |t, v| project(t, v[0].linear(v[1], Some(v[2])), ps))
        }
        CheckKind::Conv2d => {
            let (c, h, w, o) = (rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5), rng.random_range(1..3));
            let kernel = if rng.random_bool(0.5) { 1 } else { 3 };
            let x = uniform(&mut rng, &[rows.min(2), c, h, w], -1.0, 1.0);
            let wt = uniform(&mut rng, &[o, c, kernel, kernel], -1.0, 1.0);
            let b = uniform(&mut rng, &[o], -1.0, 1.0);
            check_inputs(&[x, wt, b], |t, v| project(t, v[0].conv2d(v[1], v[2]), ps))
        }
        CheckKind::MaxPool => {
            // Distinct, well separated values keep every window's argmax stable.
            let shape = [rows.min(2), 2, 4, 4];
            let n: usize = shape.iter().product();
            let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(&mut rng);
            let x = Tensor::new(shape.to_vec(), vals)?;
            check_inputs(&[x], |t, v| project(t, v[0].max_pool(2), ps))
        }
        CheckKind::Relu => {
            let x = away_from(&mut rng, &[rows, k], &[0.0], 0.01);
            check_inputs(&[x], |t, v| project(t, v[0].relu(), ps))
        }
        CheckKind::Tanh => {
            let x = uniform(&mut rng, &[rows, k], -2.0, 2.0);
            check_inputs(&[x], |t, v| project(t, v[0].tanh(), ps))
        }
        CheckKind::ExpLog => {
            let x = uniform(&mut rng, &[rows, k], 0.2, 2.0);
            check_inputs(&[x], |t, v| project(t, v[0].ln().add(v[0].exp()).square(), ps))
        }
        CheckKind::Clamp => {
            let x = away_from(&mut rng, &[rows, k], &[-0.5, 0.5], 0.01);
            check_inputs(&[x], |t, v| project(t, v[0].clamp(-0.5, 0.5), ps))
        }
        CheckKind::Minimum => {
            let a = uniform(&mut rng, &[rows, k], -1.0, 1.0);
            let shift = away_from(&mut rng, &[rows, k], &[0.0], 0.01);
            let b = Tensor::new(a.shape().to_vec(), a.values().iter().zip(shift.values()).map(|(x, s)| x + s).collect())?;
            check_inputs(&[a, b], |t, v| project(t, v[0].minimum(v[1]), ps))
        }
        CheckKind::LogSoftmax => {
            let x = uniform(&mut rng, &[rows, k], -3.0, 3.0);
            check_inputs(&[x], |t, v| project(t, v[0].log_softmax(), ps))
        }
        CheckKind::Softmax => {
            let x = uniform(&mut rng, &[rows, k], -3.0, 3.0);
            check_inputs(&[x], |t, v| project(t, v[0].softmax(), ps))
        }
        CheckKind::CrossEntropy => {
            let x = uniform(&mut rng, &[rows, k], -3.0, 3.0);
            let y = labels(&mut rng, rows, k);
            check_inputs(&[x], move |_, v| cross_entropy(v[0], &y))
        }
        CheckKind::Mse => {
            let a = uniform(&mut rng, &[rows, k], -1.0, 1.0);
            let b = uniform(&mut rng, &[rows, k], -1.0, 1.0);
            check_inputs(&[a, b], |_, v| mse(v[0], v[1]))
        }
        CheckKind::KlDivergence => {
            let p = softmax(&uniform(&mut rng, &[rows, k], -2.0, 2.0));
            let q = uniform(&mut rng, &[rows, k], -2.0, 2.0);
            check_inputs(&[q], move |_, v| kl_divergence(&p, v[0].log_softmax()))
        }
        CheckKind::Entropy => {
            let x = uniform(&mut rng, &[rows, k], -2.0, 2.0);
            check_inputs(&[x], |_, v| entropy(v[0].log_softmax()))
        }
        CheckKind::ConvNet => {
            let spec = NetworkSpec {
                layers: vec![
                    LayerSpec::Conv2d { out_channels: 2, kernel: 3, stride: 1 },
                    LayerSpec::Activation(crate::nn::Activation::Tanh),
                    LayerSpec::MaxPool { kernel: 2 },
                    LayerSpec::Dense { out_dim: 4 },
                    LayerSpec::Activation(crate::nn::Activation::Tanh),
                ],
            };
            let mut net = crate::nn::Classifier::new(&spec, &[2, 4, 4], k, ps)?;
            let x = uniform(&mut rng, &[rows, 2, 4, 4], -1.0, 1.0);
            let y = labels(&mut rng, rows, k);
            check_params(
                &mut net,
                |n| n.network_mut().params_mut(),
                |t, n| {
                    let out = n.forward(t, &x, true)?;
                    Ok((cross_entropy(out.heads[0], &y), out.params))
                },
            )
        }
        CheckKind::PpoLoss => {
            let mut net = small_policy(k, ps)?;
            let obs = uniform(&mut rng, &[rows, 3], -1.0, 1.0);
            let actions = labels(&mut rng, rows, k);
            let old: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.5..-0.5)).collect();
            let adv: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ret: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            // A wide clip range keeps the ratio away from the clip boundaries.
            let config = PpoConfig { clip_epsilon: 10.0, ..PpoConfig::default() };
            check_params(
                &mut net,
                |n| n.network_mut().params_mut(),
                |t, n| {
                    let mb = Minibatch { observations: &obs, actions: &actions, old_log_probs: &old, advantages: &adv, returns: &ret };
                    let (loss, params, _) = ppo_loss(t, n, &mb, &config)?;
                    Ok((loss, params))
                },
            )
        }
        CheckKind::DistillLoss => {
            let teacher = small_policy(k, mix_seed(ps, 2))?;
            let mut student = small_policy(k, ps)?;
            let batch = DistillBatch {
                observations: uniform(&mut rng, &[rows, 3], -1.0, 1.0),
                next_observations: Some(uniform(&mut rng, &[rows, 3], -1.0, 1.0)),
                actions: labels(&mut rng, rows, k),
                rewards: (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
                dones: (0..rows).map(|_| rng.random_bool(0.3)).collect(),
            };
            let ppo = PpoConfig { clip_epsilon: 10.0, ..PpoConfig::default() };
            let c = DistillCoefficients::new(rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), 0.5, &ppo);

            // Detached quantities at the unperturbed student.
            let (t_logits, t_values) = teacher.infer(&batch.observations)?;
            let t_logp = crate::autodiff::log_softmax(&t_logits);
            let (s_logits, s_values) = student.infer(&batch.observations)?;
            let s_logp = crate::autodiff::log_softmax(&s_logits);
            let (_, s_next) = student.infer(batch.next_observations.as_ref().expect("next"))?;
            let target: Vec<f64> = (0..rows)
                .map(|i| batch.rewards[i] + if batch.dones[i] { 0.0 } else { c.gamma * s_next[i] })
                .collect();
            let adv0: Vec<f64> = (0..rows).map(|i| target[i] - s_values[i]).collect();
            let ratio0: Vec<f64> = (0..rows)
                .map(|i| (s_logp.values()[i * k + batch.actions[i]] - t_logp.values()[i * k + batch.actions[i]]).exp())
                .collect();
            let t_probs = softmax(&t_logits);

            let reference = |s: &PolicyValueNet| -> Result<f64> {
                let (logits, values) = s.infer(&batch.observations)?;
                let logp = crate::autodiff::log_softmax(&logits);
                let (lp, tl) = (logp.values(), t_logp.values());
                let n = rows as f64;
                let mut l_pi = 0.0;
                for j in 0..rows * k {
                    l_pi += t_probs.values()[j] * (tl[j] - lp[j]) / n;
                }
                let l_v = (0..rows).map(|i| (t_values[i] - values[i]).powi(2)).sum::<f64>() / n;
                let mut surrogate = 0.0;
                let mut ent = 0.0;
                let mut l_td = 0.0;
                for i in 0..rows {
                    let a = batch.actions[i];
                    let ratio = (lp[i * k + a] - tl[i * k + a]).exp();
                    let clipped = ratio.clamp(1.0 - c.clip_epsilon, 1.0 + c.clip_epsilon);
                    surrogate += (ratio * adv0[i]).min(clipped * adv0[i]) / n;
                    ent -= (0..k).map(|j| lp[i * k + j].exp() * lp[i * k + j]).sum::<f64>() / n;
                    l_td += ratio0[i] * (target[i] - values[i]).powi(2) / n;
                }
                Ok(c.alpha_pi * l_pi + c.alpha_v * l_v - surrogate - c.entropy_coeff * ent + c.lambda_td * l_td)
            };
            let tape = Tape::new();
            let direct = distill_loss(&tape, &batch, &teacher, &student, &c, false)?.0.loss.item();
            let base = reference(&student)?;
            if (direct - base).abs() > 1e-9 * base.abs().max(1.0) {
                return Err(crate::Error::numerical(format!("distill loss {direct} differs from reference {base}")));
            }
            check_params_against(
                &mut student,
                |n| n.network_mut().params_mut(),
                |t, s| {
                    let (vars, _) = distill_loss(t, &batch, &teacher, s, &c, false)?;
                    Ok((vars.loss, vars.student))
                },
                reference,
            )
        }
    }
}

fn small_policy(n_actions: usize, seed: u64) -> Result<PolicyValueNet> {
    let spec = NetworkSpec {
        layers: vec![LayerSpec::Dense { out_dim: 5 }, LayerSpec::Activation(crate::nn::Activation::Tanh)],
    };
    let mut net = PolicyValueNet::new(&spec, &[3], n_actions, seed)?;
    // The default policy-head init is tiny; larger weights give non-trivial probabilities.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 9));
    for p in net.network_mut().params_mut() {
        p.tensor.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    Ok(net)
}
