//! SGD with momentum and Adam, both with coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(3e-4)
    }
}

impl OptimizerConfig {
    /// Adam with `epsilon = 1e-5` and no weight decay.
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
            weight_decay: 0.0,
        }
    }

    /// SGD with momentum 0.9, learning rate 3e-4 and weight decay 5e-4.
    pub fn sgd_default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 3e-4,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("momentum, beta1 and beta2 must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-parameter optimizer buffers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// Momentum (SGD) or first moment (Adam).
    pub first: Vec<Vec<f64>>,
    /// Second moment (Adam only).
    pub second: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, state: OptimizerState::default() })
    }

    pub fn with_state(config: OptimizerConfig, state: OptimizerState) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, state })
    }

    /// Applies one update using the gradients stored on `params`.
    ///
    /// Gradients are checked before anything is modified: a non-finite
    /// gradient aborts the step and names the parameter.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        for p in params.iter() {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| Error::usage(format!("parameter {} has no gradient buffer", p.name)))?;
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient in {} at index {i}; step aborted",
                    p.name
                )));
            }
        }
        if self.state.first.is_empty() {
            self.state.first = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.state.second = self.state.first.clone();
            }
        }
        if self.state.first.len() != params.len()
            || self.state.first.iter().zip(params.iter()).any(|(s, p)| s.len() != p.tensor.numel())
        {
            return Err(Error::usage("optimizer state does not match the parameter set"));
        }
        self.state.step += 1;
        let c = &self.config;
        match c.kind {
            OptimizerKind::SgdMomentum => {
                for (p, vel) in params.iter_mut().zip(&mut self.state.first) {
                    let (theta, grad) = p.tensor.values_and_grad_mut();
                    let grad = grad.expect("checked above");
                    for ((t, g), v) in theta.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                        *v = c.momentum * *v + g + c.weight_decay * *t;
                        *t -= c.learning_rate * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.state.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.state.first).zip(&mut self.state.second) {
                    let (theta, grad) = p.tensor.values_and_grad_mut();
                    let grad = grad.expect("checked above");
                    for (((th, g), m), v) in theta.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + c.weight_decay * *th;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *th -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &[Param]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [Param], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= scale);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(value: f64, grad: f64) -> Vec<Param> {
        let mut t = Tensor::from_vec(vec![value]).with_grad();
        t.grad_mut().unwrap()[0] = grad;
        vec![Param { name: "theta".into(), tensor: t }]
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        for config in [OptimizerConfig::adam(1e-3), OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::sgd_default() }] {
            let mut p = param(0.7, 0.0);
            let mut opt = Optimizer::new(config).unwrap();
            opt.step(&mut p).unwrap();
            assert_eq!(p[0].tensor.values()[0], 0.7);
        }
    }

    #[test]
    fn sgd_first_step_with_weight_decay() {
        let mut p = param(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd_default()).unwrap();
        opt.step(&mut p).unwrap();
        let expected = 1.0 - 3e-4 * (1.0 + 5e-4);
        assert!((p[0].tensor.values()[0] - expected).abs() < 1e-15);
        assert!((p[0].tensor.values()[0] - 0.99969985).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        for g in [1.0, 0.5, 250.0] {
            let mut p = param(0.0, g);
            let mut opt = Optimizer::new(OptimizerConfig::adam(3e-4)).unwrap();
            opt.step(&mut p).unwrap();
            assert!((p[0].tensor.values()[0] + 3e-4).abs() < 1e-6, "g={g}");
            assert_eq!(opt.state.step, 1);
        }
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut p = param(1.0, f64::NAN);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3)).unwrap();
        let err = opt.step(&mut p).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(p[0].tensor.values()[0], 1.0);
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Optimizer::new(OptimizerConfig { learning_rate: 0.0, ..Default::default() }).is_err());
        assert!(Optimizer::new(OptimizerConfig { weight_decay: -1.0, ..Default::default() }).is_err());
        assert!(Optimizer::new(OptimizerConfig { epsilon: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut t = Tensor::from_vec(vec![0.0, 0.0]).with_grad();
        t.grad_mut().unwrap().copy_from_slice(&[3.0, 4.0]);
        let mut p = vec![Param { name: "w".into(), tensor: t }];
        assert_eq!(clip_grad_norm(&mut p, 0.5), 5.0);
        assert!((grad_norm(&p) - 0.5).abs() < 1e-12);
    }
}
