//! Batched environments with automatic reset and a seeded level stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvConfig, Episode};
use crate::error::{Error, Result};

/// Half-open range of level seeds `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub len: u64,
}

impl SeedRange {
    pub fn new(start: u64, len: u64) -> Self {
        SeedRange { start, len }
    }

    pub fn end(&self) -> u64 {
        self.start.saturating_add(self.len)
    }

    pub fn contains(&self, seed: u64) -> bool {
        seed >= self.start && seed < self.end()
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        self.start + rng.random_range(0..self.len)
    }

    /// The first `n` seeds of the range (wrapping), used for fixed evaluation lists.
    pub fn first(&self, n: usize) -> Vec<u64> {
        (0..n as u64).map(|i| self.start + i % self.len).collect()
    }
}

/// An environment family plus disjoint train and test seed ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelSet {
    pub env: EnvConfig,
    pub train: SeedRange,
    pub test: SeedRange,
}

impl Default for LevelSet {
    fn default() -> Self {
        LevelSet::new(EnvConfig::multiroom())
    }
}

impl LevelSet {
    /// Training seeds `[0, 2^32)`, test seeds `[2^40, 2^40 + 2^20)`.
    pub fn new(env: EnvConfig) -> Self {
        LevelSet { env, train: SeedRange::new(0, 1 << 32), test: SeedRange::new(1 << 40, 1 << 20) }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.train.len == 0 || self.test.len == 0 {
            return Err(Error::config("train and test seed ranges must be non-empty"));
        }
        if self.train.overlaps(&self.test) {
            return Err(Error::config(format!(
                "train seeds {:?} and test seeds {:?} overlap",
                self.train, self.test
            )));
        }
        Ok(())
    }

    pub fn episode(&self, seed: u64) -> Result<Episode> {
        let level = self.env.generate(seed)?;
        Ok(Episode::new(&level, self.env.max_steps()))
    }
}

/// Result of stepping every sub-environment once, ordered by index.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Observations after the step; for finished sub-environments this is the
    /// first observation of the freshly reset episode.
    pub observations: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Undiscounted returns of episodes that finished on this step.
    pub finished: Vec<(usize, f64, bool)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEnv {
    config: EnvConfig,
    seeds: SeedRange,
    rng: ChaCha8Rng,
    episodes: Vec<Episode>,
    returns: Vec<f64>,
    obs_len: usize,
}

impl VecEnv {
    /// `n` environments drawing levels uniformly from `seeds` via a stream seeded by `stream_seed`.
    pub fn new(config: &EnvConfig, seeds: SeedRange, n: usize, stream_seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("vector env needs at least one environment"));
        }
        if seeds.len == 0 {
            return Err(Error::config("vector env seed range is empty"));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let mut episodes = Vec::with_capacity(n);
        for _ in 0..n {
            let level = config.generate(seeds.sample(&mut rng))?;
            episodes.push(Episode::new(&level, config.max_steps()));
        }
        let [c, h, w] = config.observation_shape();
        Ok(VecEnv { config: config.clone(), seeds, rng, episodes, returns: vec![0.0; n], obs_len: c * h * w })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions()
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        self.config.observation_shape()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    /// Current observations `[n, C, H, W]`, flattened.
    pub fn observations(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_len * self.len()];
        for (ep, chunk) in self.episodes.iter().zip(out.chunks_mut(self.obs_len)) {
            ep.encode_into(chunk);
        }
        out
    }

    /// Steps every sub-environment with its action and auto-resets finished episodes.
    pub fn step_all(&mut self, actions: &[usize]) -> Result<StepOutput> {
        if actions.len() != self.len() {
            return Err(Error::usage(format!(
                "expected {} actions, got {}",
                self.len(),
                actions.len()
            )));
        }
        let n = self.len();
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        let mut finished = Vec::new();
        for (i, &a) in actions.iter().enumerate() {
            let tr = self.episodes[i].step(a)?;
            self.returns[i] += tr.reward;
            rewards.push(tr.reward);
            dones.push(tr.done);
            if tr.done {
                finished.push((i, self.returns[i], tr.success));
                self.returns[i] = 0.0;
                let level = self.config.generate(self.seeds.sample(&mut self.rng))?;
                self.episodes[i] = Episode::new(&level, self.config.max_steps());
            }
        }
        Ok(StepOutput { observations: self.observations(), rewards, dones, finished })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_count_mismatch_is_usage_error() {
        let mut env = VecEnv::new(&EnvConfig::multiroom(), SeedRange::new(0, 100), 3, 0).unwrap();
        assert!(matches!(env.step_all(&[0, 1]), Err(Error::Usage(_))));
    }

    #[test]
    fn default_level_set_is_disjoint() {
        let set = LevelSet::default();
        set.validate().unwrap();
        let bad = LevelSet { test: SeedRange::new(10, 5), ..LevelSet::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identical_streams_give_identical_transitions() {
        let run = || {
            let mut env = VecEnv::new(&EnvConfig::boxoban(), SeedRange::new(0, 1000), 4, 7).unwrap();
            let mut log = Vec::new();
            for t in 0..300 {
                let acts: Vec<usize> = (0..4).map(|i| (t * 7 + i * 3) % 13).collect();
                let out = env.step_all(&acts).unwrap();
                log.push((out.rewards, out.dones, out.observations));
            }
            log
        };
        assert_eq!(run(), run());
    }
}
