//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use itergrid::iter::{DistillSchedule, RlConfig};
use itergrid::lab::{
    DatasetSource, Modification, ModificationSchedule, ProbeConfig, ScheduleMode, SweepConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    RlPpo,
    RlIter,
    SlRun,
    SlTwoPhase,
    SlSweep,
    Probe,
    Spectrum,
    DistillSl,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RlPpo => "rl_ppo",
            ExperimentKind::RlIter => "rl_iter",
            ExperimentKind::SlRun => "sl_run",
            ExperimentKind::SlTwoPhase => "sl_two_phase",
            ExperimentKind::SlSweep => "sl_sweep",
            ExperimentKind::Probe => "probe",
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::DistillSl => "distill_sl",
        }
    }

    pub fn is_rl(self) -> bool {
        matches!(self, ExperimentKind::RlPpo | ExperimentKind::RlIter)
    }
}

/// A modification and its schedule; the modification seed is the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub modification: Modification,
    pub mode: ScheduleMode,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { modification: Modification::WrongLabels, mode: ScheduleMode::Stationary }
    }
}

impl ScheduleSpec {
    pub fn with_seed(self, seed: u64) -> ModificationSchedule {
        ModificationSchedule { modification: self.modification, mode: self.mode, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoPhaseConfig {
    pub modification: Modification,
    pub f: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
}

impl Default for TwoPhaseConfig {
    fn default() -> Self {
        TwoPhaseConfig { modification: Modification::WrongLabels, f: 0.5, epochs_phase1: 70, epochs_phase2: 80 }
    }
}

/// Supervised experiment settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlConfig {
    pub dataset: DatasetSource,
    /// Seed of the synthetic dataset, shared by every run seed.
    pub data_seed: u64,
    pub train: TrainConfig,
    /// Schedule of `sl_run`, of the encoder trained for `probe`/`spectrum`, and of the `distill_sl` teacher.
    pub schedule: ScheduleSpec,
    pub two_phase: TwoPhaseConfig,
    pub sweep: SweepConfig,
    pub probe: ProbeConfig,
    /// Number of leading singular values excluded from the tail mass.
    pub spectrum_k: usize,
    /// Student epochs for `distill_sl`; defaults to `train.epochs`.
    pub distill_epochs: Option<usize>,
    /// Classifier checkpoint used as the encoder by `probe` and `spectrum` instead of training one.
    pub encoder_checkpoint: Option<PathBuf>,
}

impl Default for SlConfig {
    fn default() -> Self {
        SlConfig {
            dataset: DatasetSource::default(),
            data_seed: 0,
            train: TrainConfig::default(),
            schedule: ScheduleSpec::default(),
            two_phase: TwoPhaseConfig::default(),
            sweep: SweepConfig::default(),
            probe: ProbeConfig::default(),
            spectrum_k: 10,
            distill_epochs: None,
            encoder_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    /// Run directory; the command line and `ITERGRID_OUT` take over when absent.
    pub out: Option<PathBuf>,
    /// Updates between RL checkpoints.
    pub checkpoint_interval: u64,
    pub rl: RlConfig,
    pub sl: SlConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::default(),
            seeds: vec![0],
            out: None,
            checkpoint_interval: 1,
            rl: RlConfig::default(),
            sl: SlConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Fills kind-dependent defaults and checks every invariant.
    pub fn resolve(mut self) -> Result<Self> {
        if self.kind == ExperimentKind::RlIter && self.rl.iter.is_none() {
            self.rl.iter = Some(DistillSchedule::default());
        }
        if self.kind == ExperimentKind::DistillSl && self.sl.distill_epochs.is_none() {
            self.sl.distill_epochs = Some(self.sl.train.epochs);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        if self.checkpoint_interval == 0 {
            return Err(CliError::Config("checkpoint_interval must be positive".into()));
        }
        match self.kind {
            ExperimentKind::RlPpo if self.rl.iter.is_some() => {
                return Err(CliError::Config("rl.iter must be null for rl_ppo; use kind rl_iter".into()))
            }
            k if k.is_rl() => self.rl.validate()?,
            _ => {
                let sl = &self.sl;
                sl.dataset.validate()?;
                sl.train.validate()?;
                sl.schedule.with_seed(0).validate()?;
                sl.sweep.validate()?;
                let tp = &sl.two_phase;
                if !(tp.f > 0.0 && tp.f <= 1.0) {
                    return Err(CliError::Config(format!("sl.two_phase.f must lie in (0, 1], got {}", tp.f)));
                }
                if sl.probe.batch_size == 0 || sl.sweep.probe.batch_size == 0 {
                    return Err(CliError::Config("probe batch_size must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// The subcommand that runs this kind.
    pub fn command(&self) -> &'static str {
        match self.kind {
            ExperimentKind::SlSweep => "sweep",
            ExperimentKind::Probe => "probe",
            ExperimentKind::Spectrum => "spectrum",
            _ => "train",
        }
    }
}

/// Parses JSON text, rejecting unknown keys with their full path.
pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("at `{path}`: {inner}"))
        }
    })?;
    config.resolve()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_str(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn emit(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("configs always serialise")
}
