//! Executes experiments seed by seed and persists their artifacts.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json            resolved configuration
//! summary.json           cross-seed mean and standard error of every final scalar
//! seed_<n>/metrics.csv   one row per update or recorded epoch
//! seed_<n>/events.csv    teacher replacements (rl kinds)
//! seed_<n>/ckpt/         latest checkpoint (rl kinds)
//! seed_<n>/result.json   final scalars; present once the seed has finished
//! ```

use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use itergrid::checkpoint;
use itergrid::env::mix_seed;
use itergrid::iter::{HistoryRow, ReplacementEvent, RlTrainer, TrainerState};
use itergrid::lab::{
    argmax_distill, representation_spectrum, sweep_point, train_classifier_with, train_linear_probe,
    two_phase_train, EpochRecord, LabeledDataset, SweepRow,
};
use itergrid::nn::Param;
use itergrid::Classifier;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{emit, parse_config, ExperimentConfig, ExperimentKind};
use crate::error::{CliError, Result};
use crate::stats::{SeedResult, Summary};

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const RESULT_FILE: &str = "result.json";
const CKPT_DIR: &str = "ckpt";
const CKPT_NEW_DIR: &str = "ckpt.new";
const STATE_FILE: &str = "state.json";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Delete an existing run directory first.
    pub force: bool,
    /// Continue an existing run directory from its checkpoints.
    pub resume: bool,
    /// Stop each rl seed after this many updates in this process, as if killed.
    pub halt_after: Option<u64>,
    /// Print progress to stderr.
    pub verbose: bool,
}

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed_{seed}"))
}

/// Runs every seed of `config` inside `run_dir` and writes the summary.
pub fn run(config: &ExperimentConfig, run_dir: &Path, opts: &RunOptions) -> Result<Summary> {
    config.validate()?;
    prepare_run_dir(config, run_dir, opts)?;
    let mut results = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = seed_dir(run_dir, seed);
        let result_path = dir.join(RESULT_FILE);
        if opts.resume && result_path.exists() {
            results.push(read_json(&result_path)?);
            continue;
        }
        if !opts.resume && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        if opts.verbose {
            eprintln!("{}: seed {seed} -> {}", config.kind.name(), dir.display());
        }
        let result = match config.kind {
            ExperimentKind::RlPpo | ExperimentKind::RlIter => run_rl(config, seed, &dir, opts)?,
            ExperimentKind::SlRun => run_sl(config, seed, &dir)?,
            ExperimentKind::SlTwoPhase => run_two_phase(config, seed, &dir)?,
            ExperimentKind::SlSweep => run_sweep(config, seed, &dir, opts)?,
            ExperimentKind::Probe => run_probe(config, seed, &dir)?,
            ExperimentKind::Spectrum => run_spectrum(config, seed, &dir)?,
            ExperimentKind::DistillSl => run_distill(config, seed, &dir)?,
        };
        write_json(&result_path, &result)?;
        results.push(result);
    }
    let summary = Summary::from_results(config.kind.name(), &config.seeds, &results);
    write_json(&run_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn prepare_run_dir(config: &ExperimentConfig, run_dir: &Path, opts: &RunOptions) -> Result<()> {
    let config_path = run_dir.join(CONFIG_FILE);
    if config_path.exists() {
        if opts.force {
            fs::remove_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
        } else if opts.resume {
            let previous = parse_config(&config_path)?;
            if previous != *config {
                return Err(CliError::Usage(format!(
                    "{} was created with a different configuration; resume needs the identical resolved config",
                    run_dir.display()
                )));
            }
            return Ok(());
        } else {
            return Err(CliError::Usage(format!(
                "{} already contains a run; pass --force to overwrite it or --resume to continue it",
                run_dir.display()
            )));
        }
    }
    fs::create_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
    write_atomic(&config_path, emit(config).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    write_atomic(path, text.as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Finite numeric fields of a serialisable record.
fn scalars<T: Serialize>(record: &T, prefix: &str, out: &mut SeedResult) {
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(record) {
        for (k, v) in map {
            if let Some(x) = v.as_f64().filter(|x| x.is_finite()) {
                out.insert(format!("{prefix}{k}"), x);
            }
        }
    }
}

/// A CSV file that is appended to and flushed record by record.
struct CsvLog {
    writer: csv::Writer<File>,
    path: PathBuf,
}

impl CsvLog {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        Ok(CsvLog { writer: csv::Writer::from_writer(file), path: path.to_path_buf() })
    }

    /// Appends to an existing file without repeating its header.
    fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let has_rows = fs::metadata(path).map_err(|e| CliError::io(path, e))?.len() > 0;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!has_rows).from_writer(file);
        Ok(CsvLog { writer, path: path.to_path_buf() })
    }

    fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        self.writer.serialize(record).map_err(|e| CliError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    reader.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| CliError::io(path, e))
}

/// Keeps the header and the rows whose `update` column is at most `updates`.
fn truncate_to_update(path: &Path, updates: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let headers = reader.headers().map_err(|e| CliError::io(path, e))?.clone();
    if headers.is_empty() {
        return Ok(());
    }
    let col = headers
        .iter()
        .position(|h| h == "update")
        .ok_or_else(|| CliError::Io(format!("{} has no update column", path.display())))?;
    let mut kept = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::io(path, e))?;
        let u: u64 = record[col].parse().map_err(|e| CliError::io(path, e))?;
        if u <= updates {
            kept.push(record);
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        w.write_record(&headers).map_err(|e| CliError::io(&tmp, e))?;
        for r in &kept {
            w.write_record(r).map_err(|e| CliError::io(&tmp, e))?;
        }
        w.flush().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn params_of(tensors: Vec<(String, itergrid::Tensor)>) -> Vec<Param> {
    tensors.into_iter().map(|(name, tensor)| Param { name, tensor }).collect()
}

/// Writes the checkpoint into a fresh directory and swaps it in, so a valid one always exists.
fn save_rl_checkpoint(trainer: &RlTrainer, dir: &Path) -> Result<()> {
    let new = dir.join(CKPT_NEW_DIR);
    if new.exists() {
        fs::remove_dir_all(&new).map_err(|e| CliError::io(&new, e))?;
    }
    fs::create_dir_all(&new).map_err(|e| CliError::io(&new, e))?;
    let meta = serde_json::json!({ "updates": trainer.updates() });
    checkpoint::save(&new.join("teacher.itr"), trainer.pair().teacher.network().params(), meta.clone())?;
    checkpoint::save(&new.join("student.itr"), trainer.pair().student.network().params(), meta.clone())?;
    if let Some(store) = trainer.store() {
        checkpoint::save(&new.join("store.itr"), &params_of(store.to_tensors()), meta)?;
    }
    write_json(&new.join(STATE_FILE), &trainer.state())?;
    let current = dir.join(CKPT_DIR);
    if current.exists() {
        fs::remove_dir_all(&current).map_err(|e| CliError::io(&current, e))?;
    }
    fs::rename(&new, &current).map_err(|e| CliError::io(&current, e))
}

/// The newest complete checkpoint directory, if any.
fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let current = dir.join(CKPT_DIR);
    if current.join(STATE_FILE).exists() {
        return Some(current);
    }
    // A crash between removing the old checkpoint and renaming the new one leaves only the new one.
    let new = dir.join(CKPT_NEW_DIR);
    new.join(STATE_FILE).exists().then_some(new)
}

fn restore_rl(config: &ExperimentConfig, seed: u64, ckpt: &Path) -> Result<RlTrainer> {
    let state: TrainerState = read_json(&ckpt.join(STATE_FILE))?;
    let (teacher, _) = checkpoint::load(&ckpt.join("teacher.itr"))?;
    let (student, _) = checkpoint::load(&ckpt.join("student.itr"))?;
    let store_path = ckpt.join("store.itr");
    let store: Option<Vec<(String, itergrid::Tensor)>> = if store_path.exists() {
        Some(checkpoint::load(&store_path)?.0.into_iter().map(|p| (p.name, p.tensor)).collect())
    } else {
        None
    };
    Ok(RlTrainer::restore(&config.rl, seed, state, &teacher, &student, store.as_deref())?)
}

fn run_rl(config: &ExperimentConfig, seed: u64, dir: &Path, opts: &RunOptions) -> Result<SeedResult> {
    let checkpoint = if opts.resume { latest_checkpoint(dir) } else { None };
    let (mut trainer, mut metrics, mut events) = match checkpoint {
        Some(ckpt) => {
            let trainer = restore_rl(config, seed, &ckpt)?;
            truncate_to_update(&dir.join(METRICS_FILE), trainer.updates())?;
            truncate_to_update(&dir.join(EVENTS_FILE), trainer.updates())?;
            if opts.verbose {
                eprintln!("  resuming at update {}", trainer.updates());
            }
            (trainer, CsvLog::append(&dir.join(METRICS_FILE))?, CsvLog::append(&dir.join(EVENTS_FILE))?)
        }
        None => (
            RlTrainer::new(&config.rl, seed)?,
            CsvLog::create(&dir.join(METRICS_FILE))?,
            CsvLog::create(&dir.join(EVENTS_FILE))?,
        ),
    };
    let total_updates = config.rl.total_frames.div_ceil(config.rl.ppo.batch_size() as u64);
    let mut steps = 0;
    while !trainer.is_done() {
        let report = trainer.step()?;
        for row in &report.rows {
            metrics.write(row)?;
        }
        for event in &report.events {
            events.write(event)?;
        }
        metrics.flush()?;
        events.flush()?;
        if trainer.updates() % config.checkpoint_interval == 0 || trainer.is_done() {
            save_rl_checkpoint(&trainer, dir)?;
        }
        if opts.verbose {
            if let Some(r) = report.rows.last() {
                eprintln!(
                    "  update {}/{total_updates} k={} test return {:.3} success {:.3}",
                    r.update, r.iteration_k, r.mean_return_test, r.success_rate_test
                );
            }
        }
        steps += 1;
        if opts.halt_after == Some(steps) && !trainer.is_done() {
            return Err(CliError::Interrupted(trainer.updates()));
        }
    }
    let rows: Vec<HistoryRow> = read_csv(&dir.join(METRICS_FILE))?;
    let events: Vec<ReplacementEvent> = read_csv(&dir.join(EVENTS_FILE))?;
    let mut result = SeedResult::new();
    if let Some(last) = rows.last() {
        scalars(last, "", &mut result);
    }
    result.insert("replacements".into(), events.len() as f64);
    Ok(result)
}

fn load_data(config: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok(config.sl.dataset.load(config.sl.data_seed)?)
}

fn new_classifier(config: &ExperimentConfig, data: &LabeledDataset, seed: u64) -> Result<Classifier> {
    Ok(Classifier::new(&config.sl.train.network, &data.shape, data.n_classes, mix_seed(seed, 0xc1))?)
}

fn to_core(e: CliError) -> itergrid::Error {
    itergrid::Error::Io(io::Error::other(e.to_string()))
}

/// Trains a classifier under the configured schedule, logging every record to `metrics`.
fn train_logged(
    config: &ExperimentConfig,
    seed: u64,
    train: &LabeledDataset,
    test: &LabeledDataset,
    metrics: &Path,
) -> Result<(Classifier, Vec<EpochRecord>)> {
    let sl = &config.sl;
    let mut net = new_classifier(config, train, seed)?;
    let mut log = CsvLog::create(metrics)?;
    let history = train_classifier_with(
        &mut net,
        train,
        test,
        &sl.schedule.with_seed(seed),
        &sl.train,
        sl.train.epochs,
        seed,
        &mut |r| log.write(r).and_then(|_| log.flush()).map_err(to_core),
    )?;
    Ok((net, history))
}

fn run_sl(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    let (train, test) = load_data(config)?;
    let (net, history) = train_logged(config, seed, &train, &test, &dir.join(METRICS_FILE))?;
    checkpoint::save(&dir.join("model.itr"), net.network().params(), serde_json::json!({ "seed": seed }))?;
    let mut result = SeedResult::new();
    if let Some(last) = history.last() {
        scalars(last, "", &mut result);
    }
    Ok(result)
}

#[derive(Serialize, Deserialize)]
struct PhaseRow {
    phase: u8,
    epoch: usize,
    f: f64,
    loss: f64,
    train_accuracy_modified: f64,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn run_two_phase(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    let (train, test) = load_data(config)?;
    let tp = &config.sl.two_phase;
    let net = new_classifier(config, &train, seed)?;
    let run = two_phase_train(
        net,
        &train,
        &test,
        tp.modification,
        tp.f,
        &config.sl.train,
        tp.epochs_phase1,
        tp.epochs_phase2,
        seed,
    )?;
    let mut log = CsvLog::create(&dir.join(METRICS_FILE))?;
    for (phase, records, offset) in [(1, &run.phase1, 0), (2, &run.phase2, tp.epochs_phase1)] {
        for r in records {
            log.write(&PhaseRow {
                phase,
                epoch: r.epoch + offset,
                f: r.f,
                loss: r.loss,
                train_accuracy_modified: r.train_accuracy_modified,
                train_accuracy: r.train_accuracy,
                test_accuracy: r.test_accuracy,
            })?;
        }
    }
    log.flush()?;
    let meta = serde_json::json!({ "seed": seed, "f": tp.f });
    checkpoint::save(&dir.join("intermediate.itr"), run.inter.network().params(), meta.clone())?;
    checkpoint::save(&dir.join("final.itr"), run.fin.network().params(), meta)?;
    let mut result = SeedResult::new();
    if let Some(r) = run.phase1.last() {
        result.insert("intermediate_test_accuracy".into(), r.test_accuracy);
    }
    if let Some(r) = run.phase2.last() {
        scalars(r, "final_", &mut result);
    }
    Ok(result)
}

fn run_sweep(config: &ExperimentConfig, seed: u64, dir: &Path, opts: &RunOptions) -> Result<SeedResult> {
    let (train, test) = load_data(config)?;
    let sweep = &config.sl.sweep;
    let path = dir.join(METRICS_FILE);
    let mut done: Vec<SweepRow> = if opts.resume && path.exists() { read_csv(&path)? } else { Vec::new() };
    done.retain(|r| sweep.fs.contains(&r.f));
    let mut log = if done.is_empty() { CsvLog::create(&path)? } else { CsvLog::append(&path)? };
    for &f in &sweep.fs {
        if done.iter().any(|r| r.f == f) {
            continue;
        }
        let row = sweep_point(&train, &test, sweep, &config.sl.train, f, seed)?;
        if opts.verbose {
            eprintln!(
                "  f={f}: probe relevance {:.3} final probe {:.3} tail mass {:.3}",
                row.probe_relevance, row.final_test_accuracy, row.tail_mass
            );
        }
        log.write(&row)?;
        log.flush()?;
        done.push(row);
    }
    let mut result = SeedResult::new();
    for r in &done {
        result.insert(format!("final_test_accuracy@f={}", r.f), r.final_test_accuracy);
        result.insert(format!("probe_relevance@f={}", r.f), r.probe_relevance);
        result.insert(format!("classifier_test_accuracy@f={}", r.f), r.classifier_test_accuracy);
        result.insert(format!("tail_mass@f={}", r.f), r.tail_mass);
    }
    Ok(result)
}

/// The configured checkpoint, or a classifier trained as in `sl_run`.
fn encoder(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<Classifier> {
    match &config.sl.encoder_checkpoint {
        Some(path) => {
            let mut net = new_classifier(config, train, seed)?;
            checkpoint::load_into(net.network_mut(), path)?;
            Ok(net)
        }
        None => {
            let (net, _) = train_logged(config, seed, train, test, &dir.join(METRICS_FILE))?;
            checkpoint::save(&dir.join("model.itr"), net.network().params(), serde_json::json!({ "seed": seed }))?;
            Ok(net)
        }
    }
}

fn run_probe(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    let (train, test) = load_data(config)?;
    let net = encoder(config, seed, dir, &train, &test)?;
    let probe = train_linear_probe(net.network(), &train, &test, &config.sl.probe, seed)?;
    write_json(&dir.join("probe.json"), &probe)?;
    let mut result = SeedResult::new();
    result.insert("probe_train_accuracy".into(), probe.train_accuracy);
    result.insert("probe_test_accuracy".into(), probe.test_accuracy);
    result.insert("probe_epochs".into(), probe.epochs as f64);
    result.insert("classifier_test_accuracy".into(), itergrid::lab::accuracy(&net, &test)?);
    Ok(result)
}

#[derive(Serialize)]
struct SpectrumRow {
    index: usize,
    singular_value: f64,
    normalised: f64,
}

fn run_spectrum(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    let (train, test) = load_data(config)?;
    let net = encoder(config, seed, dir, &train, &test)?;
    let report = representation_spectrum(net.network(), &test, config.sl.spectrum_k)?;
    let mut log = CsvLog::create(&dir.join("spectrum.csv"))?;
    for (i, (s, n)) in report.singular_values.iter().zip(&report.normalised).enumerate() {
        log.write(&SpectrumRow { index: i + 1, singular_value: *s, normalised: *n })?;
    }
    log.flush()?;
    let mut result = SeedResult::new();
    result.insert("tail_mass".into(), report.tail_mass);
    result.insert("sigma_1".into(), report.singular_values.first().copied().unwrap_or(0.0));
    result.insert("zero_matrix".into(), if report.zero_matrix { 1.0 } else { 0.0 });
    Ok(result)
}

fn run_distill(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    let (train, test) = load_data(config)?;
    let (teacher, teacher_history) = train_logged(config, seed, &train, &test, &dir.join("teacher_metrics.csv"))?;
    let mut student = Classifier::new(&config.sl.train.network, &train.shape, train.n_classes, mix_seed(seed, 0xd5))?;
    let epochs = config.sl.distill_epochs.unwrap_or(config.sl.train.epochs);
    let history = argmax_distill(&teacher, &mut student, &train, &test, &config.sl.train, epochs, seed)?;
    let mut log = CsvLog::create(&dir.join(METRICS_FILE))?;
    for r in &history {
        log.write(r)?;
    }
    log.flush()?;
    let meta = serde_json::json!({ "seed": seed });
    checkpoint::save(&dir.join("teacher.itr"), teacher.network().params(), meta.clone())?;
    checkpoint::save(&dir.join("student.itr"), student.network().params(), meta)?;
    let teacher_acc = teacher_history.last().map_or(0.0, |r| r.test_accuracy);
    let student_acc = history.last().map_or(0.0, |r| r.test_accuracy);
    let mut result = SeedResult::new();
    result.insert("teacher_test_accuracy".into(), teacher_acc);
    result.insert("student_test_accuracy".into(), student_acc);
    result.insert("student_minus_teacher".into(), student_acc - teacher_acc);
    Ok(result)
}
