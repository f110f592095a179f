//! Supervised experiments on transient non-stationarity.
//!
//! A classifier is trained on a training set whose labels or size change over
//! time, and the lasting effect on generalisation is measured on an unmodified
//! test set. Frozen encoders are then examined with linear probes and the
//! singular value spectrum of their test-set representations.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy, Tape};
use crate::env::mix_seed;
use crate::error::{Error, Result};
use crate::nn::{Classifier, Network, NetworkSpec};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images `[N, C, H, W]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub shape: [usize; 3],
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(shape: [usize; 3], inputs: Vec<f64>, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        let d: usize = shape.iter().product();
        if inputs.len() != labels.len() * d {
            return Err(Error::Format(format!(
                "{} input values for {} examples of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Format(format!("label {bad} outside {n_classes} classes")));
        }
        Ok(LabeledDataset { shape, inputs, labels, n_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.input_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// Inputs of the rows `idx` as a `[len, C, H, W]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let d = self.input_len();
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            values.extend_from_slice(self.input(i));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![idx.len(), c, h, w], values).expect("batch shape")
    }

    /// Hash of the inputs and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.shape.hash(&mut h);
        self.labels.hash(&mut h);
        for v in &self.inputs {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    /// Fraction of examples in the most frequent class.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }

    fn with_labels(&self, labels: Vec<usize>) -> Self {
        LabeledDataset { labels, ..self.clone() }
    }
}

/// Procedural 10-class image task: coloured shapes on a noisy background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub size: usize,
    /// Amplitude of the uniform pixel noise.
    pub noise: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig { n_train: 2000, n_test: 1000, size: 16, noise: 0.15 }
    }
}

pub const SHAPE_CLASSES: usize = 10;

/// Whether pixel `(dx, dy)` relative to the centre belongs to a shape of class `class` and radius `r`.
fn in_shape(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let (ax, ay) = (dx.abs(), dy.abs());
    let t = (r * 0.35).max(1.0);
    match class {
        0 => ax <= r && ay <= r,
        1 => ax <= r && ay <= r && (ax > r - t || ay > r - t),
        2 => d <= r,
        3 => d <= r && d > r - t,
        4 => dy <= r && dy >= -r && ax <= (dy + r) * 0.5,
        5 => (ax <= t * 0.6 && ay <= r) || (ay <= t * 0.6 && ax <= r),
        6 => ax <= r && ay <= r && (ax - ay).abs() <= t * 0.8,
        7 => ax <= r && ay <= t * 0.7,
        8 => ay <= r && ax <= t * 0.7,
        9 => ax + ay <= r,
        _ => unreachable!("shape class {class}"),
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::config(format!("shapes size must be at least 8, got {}", self.size)));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("shapes n_train and n_test must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("shapes noise must lie in [0, 1], got {}", self.noise)));
        }
        Ok(())
    }

    /// Train and test splits; identical for identical seeds.
    pub fn generate(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        self.validate()?;
        let train = self.split(mix_seed(seed, 0x71), self.n_train, Split::Train)?;
        let test = self.split(mix_seed(seed, 0x7e57), self.n_test, Split::Test)?;
        Ok((train, test))
    }

    fn split(&self, seed: u64, n: usize, split: Split) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.size;
        let mut inputs = Vec::with_capacity(n * 3 * s * s);
        let mut labels: Vec<usize> = (0..n).map(|i| i % SHAPE_CLASSES).collect();
        labels.shuffle(&mut rng);
        for &class in &labels {
            let r = rng.random_range(0.2..0.38) * s as f64;
            let cx = rng.random_range(r..s as f64 - r);
            let cy = rng.random_range(r..s as f64 - r);
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..1.0));
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
            let mut img = vec![0.0; 3 * s * s];
            for y in 0..s {
                for x in 0..s {
                    let inside = in_shape(class, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                    for c in 0..3 {
                        let base = if inside { fg[c] } else { bg[c] };
                        let v = base + rng.random_range(-self.noise..=self.noise);
                        img[c * s * s + y * s + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
            inputs.extend(img);
        }
        LabeledDataset::new([3, s, s], inputs, labels, SHAPE_CLASSES, split)
    }
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes.
pub fn read_cifar10_batch(bytes: &[u8], split: Split) -> Result<LabeledDataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 batch of {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut inputs = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new([3, 32, 32], inputs, labels, 10, split)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let mut buf = Vec::new();
        std::fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Ok(buf)
    };
    let mut train_bytes = Vec::new();
    for i in 1..=5 {
        train_bytes.extend(read(&format!("data_batch_{i}.bin"))?);
    }
    let train = read_cifar10_batch(&train_bytes, Split::Train)?;
    let test = read_cifar10_batch(&read("test_batch.bin")?, Split::Test)?;
    Ok((train, test))
}

/// Where the training data is read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Shapes(ShapesConfig),
    Cifar10 { dir: String },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Shapes(ShapesConfig::default())
    }
}

impl DatasetSource {
    pub fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSource::Shapes(c) => c.generate(seed),
            DatasetSource::Cifar10 { dir } => load_cifar10(Path::new(dir)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSource::Shapes(c) => c.validate(),
            DatasetSource::Cifar10 { dir } if dir.is_empty() => Err(Error::config("cifar10 dir must be set")),
            DatasetSource::Cifar10 { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modification {
    DatasetSize,
    WrongLabels,
    NoisyLabels,
}

impl Modification {
    pub const ALL: [Modification; 3] = [Modification::DatasetSize, Modification::WrongLabels, Modification::NoisyLabels];

    pub fn name(self) -> &'static str {
        match self {
            Modification::DatasetSize => "dataset_size",
            Modification::WrongLabels => "wrong_labels",
            Modification::NoisyLabels => "noisy_labels",
        }
    }
}

/// Number of examples left intact at fraction `f`: `ceil(f * n)`.
fn kept(f: f64, n: usize) -> usize {
    ((f * n as f64).ceil() as usize).min(n)
}

/// A uniformly drawn label different from `truth`.
fn wrong_label(truth: usize, n_classes: usize, rng: &mut impl Rng) -> usize {
    (truth + 1 + rng.random_range(0..n_classes - 1)) % n_classes
}

/// The modified training set for one epoch.
///
/// `dataset_size` keeps the first `max(1, ceil(f N))` examples repeated
/// cyclically to length `N`. The label modifications corrupt the first
/// `N - ceil(f N)` examples of a seed-determined permutation, so the corrupted
/// subset shrinks along a fixed order as `f` grows; `wrong_labels` draws each
/// wrong label once per `(seed, example)`, `noisy_labels` redraws it every epoch.
pub fn apply_modification(
    dataset: &LabeledDataset,
    m: Modification,
    f: f64,
    epoch: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::usage(format!("modification fraction must lie in [0, 1], got {f}")));
    }
    if dataset.split == Split::Test {
        return Err(Error::usage("test data is never modified"));
    }
    let n = dataset.len();
    if f == 1.0 || n == 0 {
        return Ok(dataset.clone());
    }
    match m {
        Modification::DatasetSize => {
            let k = kept(f, n).max(1);
            let d = dataset.input_len();
            let mut inputs = Vec::with_capacity(dataset.inputs.len());
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                inputs.extend_from_slice(dataset.input(i % k));
                labels.push(dataset.labels[i % k]);
            }
            debug_assert_eq!(inputs.len(), n * d);
            Ok(LabeledDataset { inputs, labels, ..dataset.clone() })
        }
        Modification::WrongLabels | Modification::NoisyLabels => {
            if dataset.n_classes < 2 {
                return Err(Error::usage("label modifications need at least two classes"));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0de)));
            let mut labels = dataset.labels.clone();
            for &i in &order[..n - kept(f, n)] {
                let stream = match m {
                    Modification::WrongLabels => mix_seed(mix_seed(seed, 0x3a), i as u64),
                    _ => mix_seed(mix_seed(mix_seed(seed, 0x4e), epoch as u64), i as u64),
                };
                labels[i] = wrong_label(dataset.labels[i], dataset.n_classes, &mut ChaCha8Rng::seed_from_u64(stream));
            }
            Ok(dataset.with_labels(labels))
        }
    }
}

/// `min(1, epoch / epochs_nonstat)`; a zero-length non-stationary phase gives 1.
pub fn annealed_schedule(epoch: usize, epochs_nonstat: usize) -> f64 {
    if epochs_nonstat == 0 {
        1.0
    } else {
        (epoch as f64 / epochs_nonstat as f64).min(1.0)
    }
}

/// How the fraction of unmodified data evolves over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleMode {
    Stationary,
    Annealed { epochs_nonstat: usize },
    Fixed { f: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModificationSchedule {
    pub modification: Modification,
    pub mode: ScheduleMode,
    pub seed: u64,
}

impl ModificationSchedule {
    pub fn stationary() -> Self {
        ModificationSchedule { modification: Modification::WrongLabels, mode: ScheduleMode::Stationary, seed: 0 }
    }

    pub fn f_at(&self, epoch: usize) -> f64 {
        match self.mode {
            ScheduleMode::Stationary => 1.0,
            ScheduleMode::Annealed { epochs_nonstat } => annealed_schedule(epoch, epochs_nonstat),
            ScheduleMode::Fixed { f } => f,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let ScheduleMode::Fixed { f } = self.mode {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("fixed f must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }

    pub fn epoch_dataset(&self, train: &LabeledDataset, epoch: usize) -> Result<LabeledDataset> {
        apply_modification(train, self.modification, self.f_at(epoch), epoch, self.seed)
    }
}

/// Minibatch training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Record accuracies every this many epochs; the last epoch is always recorded.
    pub eval_interval: usize,
    /// Global gradient-norm clip per step.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkSpec::small_cnn(),
            optimizer: OptimizerConfig::sgd_default(),
            batch_size: 128,
            epochs: 250,
            eval_interval: 1,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config("batch_size and eval_interval must be positive"));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::config("max_grad_norm must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub f: f64,
    pub loss: f64,
    /// Accuracy on the epoch's (possibly modified) training labels.
    pub train_accuracy_modified: f64,
    /// Accuracy on the unmodified training set.
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Predicted classes, evaluated in chunks.
pub fn predict(net: &Classifier, data: &LabeledDataset) -> Result<Vec<usize>> {
    let k = net.n_classes();
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(512) {
        let logits = net.logits(&data.batch(chunk))?;
        out.extend(logits.values().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

pub fn accuracy(net: &Classifier, data: &LabeledDataset) -> Result<f64> {
    let pred = predict(net, data)?;
    Ok(agreement(&pred, &data.labels))
}

fn agreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len().max(1) as f64
}

/// One epoch of shuffled minibatch cross-entropy steps; returns the mean loss.
fn train_epoch(
    net: &mut Classifier,
    opt: &mut Optimizer,
    data: &LabeledDataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let mut total = 0.0;
    for chunk in idx.chunks(config.batch_size) {
        let tape = Tape::new();
        let out = net.forward(&tape, &data.batch(chunk), true)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let loss = cross_entropy(out.heads[0], &labels);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::numerical(format!("classification loss is {value} on a batch of {}", chunk.len())));
        }
        tape.backward(loss)?;
        let network = net.network_mut();
        network.zero_grad();
        network.accumulate_grads(&tape, &out.params);
        if let Some(max_norm) = config.max_grad_norm {
            clip_grad_norm(network.params_mut(), max_norm);
        }
        opt.step(network.params_mut())?;
        total += value * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains `net` for `epochs` epochs under `schedule`, recording accuracies every `eval_interval` epochs.
pub fn train_classifier(
    net: &mut Classifier,
    train: &LabeledDataset,
    test: &LabeledDataset,
    schedule: &ModificationSchedule,
    config: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    train_classifier_with(net, train, test, schedule, config, epochs, seed, &mut |_| Ok(()))
}

/// [`train_classifier`] that hands every record to `on_record` as soon as it exists.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier_with(
    net: &mut Classifier,
    train: &LabeledDataset,
    test: &LabeledDataset,
    schedule: &ModificationSchedule,
    config: &TrainConfig,
    epochs: usize,
    seed: u64,
    on_record: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    schedule.validate()?;
    if net.n_classes() != train.n_classes {
        return Err(Error::config(format!(
            "classifier has {} outputs but the dataset has {} classes",
            net.n_classes(),
            train.n_classes
        )));
    }
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5e));
    let test_hash = test.fingerprint();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let data = schedule.epoch_dataset(train, epoch)?;
        let loss = train_epoch(net, &mut opt, &data, config, &mut rng)
            .map_err(|e| annotate(e, format!("epoch {epoch}, f = {}", schedule.f_at(epoch))))?;
        if (epoch + 1) % config.eval_interval != 0 && epoch + 1 != epochs {
            continue;
        }
        let pred = predict(net, train)?;
        debug_assert_eq!(test.fingerprint(), test_hash);
        let record = EpochRecord {
            epoch,
            f: schedule.f_at(epoch),
            loss,
            train_accuracy_modified: agreement(&predict(net, &data)?, &data.labels),
            train_accuracy: agreement(&pred, &train.labels),
            test_accuracy: accuracy(net, test)?,
        };
        on_record(&record)?;
        history.push(record);
    }
    if test.fingerprint() != test_hash {
        return Err(Error::numerical("test data changed during training"));
    }
    Ok(history)
}

fn annotate(e: Error, context: String) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{m} ({context})")),
        other => other,
    }
}

/// Snapshots and histories of a two-phase run.
#[derive(Clone, Debug)]
pub struct TwoPhaseResult {
    /// The classifier after phase 1; its trunk is the intermediate encoder.
    pub inter: Classifier,
    /// The classifier after phase 2.
    pub fin: Classifier,
    pub phase1: Vec<EpochRecord>,
    pub phase2: Vec<EpochRecord>,
}

/// Phase 1 on the `f`-modified training set, phase 2 on the unmodified set.
#[allow(clippy::too_many_arguments)]
pub fn two_phase_train(
    net: Classifier,
    train: &LabeledDataset,
    test: &LabeledDataset,
    m: Modification,
    f: f64,
    config: &TrainConfig,
    epochs1: usize,
    epochs2: usize,
    seed: u64,
) -> Result<TwoPhaseResult> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::usage(format!("two-phase training needs f in (0, 1], got {f}")));
    }
    let mut net = net;
    let phase1_schedule = ModificationSchedule { modification: m, mode: ScheduleMode::Fixed { f }, seed };
    let phase1 = train_classifier(&mut net, train, test, &phase1_schedule, config, epochs1, mix_seed(seed, 1))?;
    let inter = net.clone();
    let phase2 =
        train_classifier(&mut net, train, test, &ModificationSchedule::stationary(), config, epochs2, mix_seed(seed, 2))?;
    Ok(TwoPhaseResult { inter, fin: net, phase1, phase2 })
}

/// Linear probe training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a lower training loss.
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { optimizer: OptimizerConfig::sgd_default(), batch_size: 128, max_epochs: 1000, patience: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `[p, |C|]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
}

/// Trunk features `[N, p]` of every example, evaluated in chunks.
pub fn encode(encoder: &Network, data: &LabeledDataset) -> Result<(Vec<f64>, usize)> {
    let p = encoder.feature_dim();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * p);
    for chunk in idx.chunks(512) {
        out.extend_from_slice(encoder.infer_features(&data.batch(chunk))?.values());
    }
    Ok((out, p))
}

/// Trains a linear classifier on frozen encoder features of the unmodified training set.
pub fn train_linear_probe(
    encoder: &Network,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let (phi_train, p) = encode(encoder, train)?;
    let (phi_test, _) = encode(encoder, test)?;
    let k = train.n_classes;
    let mut params = vec![
        crate::nn::Param { name: "probe.weight".into(), tensor: Tensor::zeros(&[p, k]).with_grad() },
        crate::nn::Param { name: "probe.bias".into(), tensor: Tensor::zeros(&[k]).with_grad() },
    ];
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9b));
    let rows = |phi: &[f64], idx: &[usize]| -> Vec<f64> { idx.iter().flat_map(|&i| phi[i * p..(i + 1) * p].iter().copied()).collect() };
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut epochs = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    while epochs < config.max_epochs && since_best < config.patience {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let tape = Tape::new();
            let x = tape.constant(&[chunk.len(), p], rows(&phi_train, chunk));
            let w = tape.variable(params[0].tensor.shape(), params[0].tensor.values().to_vec());
            let b = tape.variable(params[1].tensor.shape(), params[1].tensor.values().to_vec());
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let loss = cross_entropy(x.linear(w, Some(b)), &labels);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::numerical(format!("probe loss is {value}")));
            }
            tape.backward(loss)?;
            for (param, var) in params.iter_mut().zip([w, b]) {
                param.tensor.zero_grad();
                tape.accumulate_into(var, &mut param.tensor);
            }
            opt.step(&mut params)?;
            total += value * chunk.len() as f64;
        }
        epochs += 1;
        let mean = total / train.len().max(1) as f64;
        if mean < best - 1e-9 {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    let accuracy_on = |phi: &[f64], data: &LabeledDataset| {
        let (w, b) = (params[0].tensor.values(), params[1].tensor.values());
        let pred: Vec<usize> = (0..data.len())
            .map(|i| {
                let x = &phi[i * p..(i + 1) * p];
                let logits: Vec<f64> = (0..k).map(|c| b[c] + (0..p).map(|j| x[j] * w[j * k + c]).sum::<f64>()).collect();
                argmax(&logits)
            })
            .collect();
        agreement(&pred, &data.labels)
    };
    Ok(ProbeResult {
        train_accuracy: accuracy_on(&phi_train, train),
        test_accuracy: accuracy_on(&phi_test, test),
        weights: params[0].tensor.values().to_vec(),
        bias: params[1].tensor.values().to_vec(),
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending singular values.
    pub singular_values: Vec<f64>,
    /// `σ_i / σ_1`, all zero for a zero matrix.
    pub normalised: Vec<f64>,
    pub k: usize,
    /// `Σ_{i>k} σ_i / σ_1`.
    pub tail_mass: f64,
    /// Set when every singular value is zero.
    pub zero_matrix: bool,
}

/// Spectrum of a row-major `rows x cols` matrix.
pub fn spectrum(phi: &[f64], rows: usize, cols: usize, k: usize) -> SpectrumReport {
    let sv = crate::linalg::singular_values(phi, rows, cols);
    let top = sv.first().copied().unwrap_or(0.0);
    let zero_matrix = top == 0.0;
    let normalised: Vec<f64> = if zero_matrix { vec![0.0; sv.len()] } else { sv.iter().map(|s| s / top).collect() };
    let tail_mass = normalised.iter().skip(k).sum();
    SpectrumReport { singular_values: sv, normalised, k, tail_mass, zero_matrix }
}

/// Spectrum of the representation matrix of `encoder` on `data`.
pub fn representation_spectrum(encoder: &Network, data: &LabeledDataset, k: usize) -> Result<SpectrumReport> {
    let (phi, p) = encode(encoder, data)?;
    Ok(spectrum(&phi, data.len(), p, k))
}

/// Trains `student` on the teacher's argmax predictions over the training inputs.
///
/// The history's accuracies are measured against the true labels; the
/// modified-label accuracy column is the agreement with the teacher.
pub fn argmax_distill(
    teacher: &Classifier,
    student: &mut Classifier,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    let targets = train.with_labels(predict(teacher, train)?);
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xd1));
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let loss = train_epoch(student, &mut opt, &targets, config, &mut rng)?;
        if (epoch + 1) % config.eval_interval != 0 && epoch + 1 != epochs {
            continue;
        }
        let pred = predict(student, train)?;
        history.push(EpochRecord {
            epoch,
            f: 1.0,
            loss,
            train_accuracy_modified: agreement(&pred, &targets.labels),
            train_accuracy: agreement(&pred, &train.labels),
            test_accuracy: accuracy(student, test)?,
        });
    }
    Ok(history)
}

/// One point of a fixed-f sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub modification: Modification,
    pub f: f64,
    pub seed: u64,
    /// Linear-probe test accuracy of the intermediate encoder.
    pub probe_relevance: f64,
    /// Linear-probe test accuracy of the final encoder.
    pub final_test_accuracy: f64,
    /// Test accuracy of the final classifier itself.
    pub classifier_test_accuracy: f64,
    /// Spectrum tail mass of the final encoder's test representations.
    pub tail_mass: f64,
}

/// Sweep settings: one two-phase run per `(f, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub modification: Modification,
    pub fs: Vec<f64>,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub tail_k: usize,
    pub probe: ProbeConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            modification: Modification::WrongLabels,
            fs: (1..=10).map(|i| i as f64 / 10.0).collect(),
            epochs_phase1: 70,
            epochs_phase2: 80,
            tail_k: 10,
            probe: ProbeConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fs.is_empty() {
            return Err(Error::config("sweep needs at least one f"));
        }
        if let Some(f) = self.fs.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config(format!("sweep f values must lie in (0, 1], got {f}")));
        }
        Ok(())
    }
}

/// Two-phase training, probes and spectrum for a single `(f, seed)`.
pub fn sweep_point(
    train: &LabeledDataset,
    test: &LabeledDataset,
    sweep: &SweepConfig,
    train_config: &TrainConfig,
    f: f64,
    seed: u64,
) -> Result<SweepRow> {
    let net = Classifier::new(&train_config.network, &train.shape, train.n_classes, mix_seed(seed, 0xc1))?;
    let run = two_phase_train(
        net,
        train,
        test,
        sweep.modification,
        f,
        train_config,
        sweep.epochs_phase1,
        sweep.epochs_phase2,
        seed,
    )?;
    let inter = train_linear_probe(run.inter.network(), train, test, &sweep.probe, seed)?;
    let fin = train_linear_probe(run.fin.network(), train, test, &sweep.probe, seed)?;
    let spec = representation_spectrum(run.fin.network(), test, sweep.tail_k)?;
    Ok(SweepRow {
        modification: sweep.modification,
        f,
        seed,
        probe_relevance: inter.test_accuracy,
        final_test_accuracy: fin.test_accuracy,
        classifier_test_accuracy: run.phase2.last().map_or(run.phase1.last().map_or(0.0, |r| r.test_accuracy), |r| r.test_accuracy),
        tail_mass: spec.tail_mass,
    })
}
