use itergrid::lab::{
    apply_modification, spectrum, train_classifier, train_linear_probe, LabeledDataset, Modification,
    ModificationSchedule, ProbeConfig, ScheduleMode, ShapesConfig, Split, TrainConfig,
};
use itergrid::nn::{LayerSpec, NetworkSpec};
use itergrid::{Classifier, Error, OptimizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_hot_dataset(labels: &[usize], k: usize, split: Split) -> LabeledDataset {
    let inputs = labels.iter().flat_map(|&l| (0..k).map(move |c| if c == l { 1.0 } else { 0.0 })).collect();
    LabeledDataset::new([k, 1, 1], inputs, labels.to_vec(), k, split).unwrap()
}

fn small_shapes() -> (LabeledDataset, LabeledDataset) {
    ShapesConfig { n_train: 120, n_test: 40, size: 8, noise: 0.1 }.generate(5).unwrap()
}

#[test]
fn noisy_labels_resample_every_epoch_wrong_labels_do_not() {
    let (train, _) = small_shapes();
    let w0 = apply_modification(&train, Modification::WrongLabels, 0.3, 0, 9).unwrap();
    let w1 = apply_modification(&train, Modification::WrongLabels, 0.3, 1, 9).unwrap();
    assert_eq!(w0.labels, w1.labels);
    let n0 = apply_modification(&train, Modification::NoisyLabels, 0.3, 0, 9).unwrap();
    let n1 = apply_modification(&train, Modification::NoisyLabels, 0.3, 1, 9).unwrap();
    assert_ne!(n0.labels, n1.labels);
    for d in [&w0, &n0, &n1] {
        let changed = d.labels.iter().zip(&train.labels).filter(|(a, b)| a != b).count();
        assert_eq!(changed, train.len() - (0.3 * train.len() as f64).ceil() as usize);
        assert_eq!(d.inputs, train.inputs);
    }
}

#[test]
fn corrupted_subset_shrinks_as_f_grows() {
    let (train, _) = small_shapes();
    let corrupted = |f: f64| -> Vec<bool> {
        let d = apply_modification(&train, Modification::WrongLabels, f, 0, 4).unwrap();
        d.labels.iter().zip(&train.labels).map(|(a, b)| a != b).collect()
    };
    let (lo, hi) = (corrupted(0.2), corrupted(0.6));
    assert!(hi.iter().zip(&lo).all(|(h, l)| !h || *l));
}

#[test]
fn dataset_size_keeps_length_and_at_least_one_example() {
    let (train, _) = small_shapes();
    for f in [0.0, 0.001, 0.25, 0.5, 0.99] {
        let d = apply_modification(&train, Modification::DatasetSize, f, 0, 0).unwrap();
        assert_eq!(d.len(), train.len());
        let k = ((f * train.len() as f64).ceil() as usize).max(1);
        for i in 0..d.len() {
            assert_eq!(d.input(i), train.input(i % k));
            assert_eq!(d.labels[i], train.labels[i % k]);
        }
    }
}

#[test]
fn test_split_is_never_modified() {
    let (_, test) = small_shapes();
    for m in Modification::ALL {
        assert!(matches!(apply_modification(&test, m, 0.5, 0, 0), Err(Error::Usage(_))));
    }
}

#[test]
fn stationary_schedule_reaches_full_accuracy_on_a_separable_set() {
    let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let train = one_hot_dataset(&labels, 3, Split::Train);
    let test = one_hot_dataset(&labels[..12], 3, Split::Test);
    let mut net = Classifier::new(&NetworkSpec::mlp(&[8]), &[3, 1, 1], 3, 1).unwrap();
    let config = TrainConfig {
        network: NetworkSpec::mlp(&[8]),
        optimizer: OptimizerConfig::adam(1e-2),
        batch_size: 16,
        epochs: 40,
        eval_interval: 1,
        max_grad_norm: None,
    };
    let history = train_classifier(&mut net, &train, &test, &ModificationSchedule::stationary(), &config, 40, 0).unwrap();
    let last = history.last().unwrap();
    assert_eq!(last.train_accuracy, 1.0);
    assert_eq!(last.test_accuracy, 1.0);
    assert_eq!(history.len(), 40);
}

#[test]
fn annealed_schedule_records_f_and_eval_interval() {
    let (train, test) = small_shapes();
    let config = TrainConfig {
        network: NetworkSpec::mlp(&[16]),
        optimizer: OptimizerConfig::adam(1e-3),
        batch_size: 32,
        epochs: 6,
        eval_interval: 4,
        max_grad_norm: None,
    };
    let mut net = Classifier::new(&config.network, &train.shape, train.n_classes, 0).unwrap();
    let schedule = ModificationSchedule {
        modification: Modification::WrongLabels,
        mode: ScheduleMode::Annealed { epochs_nonstat: 4 },
        seed: 0,
    };
    let history = train_classifier(&mut net, &train, &test, &schedule, &config, 6, 0).unwrap();
    let epochs: Vec<usize> = history.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![3, 5]);
    assert_eq!(history[0].f, 0.75);
    assert_eq!(history[1].f, 1.0);
}

#[test]
fn identity_encoder_probe_is_perfect_on_one_hot_classes() {
    let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let train = one_hot_dataset(&labels, 5, Split::Train);
    let test = one_hot_dataset(&labels[..20], 5, Split::Test);
    let identity = Classifier::new(&NetworkSpec { layers: vec![] }, &[5, 1, 1], 5, 0).unwrap();
    let probe = train_linear_probe(identity.network(), &train, &test, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(probe.train_accuracy, 1.0);
    assert_eq!(probe.test_accuracy, 1.0);
}

#[test]
fn zero_encoder_probe_falls_back_to_the_majority_class() {
    let labels: Vec<usize> = (0..40).map(|i| if i % 4 == 0 { 1 } else { 0 }).collect();
    let train = one_hot_dataset(&labels, 3, Split::Train);
    let test = one_hot_dataset(&labels[..20], 3, Split::Test);
    let mut zero = Classifier::new(&NetworkSpec::mlp(&[6]), &[3, 1, 1], 3, 0).unwrap();
    zero.network_mut().zero_params();
    let probe = train_linear_probe(zero.network(), &train, &test, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(probe.train_accuracy, train.majority_rate());
    assert_eq!(probe.test_accuracy, test.majority_rate());
}

#[test]
fn probe_never_touches_the_encoder() {
    let (train, test) = small_shapes();
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 1 },
            LayerSpec::Activation(itergrid::nn::Activation::Relu),
            LayerSpec::Dense { out_dim: 8 },
        ],
    };
    let enc = Classifier::new(&spec, &train.shape, train.n_classes, 2).unwrap();
    let before = enc.network().checksum();
    let cfg = ProbeConfig { max_epochs: 5, ..Default::default() };
    let probe = train_linear_probe(enc.network(), &train, &test, &cfg, 0).unwrap();
    assert_eq!(enc.network().checksum(), before);
    assert_eq!(probe.epochs, 5);
    assert_eq!(probe.weights.len(), 8 * train.n_classes);
}

fn nalgebra_singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, a);
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

#[test]
fn spectrum_matches_nalgebra_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let rows = rng.random_range(2..40);
        let cols = rng.random_range(1..16);
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ours = spectrum(&a, rows, cols, 10).singular_values;
        let oracle = nalgebra_singular_values(&a, rows, cols);
        let top = oracle[0];
        for (i, (x, y)) in ours.iter().zip(&oracle).enumerate() {
            assert!((x - y).abs() <= 1e-6 * top, "sigma_{i}: {x} vs {y}");
        }
        let frob: f64 = a.iter().map(|v| v * v).sum();
        let sum_sq: f64 = ours.iter().map(|s| s * s).sum();
        assert!((frob - sum_sq).abs() <= 1e-9 * frob);
    }
}

#[test]
fn spectrum_of_isotropic_rank_one_and_zero_matrices() {
    let n = 12;
    let eye: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 3.0 } else { 0.0 }).collect();
    let iso = spectrum(&eye, n, n, 10);
    assert!(iso.normalised.iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!((iso.tail_mass - 2.0).abs() < 1e-12);

    let u: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
    let v: Vec<f64> = (0..12).map(|j| 1.0 + j as f64).collect();
    let rank1: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
    let r = spectrum(&rank1, 20, 12, 1);
    assert!(r.tail_mass < 1e-6);
    assert!(!r.zero_matrix);

    let z = spectrum(&vec![0.0; 30], 5, 6, 2);
    assert!(z.zero_matrix);
    assert_eq!(z.tail_mass, 0.0);
    assert!(z.normalised.iter().all(|v| *v == 0.0));
}
