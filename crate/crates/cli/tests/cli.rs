use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use itergrid::iter::IterMode;
use itergrid::ppo::PpoConfig;
use itergrid_cli::config::{emit, parse_str, ExperimentKind};
use itergrid_cli::report::{report, ReportOptions};
use itergrid_cli::runner::{read_json, seed_dir};
use itergrid_cli::stats::SeedResult;
use itergrid_cli::{run, CliError, ExperimentConfig, RunOptions};

const TINY_ENV: &str = r#""levels": {"env": {"room_count": [1, 1], "max_steps": 30}},
    "ppo": {"n_envs": 4, "frames_per_env": 16, "minibatch_size": 32},
    "network": {"layers": [{"dense": {"out_dim": 16}}, {"activation": "relu"}]},
    "eval": {"episodes": 4}"#;

fn tiny_iter(mode: &str) -> ExperimentConfig {
    parse_str(&format!(
        r#"{{"kind": "rl_iter", "rl": {{{TINY_ENV}, "total_frames": 640,
            "iter": {{"t_init": 192, "t_distill": 128, "mode": "{mode}", "store_capacity": 256}}}}}}"#
    ))
    .unwrap()
}

const TINY_SL: &str = r#""dataset": {"shapes": {"n_train": 60, "n_test": 30, "size": 8, "noise": 0.1}},
    "train": {"network": {"layers": [{"dense": {"out_dim": 12}}, {"activation": "relu"}]},
              "optimizer": {"kind": "adam", "learning_rate": 0.003}, "batch_size": 16, "epochs": 3},
    "probe": {"max_epochs": 5}"#;

fn quiet() -> RunOptions {
    RunOptions::default()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_itergrid"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_object_is_rl_ppo_with_default_hyperparameters() {
    let c = parse_str("{}").unwrap();
    assert_eq!(c.kind, ExperimentKind::RlPpo);
    assert_eq!(c.seeds, vec![0]);
    let p = &c.rl.ppo;
    assert_eq!(*p, PpoConfig::default());
    assert_eq!((p.clip_epsilon, p.gamma, p.lambda_gae), (0.2, 0.99, 0.95));
    assert_eq!((p.n_envs, p.frames_per_env, p.minibatch_size, p.ppo_epochs), (32, 128, 512, 4));
    assert_eq!(p.optimizer.learning_rate, 3e-4);
    assert!(c.rl.iter.is_none());
}

#[test]
fn unknown_key_is_named_with_its_path() {
    let err = parse_str(r#"{"rl": {"ppo": {"gamna": 0.9}}}"#).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CliError::Config(_)));
    assert!(msg.contains("gamna") && msg.contains("rl.ppo"), "{msg}");
}

#[test]
fn invariant_violations_are_config_errors() {
    for text in [
        r#"{"seeds": []}"#,
        r#"{"seeds": [1, 1]}"#,
        r#"{"kind": "rl_ppo", "rl": {"iter": {}}}"#,
        r#"{"kind": "sl_two_phase", "sl": {"two_phase": {"f": 0.0}}}"#,
        r#"{"kind": "sl_sweep", "sl": {"sweep": {"fs": [1.5]}}}"#,
        r#"{"rl": {"total_frames": 0}}"#,
        r#"{"kind": "rl_iter", "rl": {"iter": {"t_distill": 0}}}"#,
    ] {
        assert!(matches!(parse_str(text), Err(CliError::Config(_))), "{text}");
    }
    assert!(matches!(parse_str("{"), Err(CliError::Config(_))));
}

#[test]
fn emitted_config_parses_back_identically() {
    for c in [parse_str("{}").unwrap(), tiny_iter("sequential"), parse_str(r#"{"kind": "sl_sweep"}"#).unwrap()] {
        assert_eq!(parse_str(&emit(&c)).unwrap(), c);
    }
    assert!(parse_str(r#"{"kind": "rl_iter"}"#).unwrap().rl.iter.is_some());
}

#[test]
fn two_seed_summary_stderr_is_half_the_gap() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = parse_str(&format!(r#"{{"kind": "rl_ppo", "seeds": [3, 4], "rl": {{{TINY_ENV}, "total_frames": 64}}}}"#))
        .unwrap();
    c.rl.eval.mode = itergrid::ppo::EvalMode::Sampled;
    let summary = run(&c, tmp.path(), &quiet()).unwrap();
    let a: SeedResult = read_json(&seed_dir(tmp.path(), 3).join("result.json")).unwrap();
    let b: SeedResult = read_json(&seed_dir(tmp.path(), 4).join("result.json")).unwrap();
    for key in ["mean_return_test", "policy_loss", "entropy"] {
        let agg = &summary.metrics[key];
        assert_eq!(agg.n, 2);
        assert!((agg.mean - (a[key] + b[key]) / 2.0).abs() < 1e-12);
        assert!((agg.stderr - (a[key] - b[key]).abs() / 2.0).abs() < 1e-12, "{key}");
    }
    let rows = fs::read_to_string(seed_dir(tmp.path(), 3).join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    let saved: ExperimentConfig = itergrid_cli::parse_config(&tmp.path().join("config.json")).unwrap();
    assert_eq!(saved, c);
}

#[test]
fn identical_config_gives_identical_metrics_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = tiny_iter("parallel");
    run(&c, a.path(), &quiet()).unwrap();
    run(&c, b.path(), &quiet()).unwrap();
    for f in ["metrics.csv", "events.csv", "result.json"] {
        assert_eq!(fs::read(seed_dir(a.path(), 0).join(f)).unwrap(), fs::read(seed_dir(b.path(), 0).join(f)).unwrap());
    }
}

fn assert_resume_equivalent(mode: &str, halt: u64) {
    let (full, cut) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = tiny_iter(mode);
    run(&c, full.path(), &quiet()).unwrap();
    let halted = run(&c, cut.path(), &RunOptions { halt_after: Some(halt), ..quiet() });
    assert!(matches!(halted, Err(CliError::Interrupted(u)) if u == halt));
    // Rows written after the checkpoint would be lost by a real kill; a stale row must be dropped on resume.
    let metrics = seed_dir(cut.path(), 0).join("metrics.csv");
    let mut text = fs::read_to_string(&metrics).unwrap();
    let last = text.lines().last().unwrap().to_string();
    let (update, rest) = last.split_once(',').unwrap();
    text.push_str(&format!("{},{rest}", update.parse::<u64>().unwrap() + 1));
    text.push('\n');
    fs::write(&metrics, text).unwrap();
    run(&c, cut.path(), &RunOptions { resume: true, ..quiet() }).unwrap();
    for f in ["metrics.csv", "events.csv", "result.json"] {
        let (x, y) = (seed_dir(full.path(), 0).join(f), seed_dir(cut.path(), 0).join(f));
        assert_eq!(fs::read_to_string(x).unwrap(), fs::read_to_string(y).unwrap(), "{mode} {f}");
    }
    assert_eq!(fs::read(full.path().join("summary.json")).unwrap(), fs::read(cut.path().join("summary.json")).unwrap());
}

#[test]
fn kill_and_resume_mid_phase_matches_an_uninterrupted_run() {
    assert_resume_equivalent("parallel", 4);
    assert_resume_equivalent("sequential", 4);
    assert_resume_equivalent("parallel", 1);
}

#[test]
fn resume_with_a_different_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let c = tiny_iter("parallel");
    let _ = run(&c, tmp.path(), &RunOptions { halt_after: Some(2), ..quiet() });
    let mut other = c.clone();
    other.rl.ppo.gamma = 0.9;
    assert!(matches!(run(&other, tmp.path(), &RunOptions { resume: true, ..quiet() }), Err(CliError::Usage(_))));
}

#[test]
fn sequential_mode_is_recorded_in_the_resolved_config() {
    assert_eq!(tiny_iter("sequential").rl.iter.unwrap().mode, IterMode::Sequential);
}

#[test]
fn report_draws_lines_bands_and_one_marker_per_replacement() {
    let tmp = tempfile::tempdir().unwrap();
    let (iter_dir, ppo_dir) = (tmp.path().join("iter"), tmp.path().join("ppo"));
    let c = tiny_iter("parallel");
    run(&c, &iter_dir, &quiet()).unwrap();
    let mut ppo = c.clone();
    ppo.kind = ExperimentKind::RlPpo;
    ppo.rl.iter = None;
    ppo.seeds = vec![0, 1];
    run(&ppo, &ppo_dir, &quiet()).unwrap();

    let out = tmp.path().join("report");
    let opts = ReportOptions { metrics: vec!["mean_return_test".into()], x: None, baseline: 0, out: out.clone() };
    let single = report(std::slice::from_ref(&iter_dir), &opts).unwrap();
    assert_eq!(single.svgs.len(), 1);
    assert_eq!(single.rows[0].normalised, 1.0);
    let svg = fs::read_to_string(&single.svgs[0]).unwrap();
    let events = fs::read_to_string(seed_dir(&iter_dir, 0).join("events.csv")).unwrap();
    assert_eq!(events.lines().count() - 1, 3);
    assert_eq!(svg.matches("class=\"series\"").count(), 1);
    assert_eq!(svg.matches("class=\"replacement\"").count(), 3);
    assert_eq!(svg.matches("stroke-dasharray").count(), 3);

    let opts = ReportOptions { metrics: vec!["entropy".into()], ..opts };
    let both = report(&[ppo_dir.clone(), iter_dir.clone()], &opts).unwrap();
    let svg = fs::read_to_string(&both.svgs[0]).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 2);
    assert_eq!(svg.matches("class=\"band\"").count(), 1);
    assert_eq!(both.rows[0].run, "ppo");
    assert_eq!(both.rows[0].normalised, 1.0);
    let table = fs::read_to_string(&both.table).unwrap();
    assert!(table.starts_with("run,metric,final_mean,final_stderr,normalised"));

    let missing = ReportOptions { metrics: vec!["returnz".into()], ..opts };
    let err = report(&[iter_dir], &missing).unwrap_err().to_string();
    assert!(err.contains("returnz") && err.contains("mean_return_test") && err.contains("approx_kl"), "{err}");
}

#[test]
fn supervised_kinds_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("sl_run", r#""schedule": {"mode": {"annealed": {"epochs_nonstat": 2}}}"#, vec!["metrics.csv", "model.itr"]),
        ("sl_two_phase", r#""two_phase": {"f": 0.3, "epochs_phase1": 2, "epochs_phase2": 2}"#, vec!["metrics.csv", "intermediate.itr", "final.itr"]),
        ("sl_sweep", r#""sweep": {"fs": [0.5, 1.0], "epochs_phase1": 1, "epochs_phase2": 1, "probe": {"max_epochs": 3}}"#, vec!["metrics.csv"]),
        ("probe", r#""spectrum_k": 2"#, vec!["metrics.csv", "probe.json", "model.itr"]),
        ("spectrum", r#""spectrum_k": 2"#, vec!["spectrum.csv", "model.itr"]),
        ("distill_sl", r#""distill_epochs": 2"#, vec!["metrics.csv", "teacher_metrics.csv", "student.itr"]),
    ];
    for (kind, extra, files) in cases {
        let c = parse_str(&format!(r#"{{"kind": "{kind}", "seeds": [0, 1], "sl": {{{TINY_SL}, {extra}}}}}"#)).unwrap();
        let dir = tmp.path().join(kind);
        let summary = run(&c, &dir, &quiet()).unwrap();
        assert!(!summary.metrics.is_empty(), "{kind}");
        for f in files {
            assert!(seed_dir(&dir, 1).join(f).exists(), "{kind}: {f}");
        }
    }
    let sweep = fs::read_to_string(seed_dir(&tmp.path().join("sl_sweep"), 0).join("metrics.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    let spec = fs::read_to_string(seed_dir(&tmp.path().join("spectrum"), 0).join("spectrum.csv")).unwrap();
    assert_eq!(spec.lines().count(), 13);
}

#[test]
fn probe_can_read_a_saved_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let c = parse_str(&format!(r#"{{"kind": "sl_run", "sl": {{{TINY_SL}}}}}"#)).unwrap();
    run(&c, &tmp.path().join("train"), &quiet()).unwrap();
    let model = seed_dir(&tmp.path().join("train"), 0).join("model.itr");
    let probe = parse_str(&format!(
        r#"{{"kind": "probe", "sl": {{{TINY_SL}, "encoder_checkpoint": {}}}}}"#,
        serde_json::to_string(&model).unwrap()
    ))
    .unwrap();
    let s = run(&probe, &tmp.path().join("probe"), &quiet()).unwrap();
    let trained: SeedResult = read_json(&seed_dir(&tmp.path().join("train"), 0).join("result.json")).unwrap();
    assert_eq!(s.metrics["classifier_test_accuracy"].mean, trained["test_accuracy"]);
    assert!(!seed_dir(&tmp.path().join("probe"), 0).join("metrics.csv").exists());
}

#[test]
fn binary_refuses_to_overwrite_and_reports_error_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "tiny.json",
        &format!(r#"{{"kind": "rl_ppo", "rl": {{{TINY_ENV}, "total_frames": 64}}}}"#),
    );
    let out = tmp.path().join("runs");
    let first = bin().args(["train", "-q", "--config"]).arg(&cfg).env("ITERGRID_OUT", &out).output().unwrap();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(out.join("tiny").join("seed_0").join("metrics.csv").exists());
    assert!(out.join("tiny").join("summary.json").exists());

    let again = bin().args(["train", "-q", "--config"]).arg(&cfg).env("ITERGRID_OUT", &out).output().unwrap();
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced =
        bin().args(["train", "-q", "--force", "--seed", "1,2", "--config"]).arg(&cfg).env("ITERGRID_OUT", &out).output().unwrap();
    assert!(forced.status.success());
    assert!(out.join("tiny").join("seed_2").exists() && !out.join("tiny").join("seed_0").exists());

    let bad = write_config(tmp.path(), "bad.json", r#"{"rl": {"ppo": {"gamna": 0.9}}}"#);
    let r = bin().args(["validate-config", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("gamna"));

    let r = bin().args(["validate-config", "--config"]).arg(tmp.path().join("missing.json")).output().unwrap();
    assert_eq!(r.status.code(), Some(3));

    let r = bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("x")).output().unwrap();
    assert_eq!(r.status.code(), Some(2));

    let ok = bin().args(["validate-config", "--config"]).arg(&cfg).output().unwrap();
    assert!(ok.status.success());
    let echoed = parse_str(&String::from_utf8_lossy(&ok.stdout)).unwrap();
    assert_eq!(echoed.rl.total_frames, 64);

    let rep = bin()
        .args(["report", "--metric", "nope", "--out"])
        .arg(tmp.path().join("rep"))
        .arg(out.join("tiny"))
        .output()
        .unwrap();
    assert_eq!(rep.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&rep.stderr).contains("available columns"));
}
