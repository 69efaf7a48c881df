//! Configuration handling, determinism, resumption and the experiment matrix.

use dbvae::datasets::{build_feedback, generate_split, BiasRule, Dataset, Feedback, FeedbackGeometry, FactorSpec, SplitTag};
use dbvae::metrics::{EvalData, EvalOptions};
use dbvae::metrics::factorvae::FactorVaeOptions;
use dbvae::report::{collect_results, AGGREGATE_FILE, METRICS_FILE};
use dbvae::trainer::matrix::{cell_dir, run_matrix, CellStatus, MatrixCell, MatrixData};
use dbvae::trainer::{checkpoint_bytes, read_log, train, TrainOptions, TrainingConfig, Variant, CHECKPOINT_FILE, LOG_FILE};
use dbvae::Error;

fn data(n: usize) -> (Dataset, Feedback) {
    let spec = FactorSpec::glyphs10(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
    let ds = generate_split(&spec, Some(&rule), n, 1, SplitTag::Train).unwrap();
    let fb = build_feedback(&spec, 120, &spec.target_names(), 2, FeedbackGeometry::Anchor).unwrap();
    (ds, fb)
}

fn small(mut c: TrainingConfig, epochs: usize) -> TrainingConfig {
    c.epochs = epochs;
    c.batch_size = 64;
    c.feedback_batch_size = 4;
    c
}

#[test]
fn config_defaults_and_warnings() {
    let c = TrainingConfig::default();
    assert_eq!(c.variant, Variant::Proposed);
    assert_eq!((c.weights.lambda1, c.weights.lambda2, c.weights.lambda3), (10.0, 10.0, 1.0));
    assert!(c.validate().unwrap().is_empty());
    let mut odd = c.clone();
    odd.weights.lambda3 = 7.0;
    let w = odd.validate().unwrap();
    assert!(w.iter().any(|m| m.contains("lambda3")), "{w:?}");
    let mut unequal = c.clone();
    unequal.weights.lambda2 = 3.0;
    assert!(!unequal.validate().unwrap().is_empty());
    let mut bad = c;
    bad.learning_rate = -1.0;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn config_toml_round_trip_and_unknown_keys() {
    for c in [TrainingConfig::proposed(3), TrainingConfig::no_labels(4), TrainingConfig::baseline(5, 4.0)] {
        assert_eq!(TrainingConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
    let base = TrainingConfig::default().to_toml();
    for text in [format!("bogus = 1\n{base}"), format!("{base}\nbogus = 1\n")] {
        assert!(matches!(TrainingConfig::from_toml(&text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn baseline_reconstruction_improves() {
    let (ds, _) = data(2000);
    let out = train(&small(TrainingConfig::baseline(0, 1.0), 5), &ds, None, &TrainOptions::default()).unwrap();
    let per_epoch = |e: usize| {
        let rows: Vec<f64> = out.log.iter().filter(|r| r.epoch == e).map(|r| r.breakdown.reconstruction).collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    assert!(per_epoch(4) < per_epoch(0), "{} !< {}", per_epoch(4), per_epoch(0));
    assert!(out.log.iter().all(|r| r.breakdown.mp.is_empty() && r.probe_loss.is_none()));
}

#[test]
fn same_seed_runs_are_bitwise_identical() {
    let (ds, fb) = data(256);
    let c = small(TrainingConfig::proposed(7), 2);
    let a = train(&c, &ds, Some(&fb), &TrainOptions::default()).unwrap();
    let b = train(&c, &ds, Some(&fb), &TrainOptions::default()).unwrap();
    assert_eq!(checkpoint_bytes(&c, &a).unwrap(), checkpoint_bytes(&c, &b).unwrap());
    assert!(a.log.iter().all(|r| r.probe_loss.is_some() && r.breakdown.mp.len() == 2));
    let other = train(&small(TrainingConfig::proposed(8), 2), &ds, Some(&fb), &TrainOptions::default()).unwrap();
    assert_ne!(checkpoint_bytes(&c, &a).unwrap(), checkpoint_bytes(&c, &other).unwrap());
}

#[test]
fn interrupted_then_resumed_equals_uninterrupted() {
    let (ds, fb) = data(256);
    let c = small(TrainingConfig::proposed(9), 2);
    let full = train(&c, &ds, Some(&fb), &TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = TrainOptions { out_dir: Some(dir.path().into()), resume: false, max_steps: Some(5) };
    let cut = train(&c, &ds, Some(&fb), &first).unwrap();
    assert!(!cut.completed);
    assert!(dir.path().join(CHECKPOINT_FILE).exists());
    let again = TrainOptions { out_dir: Some(dir.path().into()), resume: true, max_steps: None };
    let resumed = train(&c, &ds, Some(&fb), &again).unwrap();
    assert!(resumed.completed);
    assert_eq!(checkpoint_bytes(&c, &full).unwrap(), checkpoint_bytes(&c, &resumed).unwrap());

    let targets = ds.spec.target_names();
    let log = read_log(&dir.path().join(LOG_FILE), &targets).unwrap();
    assert_eq!(log.len(), full.log.len());
    for (a, b) in log.iter().zip(&full.log) {
        assert_eq!(a.step, b.step);
        assert!((a.breakdown.total - b.breakdown.total).abs() <= 1e-6 * b.breakdown.total.abs().max(1.0));
    }
}

#[test]
fn no_labels_variant_never_touches_probes() {
    let (ds, fb) = data(128);
    let out = train(&small(TrainingConfig::no_labels(1), 1), &ds, Some(&fb), &TrainOptions::default()).unwrap();
    assert!(out.log.iter().all(|r| r.probe_loss.is_none() && r.breakdown.cl_pos.is_empty() && !r.breakdown.mp.is_empty()));
}

#[test]
fn mismatched_family_is_a_config_error() {
    let (ds, fb) = data(64);
    let mut c = small(TrainingConfig::proposed(0), 1);
    c.model = dbvae::datasets::Family::Sprites;
    assert!(matches!(train(&c, &ds, Some(&fb), &TrainOptions::default()), Err(Error::Config(_))));
}

#[test]
fn matrix_runs_every_cell_once_and_aggregates() {
    let spec = FactorSpec::glyphs10(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
    let (train_ds, fb) = data(192);
    let test = generate_split(&spec, Some(&rule.reversed()), 200, 3, SplitTag::Test).unwrap();
    let eval = generate_split(&spec, None, 400, 4, SplitTag::Eval).unwrap();
    let eval_options = EvalOptions {
        factorvae: FactorVaeOptions { train_votes: 40, test_votes: 20, ..Default::default() },
        estimator_trials: 20,
        ..Default::default()
    };
    let data = MatrixData {
        train: &train_ds,
        feedback: Some(&fb),
        eval: EvalData { eval: &eval, train: &train_ds, test: &test },
        eval_options,
    };
    let cells = vec![
        MatrixCell { name: "proposed".into(), config: small(TrainingConfig::proposed(0), 1) },
        MatrixCell { name: "baseline".into(), config: small(TrainingConfig::baseline(0, 4.0), 1) },
    ];
    let root = tempfile::tempdir().unwrap();
    let out = run_matrix(&cells, &[0, 1, 2], &data, root.path()).unwrap();
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|c| c.status == CellStatus::Completed), "{:?}", out.iter().map(|c| &c.status).collect::<Vec<_>>());
    for c in &out {
        assert!(cell_dir(root.path(), &c.config, c.seed).join(METRICS_FILE).exists());
    }
    let rows = collect_results(root.path()).unwrap();
    assert_eq!(rows.len(), 6);
    let agg = std::fs::read_to_string(root.path().join(AGGREGATE_FILE)).unwrap();
    assert_eq!(agg.lines().count(), 7);

    let stamp = std::fs::metadata(cell_dir(root.path(), "proposed", 1).join(METRICS_FILE)).unwrap().modified().unwrap();
    let rerun = run_matrix(&cells, &[0, 1, 2], &data, root.path()).unwrap();
    assert!(rerun.iter().all(|c| c.status == CellStatus::Skipped));
    let after = std::fs::metadata(cell_dir(root.path(), "proposed", 1).join(METRICS_FILE)).unwrap().modified().unwrap();
    assert_eq!(stamp, after);

    let fvae: Vec<f64> = out.iter().filter(|c| c.config == "proposed").map(|c| c.report.as_ref().unwrap().factorvae_score).collect();
    let mean = fvae.iter().sum::<f64>() / 3.0;
    let summary = std::fs::read_to_string(root.path().join(dbvae::report::SUMMARY_FILE)).unwrap();
    let row = summary
        .lines()
        .find(|l| l.starts_with("proposed,factorvae_score,"))
        .expect("summary row for proposed factorvae_score");
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[2], "3");
    assert!((fields[3].parse::<f64>().unwrap() - mean).abs() < 1e-12);
}
