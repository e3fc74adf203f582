mod common;

use std::fs;

use finder_core::data::{load_views, Dataset};
use finder_core::metrics::export_embeddings;
use finder_core::nn::{checkpoint, ConvBlock, ModelConfig};
use finder_core::synth::{generate, SynthSplit, SynthSpec};
use finder_core::training::{evaluate_model, run_experiment, train_fold, RunReport, RunStatus, TrainConfig};
use finder_core::Error;

fn spec(split: SynthSplit) -> SynthSpec {
    SynthSpec {
        dataset_name: "toy".into(),
        n_classes: 3,
        n_per_class: 12,
        view_dims: vec![12, 16],
        sigma: 0.5,
        rho: 1.0,
        separation: 4.0,
        seed: 5,
        split,
    }
}

fn small(kind: &str) -> ModelConfig {
    ModelConfig {
        conv_blocks: vec![ConvBlock::new(4, 3, 2)],
        dense_units: vec![8],
        projection_dim: 6,
        ..ModelConfig::new(kind, vec![], 3)
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn dataset(split: SynthSplit) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate(&spec(split)).unwrap().write(dir.path()).unwrap();
    let ds = Dataset::load(dir.path().join("manifest.json")).unwrap();
    (dir, ds)
}

#[test]
fn kfold_report_structure_and_averages() {
    let (dir, ds) = dataset(SynthSplit::Kfold { k: 4, val_fraction: 0.1 });
    let out = dir.path().join("run");
    let report = run_experiment(&ds, &small("finder"), &quick(), Some(&out)).unwrap();
    assert_eq!(report.status, RunStatus::Complete);
    assert_eq!(report.folds.len(), 4);
    let avg = report.averages.as_ref().unwrap();
    let mean_acc = report.folds.iter().map(|f| f.accuracy).sum::<f64>() / 4.0;
    assert!((avg.accuracy - mean_acc).abs() < 1e-9);
    let mean_eer = report.folds.iter().map(|f| f.mean_eer).sum::<f64>() / 4.0;
    assert!((avg.mean_eer - mean_eer).abs() < 1e-9);
    assert_eq!(report.normalization, "relu_eps");
    assert!(report.wall_clock_seconds.is_none());
    for f in &report.folds {
        assert!(f.max_identity_residual <= 1e-6);
        assert_eq!(f.n_train + f.n_val + f.n_test, 36);
        assert!(out.join(format!("{}.ckpt", f.name)).exists());
    }
    assert!(out.join("timing.json").exists());
    assert_eq!(RunReport::read(out.join("report.json")).unwrap(), report);
}

#[test]
fn official_split_gives_a_single_entry() {
    let (_dir, ds) = dataset(SynthSplit::Official {
        val_fraction: 0.15,
        test_fraction: 0.25,
    });
    let cfg = TrainConfig {
        views: vec!["view1".into()],
        ..quick()
    };
    let report = run_experiment(&ds, &small("cnn"), &cfg, None).unwrap();
    assert_eq!(report.folds.len(), 1);
    let avg = report.averages.unwrap();
    assert_eq!(avg.accuracy, report.folds[0].accuracy);
    assert_eq!(avg.mean_eer, report.folds[0].mean_eer);
    assert_eq!(report.views, ["view1"]);
    assert_eq!(report.normalization, "none");
}

#[test]
fn reruns_are_byte_identical() {
    let (dir, ds) = dataset(SynthSplit::Kfold { k: 3, val_fraction: 0.1 });
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&ds, &small("finder"), &quick(), Some(&a)).unwrap();
    run_experiment(&ds, &small("finder"), &quick(), Some(&b)).unwrap();
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("fold0.ckpt")).unwrap(), fs::read(b.join("fold0.ckpt")).unwrap());
}

#[test]
fn concurrent_folds_match_sequential_ones() {
    let (_dir, ds) = dataset(SynthSplit::Kfold { k: 3, val_fraction: 0.1 });
    let strict = run_experiment(&ds, &small("finder"), &quick(), None).unwrap();
    let loose_cfg = TrainConfig { strict: false, ..quick() };
    let loose = run_experiment(&ds, &small("finder"), &loose_cfg, None).unwrap();
    assert_eq!(strict.folds, loose.folds);
    assert!(loose.wall_clock_seconds.is_some());
}

#[test]
fn failure_leaves_a_marked_partial_report() {
    let (dir, ds) = dataset(SynthSplit::Kfold { k: 3, val_fraction: 0.0 });
    let out = dir.path().join("run");
    // no validation data while early stopping is on
    let err = run_experiment(&ds, &small("finder"), &quick(), Some(&out)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let partial = RunReport::read(out.join("report.json")).unwrap();
    assert_eq!(partial.status, RunStatus::Failed);
    assert!(partial.failure.unwrap().contains("validation"));
    assert!(partial.folds.is_empty());
}

#[test]
fn unit_lambda_fusion_trains_like_plain_concatenation() {
    let (_dir, ds) = dataset(SynthSplit::Kfold { k: 3, val_fraction: 0.1 });
    let split = &ds.splits().unwrap()[0];
    let train = load_views(&ds, &[0, 1], &split.train_ids).unwrap();
    let val = load_views(&ds, &[0, 1], &split.val_ids).unwrap();
    let mut cfg = quick();
    cfg.renyi.lambda = 1.0;
    let dims = vec![12, 16];
    let finder = ModelConfig {
        input_dims: dims.clone(),
        ..small("finder")
    };
    let concat = ModelConfig {
        input_dims: dims,
        ..small("concat_fusion")
    };
    let a = train_fold(&finder, &train, &val, &cfg).unwrap();
    let b = train_fold(&concat, &train, &val, &cfg).unwrap();
    assert_eq!(a.model.parameters(), b.model.parameters());
    assert_eq!(a.model.batchnorm_states(), b.model.batchnorm_states());
}

#[test]
fn saved_checkpoint_reproduces_test_metrics_and_embeddings() {
    let (dir, ds) = dataset(SynthSplit::Kfold { k: 3, val_fraction: 0.1 });
    let out = dir.path().join("run");
    let report = run_experiment(&ds, &small("finder"), &quick(), Some(&out)).unwrap();
    let split = &ds.splits().unwrap()[1];
    let test = load_views(&ds, &[0, 1], &split.test_ids).unwrap();
    let mut model = checkpoint::load::<f32>(out.join("fold1.ckpt")).unwrap();
    let eval = evaluate_model(&mut model, &test, 5, ds.class_names()).unwrap();
    assert_eq!(eval.accuracy, report.folds[1].accuracy);
    assert_eq!(eval.per_class_eer, report.folds[1].per_class_eer);

    let (e1, e2) = (dir.path().join("e1.csv"), dir.path().join("e2.csv"));
    export_embeddings(&mut model, &test, &e1).unwrap();
    export_embeddings(&mut model, &test, &e2).unwrap();
    let text = fs::read_to_string(&e1).unwrap();
    assert_eq!(text, fs::read_to_string(&e2).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), test.len() + 1);
    assert_eq!(lines[0].split(',').count(), model.penultimate_width() + 2);
}

#[test]
fn best_epoch_loss_beats_first_epoch_in_most_runs() {
    let mut improved = 0;
    let runs = 20;
    for seed in 0..runs {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            seed,
            n_per_class: 20,
            split: SynthSplit::Official {
                val_fraction: 0.2,
                test_fraction: 0.2,
            },
            ..spec(SynthSplit::default())
        };
        generate(&spec).unwrap().write(dir.path()).unwrap();
        let ds = Dataset::load(dir.path().join("manifest.json")).unwrap();
        let cfg = TrainConfig {
            epochs: 15,
            seed,
            ..quick()
        };
        let report = run_experiment(&ds, &small("finder"), &cfg, None).unwrap();
        let f = &report.folds[0];
        if f.loss_curve[f.best_epoch - 1].total < f.loss_curve[0].total {
            improved += 1;
        }
    }
    assert!(improved * 100 >= runs * 95, "{improved} of {runs} runs improved");
}
