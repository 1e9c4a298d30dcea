use std::path::Path;

use skelevision_core::data::{write_synth_dataset, SynthConfig, TrainingData};
use skelevision_core::model::{is_backbone_param, load_checkpoint};
use skelevision_core::train::{read_records, sweep, train, RunRecord, TrainConfig, TrainMode};
use skelevision_core::Error;

fn small_data(dir: &Path) -> TrainingData {
    let cfg = SynthConfig {
        seed: 3,
        frame_size: 96,
        train_sequences: 2,
        frames_per_sequence: 18,
        test_sequences: 1,
        test_frames: 3,
        stills: 10,
        patch_side: 32,
    };
    write_synth_dataset(&cfg, dir).unwrap();
    TrainingData::load(dir).unwrap()
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        samples_per_epoch: 4,
        val_samples: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    cfg.model.backbone.channels = 8;
    cfg.warmup.epochs = 0;
    cfg
}

#[test]
fn stl_and_mtl_with_zero_weight_train_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let stl = small_config();
    let mtl = TrainConfig {
        mode: TrainMode::Mtl,
        ..small_config()
    };
    let (a, ra) = train(&stl, &data, None).unwrap();
    let (b, rb) = train(&mtl, &data, None).unwrap();
    assert_eq!(a.params, b.params);
    let losses = |r: &RunRecord| {
        r.epochs
            .iter()
            .map(|e| (e.train_loss, e.val_loss))
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&ra), losses(&rb));
    assert_ne!(ra.digest, rb.digest);
}

#[test]
fn training_is_deterministic_and_moves_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = small_config();
    let (a, ra) = train(&cfg, &data, None).unwrap();
    let (b, rb) = train(&cfg, &data, None).unwrap();
    assert_eq!(a.params, b.params);
    for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
        assert!((x.train_loss - y.train_loss).abs() <= 1e-6);
    }
    let init = skelevision_core::model::Model::init(cfg.model.clone(), cfg.seed).unwrap();
    assert_ne!(init.params, a.params);
    let other = TrainConfig { seed: 1, ..cfg };
    let (c, _) = train(&other, &data, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn keypoint_pretraining_freezes_everything_but_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = TrainConfig {
        mode: TrainMode::KptPretrain,
        learning_rate: 1e-2,
        ..small_config()
    };
    let init = skelevision_core::model::Model::init(cfg.model.clone(), cfg.seed).unwrap();
    let (m, rec) = train(&cfg, &data, None).unwrap();
    for (name, t) in &m.params {
        if name.starts_with("kpt.") {
            continue;
        }
        assert_eq!(t, &init.params[name], "{name} changed");
        if is_backbone_param(name) {
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = init.params[name]
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b);
        }
    }
    assert!(m
        .params
        .iter()
        .any(|(n, t)| n.starts_with("kpt.") && t != &init.params[n]));
    // selection is by validation keypoint loss
    assert!(rec
        .epochs
        .iter()
        .all(|e| e.val_miou.is_none() && e.val_kpt_loss.is_some()));
    assert_eq!(
        RunRecord::recompute_selection(&rec.epochs, TrainMode::KptPretrain),
        Some(rec.selected_epoch)
    );
}

#[test]
fn selected_epoch_matches_stored_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let cfg = TrainConfig {
        epochs: 3,
        ..small_config()
    };
    let out = dir.path().join("out");
    let (model, rec) = train(&cfg, &data, Some(&out)).unwrap();
    assert!(rec.epochs.iter().all(|e| e.val_miou.is_some()));
    assert_eq!(
        RunRecord::recompute_selection(&rec.epochs, TrainMode::Stl),
        Some(rec.selected_epoch)
    );
    let loaded = load_checkpoint(rec.checkpoint.as_ref().unwrap(), Some(&cfg.model)).unwrap();
    assert_eq!(loaded.params, model.params);
    assert_eq!(loaded.weights_digest(), rec.model_digest);
    // the log holds one line per epoch followed by the record
    let log = std::fs::read_to_string(rec.checkpoint.as_ref().unwrap().with_file_name("log.jsonl"))
        .unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    let last: RunRecord = serde_json::from_str(lines[3]).unwrap();
    assert_eq!(last, rec);
    assert_eq!(read_records(&out).unwrap(), vec![rec]);
}

#[test]
fn sweep_is_resumable_and_keys_runs_by_digest() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let out = dir.path().join("sweep");
    let mut base = small_config();
    base.epochs = 1;
    base.warmup.epochs = 1;

    let stl = sweep(&base, &[0.0], &data, &out, 1).unwrap();
    assert_eq!(stl.len(), 1);
    assert_eq!(stl[0].config.mode, TrainMode::Stl);

    let runs = sweep(&base, &[0.2, 1.0], &data, &out, 2).unwrap();
    assert_eq!(runs.len(), 2);
    assert_ne!(runs[0].digest, runs[1].digest);
    assert!(runs.iter().all(|r| r.config.mode == TrainMode::Mtl));
    assert_eq!(read_records(&out).unwrap().len(), 3);

    let stamp = |p: &Path| std::fs::metadata(p).unwrap().modified().unwrap();
    let before: Vec<_> = runs
        .iter()
        .map(|r| stamp(r.checkpoint.as_ref().unwrap()))
        .collect();
    let again = sweep(&base, &[0.2, 1.0], &data, &out, 1).unwrap();
    assert_eq!(again, runs);
    let after: Vec<_> = runs
        .iter()
        .map(|r| stamp(r.checkpoint.as_ref().unwrap()))
        .collect();
    assert_eq!(before, after);
    assert_eq!(read_records(&out).unwrap().len(), 3);
}

#[test]
fn divergence_aborts_and_keeps_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let out = dir.path().join("out");
    let cfg = TrainConfig {
        learning_rate: 1e30,
        ..small_config()
    };
    let err = train(&cfg, &data, Some(&out)).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    let ckpt = skelevision_core::train::RunPaths::for_config(&out, &cfg).checkpoint;
    let m = load_checkpoint(&ckpt, Some(&cfg.model)).unwrap();
    assert!(m.params.values().all(|t| t.all_finite()));
    assert!(read_records(&out).unwrap().is_empty());
}

#[test]
fn stl_with_keypoint_weight_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let mut cfg = small_config();
    cfg.loss.lambda_k = 0.5;
    assert!(matches!(train(&cfg, &data, None), Err(Error::Config(_))));
}
