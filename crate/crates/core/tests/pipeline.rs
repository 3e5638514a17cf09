mod common;

use std::fs;
use std::path::Path;
use std::time::Duration;

use common::tiny_run_config;
use usad_core::pipeline::{file_digest, run_ablation, Run};
use usad_core::Error;

fn log_rows(run: &Run) -> Vec<Vec<String>> {
    run.log().read().unwrap()
}

fn modified(p: &Path) -> std::time::SystemTime {
    fs::metadata(p).unwrap().modified().unwrap()
}

#[test]
fn all_stages_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(tiny_run_config(1), dir.path()).unwrap();
    let out = run.run_all().unwrap();
    for f in ["resolved.cfg", "data/train.csv", "data/val.csv", "data/test.csv", "stage1.ckpt", "synthetic.csv",
        "stage2.ckpt", "stage3.ckpt", "metrics.csv", "radar.csv", "log.csv"]
    {
        assert!(run.path(f).exists(), "{f}");
    }
    let (first, last) = (out.records[0].loss, out.records.last().unwrap().loss);
    assert!(last < first, "fine-tune loss {first} -> {last}");
    assert!(out.records.iter().all(|r| (r.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9));

    let stages: Vec<String> = log_rows(&run).iter().map(|r| r[0].clone()).collect();
    for s in ["diffusion", "pretrain", "finetune"] {
        assert_eq!(stages.iter().filter(|x| *x == s).count(), if s == "finetune" { 8 } else { 2 }, "{s}");
    }
    let radar = fs::read_to_string(run.path("radar.csv")).unwrap();
    assert_eq!(radar.lines().count(), 7);
}

#[test]
fn augmentation_off_skips_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(2);
    cfg.augmentation = false;
    let run = Run::new(cfg, dir.path()).unwrap();
    run.run_all().unwrap();
    assert!(!run.path("synthetic.csv").exists());
    assert!(!run.path("stage1.ckpt").exists());
    let rows = log_rows(&run);
    for s in ["diffusion", "pretrain"] {
        let stage: Vec<_> = rows.iter().filter(|r| r[0] == s).collect();
        assert_eq!(stage.len(), 1);
        assert!(stage[0].contains(&"skipped".to_string()), "{stage:?}");
    }
}

#[test]
fn synth_count_follows_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(3);
    let run = Run::new(cfg.clone(), dir.path()).unwrap();
    let prep = run.prepare().unwrap();
    assert_eq!(run.synth_count(&prep), prep.train.len());
    cfg.synth_m = Some(0);
    let run = Run::new(cfg.clone(), dir.path()).unwrap();
    assert_eq!(run.synth_count(&prep), 0);
    cfg.synth_m = Some(9);
    cfg.augmentation = false;
    assert_eq!(Run::new(cfg, dir.path()).unwrap().synth_count(&prep), 0);
}

#[test]
fn resume_reuses_matching_checkpoints_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run_config(4);
    cfg.resume = true;
    let first = Run::new(cfg.clone(), dir.path()).unwrap().run_all().unwrap();
    let ck = dir.path().join("stage1.ckpt");
    let (t1, d1) = (modified(&ck), file_digest(&ck).unwrap());
    std::thread::sleep(Duration::from_millis(20));

    let again = Run::new(cfg.clone(), dir.path()).unwrap().run_all().unwrap();
    assert_eq!(modified(&ck), t1, "matching stage 1 checkpoint was rewritten");
    assert_eq!(again.test, first.test);

    cfg.diffusion.epochs = 3;
    Run::new(cfg, dir.path()).unwrap().run_all().unwrap();
    assert_ne!(modified(&ck), t1);
    assert_ne!(file_digest(&ck).unwrap(), d1);
}

#[test]
fn checkpoint_from_other_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    Run::new(tiny_run_config(5), dir.path()).unwrap().run_all().unwrap();

    let mut cfg = tiny_run_config(6);
    let run = Run::new(cfg.clone(), dir.path()).unwrap();
    let prep = run.prepare().unwrap();
    match run.load_stage2(&prep) {
        Err(Error::HashMismatch { expected, found }) => assert_ne!(expected, found),
        other => panic!("expected a hash mismatch, got {:?}", other.map(|m| m.kind())),
    }
    assert!(run.load_stage3(&prep).is_err());
    cfg.force = true;
    assert!(Run::new(cfg, dir.path()).unwrap().load_stage2(&prep).is_ok());
}

#[test]
fn missing_stage_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(tiny_run_config(7), dir.path()).unwrap();
    let err = run.load_prepared().unwrap_err();
    assert!(err.is_user_error());
    assert!(err.to_string().contains("prepare"), "{err}");
    let prep = run.prepare().unwrap();
    let err = run.load_stage1(&prep).err().expect("no stage 1 checkpoint yet");
    assert!(err.to_string().contains("train-diffusion"));
    assert!(run.load_synthetic().unwrap().is_none());
}

#[test]
fn ablation_grid_shares_seed_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let toggles = vec!["spatial_attn".to_string(), "augmentation".to_string()];
    let rows = run_ablation(&tiny_run_config(8), &toggles, dir.path()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.seed == 8 && r.data_hash == rows[0].data_hash));
    assert_eq!(rows[0].settings, vec![("spatial_attn".into(), true), ("augmentation".into(), true)]);
    assert_eq!(rows[3].settings, vec![("spatial_attn".into(), false), ("augmentation".into(), false)]);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("spatial_attn,augmentation,seed,data_hash,Acc"));

    let bad = run_ablation(&tiny_run_config(8), &["dropout".to_string()], dir.path()).unwrap_err();
    assert!(bad.to_string().contains("unknown toggle"));
}
