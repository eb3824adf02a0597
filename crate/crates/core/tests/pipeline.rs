use std::fs;
use std::path::Path;

use stroke_core::backbones::{Arch, BackboneConfig};
use stroke_core::data::{Manifest, Origin, StrokeClass};
use stroke_core::evaluate::EvalReport;
use stroke_core::gan::GanConfig;
use stroke_core::pipeline::{
    cmd_evaluate, cmd_explain, cmd_prepare, cmd_report, cmd_synthesize, cmd_train, cmd_train_gan,
    BackboneSource, ExperimentConfig, RunLayout, RunLock,
};
use stroke_core::train::{Augmentation, TrainConfig};
use stroke_core::Error;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        output_dir: out.to_path_buf(),
        global_seed: 17,
        ..ExperimentConfig::default()
    };
    cfg.data.toy.n_per_class = [15, 10, 10];
    cfg.data.toy.image_side = 32;
    cfg.backbone = BackboneSource::Config(BackboneConfig {
        image_side: 32,
        embed_dim: 16,
        depth: 2,
        ..BackboneConfig::toy(Arch::Vit)
    });
    cfg.train = TrainConfig {
        epochs: 1,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    cfg.gan = GanConfig {
        noise_dim: 8,
        gen_image_side: 32,
        stabilization_epochs: 0,
        generation_epochs: 1,
        images_per_generation_epoch: 2,
        batch_size: 4,
        gen_channels: 8,
        disc_channels: 4,
        label_embed_dim: 4,
        monitor_samples: 1,
        ..GanConfig::default()
    };
    cfg
}

fn step_of(r: Result<impl std::fmt::Debug, Error>) -> String {
    match r {
        Err(Error::MissingPrerequisite { step, .. }) => step,
        other => panic!("expected a missing prerequisite, got {other:?}"),
    }
}

#[test]
fn prepare_splits_default_toy_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data.toy.n_per_class = [200, 100, 100];
    let p = cmd_prepare(&cfg).unwrap();
    assert_eq!(p.train.len() + p.test.len(), 400);
    assert_eq!(p.train.class_counts(), [160, 80, 80]);
    assert_eq!(p.test.class_counts(), [40, 20, 20]);
    let run = cfg.layout();
    assert_eq!(Manifest::read_csv(&run.train_manifest()).unwrap().records(), p.train.records());
    let w: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.weights()).unwrap()).unwrap();
    assert!((w["normal"].as_f64().unwrap() - 320.0 / 480.0).abs() < 1e-12);
    assert!(!run.root.join(RunLock::FILE).exists());
}

#[test]
fn disabled_toy_without_root_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.data.toy.enabled = false;
    assert!(matches!(cmd_prepare(&cfg), Err(Error::Config(_))));
}

#[test]
fn steps_name_their_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    assert_eq!(step_of(cmd_train(&cfg)), "prepare");
    assert_eq!(step_of(cmd_train_gan(&cfg)), "prepare");
    assert_eq!(step_of(cmd_evaluate(&cfg)), "prepare");
    assert_eq!(step_of(cmd_report(&cfg)), "evaluate");
    cmd_prepare(&cfg).unwrap();
    assert_eq!(step_of(cmd_evaluate(&cfg)), "train");
    assert_eq!(step_of(cmd_explain(&cfg)), "train");
    assert_eq!(step_of(cmd_synthesize(&cfg)), "train-gan");
    // synthetic runs live in their own directory
    cfg.train.augmentation = Augmentation::Cgan;
    assert_eq!(step_of(cmd_train(&cfg)), "prepare");
    cmd_prepare(&cfg).unwrap();
    assert_eq!(step_of(cmd_train(&cfg)), "synthesize");
}

#[test]
fn held_lock_blocks_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let _held = RunLock::acquire(&cfg.layout().root).unwrap();
    assert!(matches!(cmd_prepare(&cfg), Err(Error::Locked(_))));
    assert!(matches!(RunLock::acquire(&cfg.layout().root), Err(Error::Locked(_))));
}

#[test]
fn gan_steps_write_losses_and_merge() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.augmentation = Augmentation::Cgan;
    cfg.gan.merge_count_per_class = stroke_core::gan::MergeSelection::All;
    cmd_prepare(&cfg).unwrap();
    let state = cmd_train_gan(&cfg).unwrap();
    assert_eq!(state.images_written, 2);
    let run = cfg.layout();
    let csv = fs::read_to_string(run.gan_losses()).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("epoch,gen_loss,disc_loss,disc_accuracy,"));

    let s = cmd_synthesize(&cfg).unwrap();
    assert_eq!(s.added["hemorrhagic"], 1);
    assert_eq!(s.added["ischemic"], 1);
    assert_eq!(s.added["normal"], 0);
    let merged = Manifest::read_csv(&run.merged_manifest()).unwrap();
    assert_eq!(merged.records().iter().filter(|r| r.origin == Origin::Synthetic).count(), 2);

    // a stray synthetic normal image poisons the merge
    let normal = run.gan.join(StrokeClass::Normal.dir_name());
    fs::create_dir_all(&normal).unwrap();
    fs::copy(
        &merged.records().iter().find(|r| r.origin == Origin::Synthetic).unwrap().path,
        normal.join("x.png"),
    )
    .unwrap();
    assert!(matches!(cmd_synthesize(&cfg), Err(Error::PolicyViolation(_))));
}

#[test]
fn train_evaluate_explain_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_prepare(&cfg).unwrap();
    let state = cmd_train(&cfg).unwrap();
    let run = cfg.layout();
    assert_eq!(state.history.len(), 1);
    for p in [run.best_checkpoint(), run.last_checkpoint(), run.history()] {
        assert!(p.is_file(), "{}", p.display());
    }

    let report = cmd_evaluate(&cfg).unwrap();
    assert_eq!(EvalReport::read_json(&run.metrics_json()).unwrap(), report);
    assert!((0.0..=1.0).contains(&report.accuracy()));
    assert_eq!(fs::read_to_string(run.confusion_csv()).unwrap().lines().count(), 4);

    let xai = cmd_explain(&cfg).unwrap();
    assert_eq!(xai.images.len(), 5);
    let pngs = fs::read_dir(&run.xai)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 15);
    for img in &xai.images {
        assert_eq!(img.probes.len(), 3);
        for p in &img.probes {
            assert!(p.heatmap.is_file());
            let name = p.overlay.file_name().unwrap().to_string_lossy().into_owned();
            assert!(name.starts_with("heatmap_") && name.ends_with(&format!("_{}.png", img.predicted.dir_name())));
        }
    }
    assert!(run.xai_summary().is_file());

    for tag in ["other_a", "other_b"] {
        let layout = RunLayout::new(&dir.path().join(tag));
        fs::create_dir_all(&layout.metrics).unwrap();
        report.write_json(&layout.metrics_json()).unwrap();
    }
    let table = cmd_report(&cfg).unwrap();
    assert_eq!(table.lines().count(), 5);
    assert!(run.report_md().is_file());
}
