//! Config-driven orchestration of the full workflow.
//!
//! Every subcommand reads an [`ExperimentConfig`], works inside
//! `<output_dir>/<arch>_<augmentation>/` and checks for the artifacts of the
//! steps it depends on. Stage seeds are derived from `global_seed` with
//! [`seed::stage_seed`] under the stage names listed in [`stage`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    archive::load_external_backbone, replace_head, Arch, BackboneConfig, BackboneModel, HeadInit,
};
use crate::data::{
    class_weights, generate_toy_corpus, scan_dataset, stratified_split, ClassWeights, Manifest, Origin, StrokeClass,
    ToyTruth, NUM_CLASSES, TOY_TRUTH_FILE,
};
use crate::error::{Error, Result};
use crate::evaluate::{render_report, EvalReport, ReportFormat};
use crate::gan::{self, GanConfig, GanState, MergeSelection};
use crate::preprocess::{load_and_resize, normalize, AugmentPolicy};
use crate::seed;
use crate::train::{self, Normalization, TrainConfig, TrainState};
use crate::xai::{self, CamVariant, LayerProbe, DEFAULT_ALPHA};

/// Stage names fed to [`seed::stage_seed`].
pub mod stage {
    pub const TOY: &str = "data/toy";
    pub const SPLIT: &str = "data/split";
    pub const GAN: &str = "gan";
    pub const BACKBONE_INIT: &str = "backbone/init";
    pub const TRAIN: &str = "train";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub enabled: bool,
    pub n_per_class: [usize; NUM_CLASSES],
    pub image_side: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_per_class: [200, 100, 100],
            image_side: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Corpus root with one directory per class. With the toy corpus
    /// enabled this is where it gets written (default `<output_dir>/toy_corpus`).
    pub root: Option<PathBuf>,
    pub train_fraction: f64,
    pub toy: ToyConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_fraction: 0.8,
            toy: ToyConfig::default(),
        }
    }
}

/// Input handling shared by training, evaluation and explanation. These
/// values replace the matching fields of the `train` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub augment_policy: AugmentPolicy,
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            augment_policy: AugmentPolicy::default(),
            normalization: Normalization::Scratch,
        }
    }
}

/// A fresh backbone from hyperparameters, or weights from an archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BackboneSource {
    External {
        arch: Arch,
        weights: PathBuf,
        /// Internal layer name → source-model layer name.
        #[serde(default)]
        aliases: IndexMap<String, String>,
    },
    Config(BackboneConfig),
}

impl Default for BackboneSource {
    fn default() -> Self {
        BackboneSource::Config(BackboneConfig::toy(Arch::Vit))
    }
}

impl BackboneSource {
    pub fn arch(&self) -> Arch {
        match self {
            BackboneSource::External { arch, .. } => *arch,
            BackboneSource::Config(c) => c.arch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XaiConfig {
    pub variant: CamVariant,
    /// Layer names to probe; empty picks early, middle and last spatial layers.
    pub probes: Vec<String>,
    pub alpha: f64,
    pub mass_fraction: f64,
    /// Number of test images explained (taken in manifest order).
    pub samples: usize,
}

impl Default for XaiConfig {
    fn default() -> Self {
        Self {
            variant: CamVariant::Gradcampp,
            probes: Vec::new(),
            alpha: DEFAULT_ALPHA,
            mass_fraction: 0.1,
            samples: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub gan: GanConfig,
    pub train: TrainConfig,
    pub backbone: BackboneSource,
    pub xai: XaiConfig,
    pub output_dir: PathBuf,
    pub global_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            gan: GanConfig::default(),
            train: TrainConfig::default(),
            backbone: BackboneSource::default(),
            xai: XaiConfig::default(),
            output_dir: PathBuf::from("runs"),
            global_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("train_fraction {f} outside (0, 1)")));
        }
        if !self.data.toy.enabled {
            match &self.data.root {
                None => return Err(Error::Config("data.root is required when the toy corpus is disabled".into())),
                Some(r) if !r.is_dir() => {
                    return Err(Error::Config(format!("data.root {} is not a directory", r.display())))
                }
                _ => {}
            }
        }
        if let BackboneSource::Config(c) = &self.backbone {
            c.validate()?;
        }
        if !(0.0..=1.0).contains(&self.xai.alpha) || !(self.xai.mass_fraction > 0.0 && self.xai.mass_fraction <= 1.0) {
            return Err(Error::Config("xai.alpha must be in [0, 1] and xai.mass_fraction in (0, 1]".into()));
        }
        self.gan.validate()?;
        self.effective_train().validate()
    }

    /// Training config with the preprocess section and stage seed applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            augment_policy: self.preprocess.augment_policy.clone(),
            normalization: self.preprocess.normalization,
            seed: seed::stage_seed(self.global_seed, stage::TRAIN),
            ..self.train.clone()
        }
    }

    pub fn run_tag(&self) -> String {
        format!("{}_{}", self.backbone.arch().name(), self.train.augmentation.tag())
    }

    pub fn corpus_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .unwrap_or_else(|| self.output_dir.join("toy_corpus"))
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.output_dir.join(self.run_tag()))
    }
}

/// Directory layout of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
    pub manifests: PathBuf,
    pub gan: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
    pub xai: PathBuf,
    pub report: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            manifests: root.join("manifests"),
            gan: root.join("gan"),
            checkpoints: root.join("checkpoints"),
            metrics: root.join("metrics"),
            xai: root.join("xai"),
            report: root.join("report"),
        }
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.manifests.join("manifest_train.csv")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.manifests.join("manifest_test.csv")
    }

    pub fn merged_manifest(&self) -> PathBuf {
        self.manifests.join("manifest_train_cgan.csv")
    }

    pub fn weights(&self) -> PathBuf {
        self.manifests.join("weights.json")
    }

    pub fn gan_checkpoint(&self) -> PathBuf {
        self.gan.join(gan::CHECKPOINT_FILE)
    }

    pub fn gan_losses(&self) -> PathBuf {
        self.gan.join("loss_history.csv")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("best.bin")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("last.bin")
    }

    pub fn history(&self) -> PathBuf {
        self.checkpoints.join("history.csv")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.metrics.join("metrics.json")
    }

    pub fn confusion_csv(&self) -> PathBuf {
        self.metrics.join("confusion_matrix.csv")
    }

    pub fn xai_summary(&self) -> PathBuf {
        self.xai.join("xai_summary.json")
    }

    pub fn report_md(&self) -> PathBuf {
        self.report.join("report.md")
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(run_dir: &Path) -> Result<Self> {
        mkdir(run_dir)?;
        let path = run_dir.join(Self::FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(run_dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn require(path: &Path, step: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite {
            path: path.to_path_buf(),
            step: step.into(),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn weights_json(w: &ClassWeights) -> IndexMap<String, f64> {
    StrokeClass::ALL
        .iter()
        .map(|c| (c.dir_name().to_string(), w.get(*c)))
        .collect()
}

fn read_weights(path: &Path) -> Result<ClassWeights> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: IndexMap<String, f64> = serde_json::from_str(&text)?;
    let mut w = [0.0; NUM_CLASSES];
    for c in StrokeClass::ALL {
        w[c.id()] = *map
            .get(c.dir_name())
            .ok_or_else(|| Error::Config(format!("{} lacks a weight for `{}`", path.display(), c.dir_name())))?;
    }
    Ok(ClassWeights(w))
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Manifest,
    pub test: Manifest,
    pub weights: ClassWeights,
}

/// Builds (or scans) the corpus, splits it and writes the manifests and
/// class weights.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    let root = cfg.corpus_root();
    let corpus = if cfg.data.toy.enabled {
        let t = &cfg.data.toy;
        generate_toy_corpus(&root, t.n_per_class, t.image_side, seed::stage_seed(cfg.global_seed, stage::TOY))?
    } else {
        scan_dataset(&root)?
    };
    for s in corpus.skipped() {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    let (train, test) = stratified_split(&corpus, cfg.data.train_fraction, seed::stage_seed(cfg.global_seed, stage::SPLIT))?;
    let weights = class_weights(&train)?;
    mkdir(&run.manifests)?;
    train.write_csv(&run.train_manifest())?;
    test.write_csv(&run.test_manifest())?;
    write_json(&run.weights(), &weights_json(&weights))?;
    log::info!(
        "prepared {} train / {} test records under {}",
        train.len(),
        test.len(),
        run.manifests.display()
    );
    Ok(Prepared { train, test, weights })
}

pub fn write_gan_losses(path: &Path, state: &GanState) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "gen_loss",
        "disc_loss",
        "disc_accuracy",
        "mean_normal",
        "mean_hemorrhagic",
        "mean_ischemic",
    ])?;
    for e in &state.loss_history {
        let mut row = vec![e.epoch.to_string(), e.gen_loss.to_string(), e.disc_loss.to_string(), e.disc_accuracy.to_string()];
        row.extend(e.class_means.iter().map(|m| m.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains the cGAN on the training manifest. The `gan/` directory is
/// cleared first so stale synthetic images never leak into a merge.
pub fn cmd_train_gan(cfg: &ExperimentConfig) -> Result<GanState> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    require(&run.train_manifest(), "prepare")?;
    let train = Manifest::read_csv(&run.train_manifest())?;
    if run.gan.exists() {
        fs::remove_dir_all(&run.gan).map_err(|e| Error::io(&run.gan, e))?;
    }
    let state = gan::train_cgan(&train, &cfg.gan, seed::stage_seed(cfg.global_seed, stage::GAN), &run.gan)?;
    write_gan_losses(&run.gan_losses(), &state)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub gan_epoch: usize,
    pub selection: MergeSelection,
    pub added: IndexMap<String, usize>,
    pub merged_counts: IndexMap<String, usize>,
}

/// Merges the images saved during the generation phase into a new
/// training manifest (`manifest_train_cgan.csv`).
pub fn cmd_synthesize(cfg: &ExperimentConfig) -> Result<SynthesisSummary> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    require(&run.train_manifest(), "prepare")?;
    require(&run.gan_checkpoint(), "train-gan")?;
    let state = gan::load_gan_checkpoint(&run.gan_checkpoint())?;
    let train = Manifest::read_csv(&run.train_manifest())?;
    let merged = gan::merge_synthetic(&train, &run.gan, cfg.gan.merge_count_per_class)?;
    merged.write_csv(&run.merged_manifest())?;
    let added = StrokeClass::ALL
        .iter()
        .map(|c| {
            let n = merged
                .records()
                .iter()
                .filter(|r| r.label == *c && r.origin == Origin::Synthetic)
                .count();
            (c.dir_name().to_string(), n)
        })
        .collect();
    let merged_counts = StrokeClass::ALL
        .iter()
        .map(|c| (c.dir_name().to_string(), merged.count(*c)))
        .collect();
    let summary = SynthesisSummary {
        gan_epoch: state.epoch,
        selection: cfg.gan.merge_count_per_class,
        added,
        merged_counts,
    };
    write_json(&run.manifests.join("synthesis_summary.json"), &summary)?;
    Ok(summary)
}

/// Fresh or externally initialised backbone with a new 3-class head.
pub fn build_backbone(cfg: &ExperimentConfig) -> Result<BackboneModel> {
    let init_seed = seed::stage_seed(cfg.global_seed, stage::BACKBONE_INIT);
    match &cfg.backbone {
        BackboneSource::Config(c) => BackboneModel::new(c.clone(), init_seed),
        BackboneSource::External { arch, weights, aliases } => {
            let mut m = load_external_backbone(*arch, weights, aliases)?;
            replace_head(&mut m, NUM_CLASSES, HeadInit::TruncNormal, init_seed);
            Ok(m)
        }
    }
}

/// Fine-tunes the backbone and writes `best.bin`, `last.bin` and the
/// per-epoch history.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainState> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    require(&run.test_manifest(), "prepare")?;
    let train_path = if cfg.train.augmentation.synthetic() {
        require(&run.merged_manifest(), "synthesize")?;
        run.merged_manifest()
    } else {
        require(&run.train_manifest(), "prepare")?;
        run.train_manifest()
    };
    let train = Manifest::read_csv(&train_path)?;
    let test = Manifest::read_csv(&run.test_manifest())?;
    let tcfg = cfg.effective_train();
    let state = train::fit(&train, &test, build_backbone(cfg)?, &tcfg)?;
    if let Some(why) = &state.aborted {
        log::warn!("training stopped early ({why}); best checkpoint is from epoch {}", state.best.epoch);
    }
    mkdir(&run.checkpoints)?;
    train::save_checkpoint(&run.best_checkpoint(), &state.best_model(), &tcfg, &state.history, state.best.epoch)?;
    train::save_checkpoint(&run.last_checkpoint(), &state.model, &tcfg, &state.history, state.epoch)?;
    train::write_history_csv(&run.history(), &state.history)?;
    Ok(state)
}

fn model_tag(arch: Arch) -> &'static str {
    match arch {
        Arch::Vit => "ViT",
        Arch::Tnt => "TNT",
        Arch::Convnext => "ConvNeXt",
        Arch::Maxvit => "MaxViT",
    }
}

/// Scores the best checkpoint on the test manifest.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    require(&run.test_manifest(), "prepare")?;
    require(&run.weights(), "prepare")?;
    require(&run.best_checkpoint(), "train")?;
    let model = BackboneModel::load(&run.best_checkpoint())?;
    let test = Manifest::read_csv(&run.test_manifest())?;
    let weights = if cfg.train.use_class_weights {
        read_weights(&run.weights())?
    } else {
        ClassWeights::uniform()
    };
    let preds = train::predict(&model, &test, cfg.preprocess.normalization)?;
    let (loss, _) = train::summarize(&preds, &weights)?;
    let report = EvalReport::from_predictions(model_tag(model.config().arch), cfg.train.augmentation.tag(), &preds, loss)?;
    mkdir(&run.metrics)?;
    report.write_json(&run.metrics_json())?;
    report.cm.write_csv(&run.confusion_csv())?;
    let mut w = csv::Writer::from_path(run.metrics.join("predictions.csv"))?;
    w.write_record(["path", "label", "predicted", "p_normal", "p_hemorrhagic", "p_ischemic"])?;
    for (p, r) in preds.iter().zip(test.records()) {
        let mut row = vec![
            r.path.display().to_string(),
            p.label.dir_name().to_string(),
            p.predicted.dir_name().to_string(),
        ];
        row.extend(p.probabilities.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&run.metrics, e))?;
    log::info!("test accuracy {:.4}, loss {:.4}", report.accuracy(), report.loss);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: LayerProbe,
    pub overlay: PathBuf,
    pub heatmap: PathBuf,
    pub degenerate: bool,
    /// Heat mass inside the lesion box (toy corpus lesions only).
    pub localization: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainedImage {
    pub path: PathBuf,
    pub label: StrokeClass,
    pub predicted: StrokeClass,
    pub probes: Vec<ProbeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XaiSummary {
    pub variant: CamVariant,
    pub mass_fraction: f64,
    pub images: Vec<ExplainedImage>,
    /// Mean localization per probe layer over images that have a box.
    pub mean_localization: IndexMap<String, f64>,
}

fn scale_box(b: &crate::data::BoundingBox, from: usize, to: usize) -> crate::data::BoundingBox {
    let lo = |v: usize| v * to / from;
    let hi = |v: usize| (v * to).div_ceil(from).min(to);
    crate::data::BoundingBox {
        x0: lo(b.x0),
        y0: lo(b.y0),
        x1: hi(b.x1),
        y1: hi(b.y1),
    }
}

/// Heatmap overlays for the first `xai.samples` test images at each probe,
/// explaining the predicted class.
pub fn cmd_explain(cfg: &ExperimentConfig) -> Result<XaiSummary> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    require(&run.test_manifest(), "prepare")?;
    require(&run.best_checkpoint(), "train")?;
    let model = BackboneModel::load(&run.best_checkpoint())?;
    let test = Manifest::read_csv(&run.test_manifest())?;
    let probes: Vec<LayerProbe> = if cfg.xai.probes.is_empty() {
        xai::resolve_probes(&model)?.to_vec()
    } else {
        xai::probes_from_names(&model, &cfg.xai.probes)?
    };
    let truth_path = cfg.corpus_root().join(TOY_TRUTH_FILE);
    let truth = if truth_path.is_file() {
        Some(ToyTruth::load(&truth_path)?)
    } else {
        None
    };
    let side = model.config().image_side;
    let (mean, std) = cfg.preprocess.normalization.stats();
    mkdir(&run.xai)?;
    let mut images = Vec::new();
    let mut sums: IndexMap<String, (f64, usize)> = IndexMap::new();
    for r in test.records().iter().take(cfg.xai.samples) {
        let unit = load_and_resize(&r.path, side)?;
        let input = normalize(&unit, mean, std)?;
        let probs = train::softmax(&model.logits(&input)?)?;
        let predicted = StrokeClass::from_id(argmax(&probs)).expect("class id");
        let bbox = truth
            .as_ref()
            .and_then(|t| t.lookup(&r.path).map(|e| scale_box(&e.bbox, t.image_size, side)));
        let stem = format!(
            "{}_{}",
            r.label.dir_name(),
            r.path.file_stem().and_then(|s| s.to_str()).unwrap_or("image")
        );
        let mut results = Vec::new();
        for probe in &probes {
            let h = xai::explain(&model, &input, predicted, probe, cfg.xai.variant)?;
            let name = format!("heatmap_{stem}_{}_{}", probe.layer_name, predicted.dir_name());
            let overlay = run.xai.join(format!("{name}.png"));
            let grid = run.xai.join(format!("{name}.csv"));
            xai::write_png(&xai::overlay(&h, &unit, cfg.xai.alpha)?, &overlay)?;
            xai::write_heatmap_grid(&h, &grid)?;
            let localization = bbox
                .as_ref()
                .map(|b| xai::localization_score(&h, b, cfg.xai.mass_fraction))
                .transpose()?;
            if let Some(s) = localization {
                let e = sums.entry(probe.layer_name.clone()).or_default();
                e.0 += s;
                e.1 += 1;
            }
            results.push(ProbeResult {
                probe: probe.clone(),
                overlay,
                heatmap: grid,
                degenerate: h.degenerate,
                localization,
            });
        }
        images.push(ExplainedImage {
            path: r.path.clone(),
            label: r.label,
            predicted,
            probes: results,
        });
    }
    let summary = XaiSummary {
        variant: cfg.xai.variant,
        mass_fraction: cfg.xai.mass_fraction,
        images,
        mean_localization: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    };
    write_json(&run.xai_summary(), &summary)?;
    Ok(summary)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Collects every `metrics.json` under `output_dir` (one per run tag, in
/// directory order) and writes `report.md` plus `report.json`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let run = cfg.layout();
    let _lock = RunLock::acquire(&run.root)?;
    let mut runs: Vec<PathBuf> = fs::read_dir(&cfg.output_dir)
        .map_err(|e| Error::io(&cfg.output_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| RunLayout::new(p).metrics_json().is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Error::MissingPrerequisite {
            path: run.metrics_json(),
            step: "evaluate".into(),
        });
    }
    let reports = runs
        .iter()
        .map(|p| EvalReport::read_json(&RunLayout::new(p).metrics_json()))
        .collect::<Result<Vec<_>>>()?;
    let table = render_report(&reports, ReportFormat::Table)?;
    mkdir(&run.report)?;
    fs::write(run.report_md(), &table).map_err(|e| Error::io(run.report_md(), e))?;
    let json = render_report(&reports, ReportFormat::Json)?;
    let jp = run.report.join("report.json");
    fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
    Ok(table)
}

/// The seven steps in order (`train-gan` and `synthesize` only when the
/// augmentation uses synthetic images).
pub fn run_all(cfg: &ExperimentConfig) -> Result<String> {
    cmd_prepare(cfg)?;
    if cfg.train.augmentation.synthetic() {
        cmd_train_gan(cfg)?;
        cmd_synthesize(cfg)?;
    }
    cmd_train(cfg)?;
    cmd_evaluate(cfg)?;
    cmd_explain(cfg)?;
    cmd_report(cfg)
}
