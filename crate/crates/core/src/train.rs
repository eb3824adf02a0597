//! Transfer-learning loop: class-weighted cross-entropy, Adam, per-epoch
//! evaluation and best-checkpoint retention.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use stroke_autograd::{Adam, AdamConfig, Graph, ParamSet, Tensor};

use crate::backbones::{apply_freeze, BackboneModel, ForwardMode, FreezeMode};
use crate::data::{class_weights, ClassWeights, Manifest, StrokeClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::preprocess::{
    augment, load_and_resize, normalize, AugmentPolicy, ImageTensor, PRETRAINED_MEAN,
    PRETRAINED_STD, SCRATCH_MEAN, SCRATCH_STD,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Augmentation {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "classical")]
    Classical,
    #[serde(rename = "cgan")]
    Cgan,
    #[serde(rename = "classical+cgan")]
    ClassicalCgan,
}

impl Augmentation {
    pub fn tag(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::Classical => "classical",
            Augmentation::Cgan => "cgan",
            Augmentation::ClassicalCgan => "classical+cgan",
        }
    }

    pub fn classical(self) -> bool {
        matches!(self, Augmentation::Classical | Augmentation::ClassicalCgan)
    }

    pub fn synthetic(self) -> bool {
        matches!(self, Augmentation::Cgan | Augmentation::ClassicalCgan)
    }
}

impl std::str::FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "classical" => Ok(Self::Classical),
            "cgan" => Ok(Self::Cgan),
            "classical+cgan" => Ok(Self::ClassicalCgan),
            other => Err(Error::Config(format!("unknown augmentation `{other}`"))),
        }
    }
}

/// Channel statistics used to standardise inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Scratch,
    Pretrained,
}

impl Normalization {
    pub fn stats(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Normalization::Scratch => (SCRATCH_MEAN, SCRATCH_STD),
            Normalization::Pretrained => (PRETRAINED_MEAN, PRETRAINED_STD),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub freeze_mode: FreezeMode,
    pub use_class_weights: bool,
    pub augmentation: Augmentation,
    pub augment_policy: AugmentPolicy,
    pub normalization: Normalization,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 3e-4,
            batch_size: 32,
            epochs: 50,
            dropout: 0.04,
            freeze_mode: FreezeMode::Full,
            use_class_weights: true,
            augmentation: Augmentation::None,
            augment_policy: AugmentPolicy::default(),
            normalization: Normalization::Scratch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.augment_policy.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub eval_accuracy: f64,
    pub params: ParamSet,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Model after the last completed epoch.
    pub model: BackboneModel,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Best epoch by eval accuracy (ties go to the later epoch).
    pub best: Checkpoint,
    /// Set when training stopped on a non-finite loss; `best` then holds
    /// the last good checkpoint.
    pub aborted: Option<String>,
}

impl TrainState {
    pub fn best_model(&self) -> BackboneModel {
        let mut m = self.model.clone();
        *m.params_mut() = self.best.params.clone();
        m
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

fn log_softmax_at(logits: &[f64], k: usize) -> Result<f64> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits {logits:?}")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(logits[k] - lse)
}

/// `−w_label · log softmax(logits)_label` for one sample.
pub fn weighted_cross_entropy(logits: &[f64], label: StrokeClass, weights: &ClassWeights) -> Result<f64> {
    if logits.len() != NUM_CLASSES {
        return Err(Error::Input(format!("expected {NUM_CLASSES} logits, got {}", logits.len())));
    }
    Ok(-weights.get(label) * log_softmax_at(logits, label.id())?)
}

/// Weighted-mean batch loss `Σ w_i·ℓ_i / Σ w_i`.
pub fn batch_loss(batch: &[(Vec<f64>, StrokeClass)], weights: &ClassWeights) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (logits, label) in batch {
        num += weighted_cross_entropy(logits, *label, weights)?;
        den += weights.get(*label);
    }
    if den <= 0.0 {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(num / den)
}

/// Analytic gradient of [`batch_loss`] with respect to each sample's
/// logits: `w·(softmax − onehot) / Σ w`.
pub fn batch_loss_grad(batch: &[(Vec<f64>, StrokeClass)], weights: &ClassWeights) -> Result<Vec<Vec<f64>>> {
    let den: f64 = batch.iter().map(|(_, l)| weights.get(*l)).sum();
    batch
        .iter()
        .map(|(logits, label)| {
            let p = softmax(logits)?;
            let w = weights.get(*label) / den;
            Ok(p.iter()
                .enumerate()
                .map(|(k, &pk)| w * (pk - if k == label.id() { 1.0 } else { 0.0 }))
                .collect())
        })
        .collect()
}

/// Unit-range images of a manifest at the model's input side, decoded once.
pub fn load_images(m: &Manifest, side: usize) -> Result<Vec<ImageTensor>> {
    m.records().iter().map(|r| load_and_resize(&r.path, side)).collect()
}

fn model_input(
    img: &ImageTensor,
    cfg: &TrainConfig,
    augment_seed: Option<u64>,
) -> Result<Tensor> {
    let img = match augment_seed {
        Some(s) if cfg.augmentation.classical() => augment(img, &cfg.augment_policy, s)?,
        _ => img.clone(),
    };
    let (mean, std) = cfg.normalization.stats();
    Ok(normalize(&img, mean, std)?.to_tensor())
}

/// Per-sample prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: StrokeClass,
    pub predicted: StrokeClass,
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Eval-mode predictions over preloaded images.
pub fn predict_images(
    model: &BackboneModel,
    images: &[ImageTensor],
    labels: &[StrokeClass],
    normalization: Normalization,
) -> Result<Vec<Prediction>> {
    let (mean, std) = normalization.stats();
    images
        .iter()
        .zip(labels)
        .map(|(img, &label)| {
            let logits = model.logits(&normalize(img, mean, std)?)?;
            let probabilities = softmax(&logits)?;
            let predicted = StrokeClass::from_id(argmax(&logits)).expect("three logits");
            Ok(Prediction {
                label,
                predicted,
                probabilities,
                logits,
            })
        })
        .collect()
}

pub fn predict(model: &BackboneModel, m: &Manifest, normalization: Normalization) -> Result<Vec<Prediction>> {
    let images = load_images(m, model.config().image_side)?;
    let labels: Vec<StrokeClass> = m.records().iter().map(|r| r.label).collect();
    predict_images(model, &images, &labels, normalization)
}

/// Weighted-mean loss and accuracy of a prediction set.
pub fn summarize(preds: &[Prediction], weights: &ClassWeights) -> Result<(f64, f64)> {
    let batch: Vec<(Vec<f64>, StrokeClass)> = preds.iter().map(|p| (p.logits.clone(), p.label)).collect();
    let loss = batch_loss(&batch, weights)?;
    let correct = preds.iter().filter(|p| p.label == p.predicted).count();
    Ok((loss, correct as f64 / preds.len() as f64))
}

fn accumulate(total: &mut IndexMap<String, Tensor>, grads: IndexMap<String, Tensor>) {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                total.insert(name, g);
            }
        }
    }
}

/// Trains `backbone` (head already in place) on `train`, evaluating on
/// `test` after every epoch.
pub fn fit(train: &Manifest, test: &Manifest, backbone: BackboneModel, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("train and test manifests must be non-empty".into()));
    }
    let train_paths: HashSet<_> = train.records().iter().map(|r| &r.path).collect();
    if let Some(r) = test.records().iter().find(|r| train_paths.contains(&r.path)) {
        return Err(Error::Input(format!("{} appears in both train and test", r.path.display())));
    }
    let side = backbone.config().image_side;
    let train_imgs = load_images(train, side)?;
    let test_imgs = load_images(test, side)?;
    fit_images(train, &train_imgs, test, &test_imgs, backbone, cfg)
}

/// [`fit`] over preloaded unit-range images (index-aligned with the manifests).
pub fn fit_images(
    train: &Manifest,
    train_imgs: &[ImageTensor],
    test: &Manifest,
    test_imgs: &[ImageTensor],
    mut model: BackboneModel,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if train_imgs.len() != train.len() || test_imgs.len() != test.len() || train.is_empty() || test.is_empty() {
        return Err(Error::Input("image and manifest lengths differ or are empty".into()));
    }
    model.set_dropout(cfg.dropout)?;
    apply_freeze(&mut model, cfg.freeze_mode);
    let weights = if cfg.use_class_weights {
        class_weights(train)?
    } else {
        ClassWeights::uniform()
    };
    let train_labels: Vec<StrokeClass> = train.records().iter().map(|r| r.label).collect();
    let test_labels: Vec<StrokeClass> = test.records().iter().map(|r| r.label).collect();

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let shuffle_seed = seed::stage_seed(cfg.seed, "train/shuffle");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = Checkpoint {
        epoch: 0,
        eval_accuracy: f64::NEG_INFINITY,
        params: model.params().clone(),
    };
    let mut aborted = None;
    let mut epoch_done = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seed::rng(seed::mix(&[shuffle_seed, epoch as u64])));
        let (mut loss_num, mut loss_den, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let den: f64 = batch.iter().map(|&i| weights.get(train_labels[i])).sum();
            let mut grads = IndexMap::new();
            for &i in batch {
                let sample_seed = seed::mix(&[cfg.seed, epoch as u64, i as u64]);
                let x_t = model_input(&train_imgs[i], cfg, Some(sample_seed))?;
                let label = train_labels[i];
                let mut g = Graph::new();
                let x = g.constant(x_t);
                let out = model.forward(&mut g, x, ForwardMode::Train { seed: sample_seed ^ 0xD50 })?;
                let logits = g.value(out.logits).data().to_vec();
                let ls = g.log_softmax(out.logits);
                let w = weights.get(label);
                let seed_grad: Vec<f64> = (0..NUM_CLASSES)
                    .map(|k| if k == label.id() { -w / den } else { 0.0 })
                    .collect();
                let nll = -w * g.value(ls).data()[label.id()];
                if !nll.is_finite() {
                    aborted = Some(format!("non-finite loss at epoch {epoch}"));
                    log::error!("training diverged at epoch {epoch}; keeping epoch {} checkpoint", best.epoch);
                    break 'epochs;
                }
                loss_num += nll;
                loss_den += w;
                if argmax(&logits) == label.id() {
                    correct += 1;
                }
                let gr = g.backward_with(ls, seed_grad);
                accumulate(&mut grads, g.param_grads(&gr));
            }
            adam.step(model.params_mut(), &grads);
            if !model.params().is_finite() {
                aborted = Some(format!("non-finite parameters at epoch {epoch}"));
                break 'epochs;
            }
        }
        let preds = predict_images(&model, test_imgs, &test_labels, cfg.normalization)?;
        let (eval_loss, eval_accuracy) = summarize(&preds, &weights)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_num / loss_den,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_loss,
            eval_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | eval loss {:.4} acc {:.4}",
            rec.train_loss,
            rec.train_accuracy,
            rec.eval_loss,
            rec.eval_accuracy
        );
        history.push(rec);
        if eval_accuracy >= best.eval_accuracy {
            best = Checkpoint {
                epoch,
                eval_accuracy,
                params: model.params().clone(),
            };
        }
        epoch_done = epoch;
    }
    if aborted.is_some() && epoch_done == 0 {
        return Err(Error::Divergence {
            epoch: 1,
            detail: aborted.unwrap_or_default(),
        });
    }
    Ok(TrainState {
        model,
        epoch: epoch_done,
        history,
        best,
        aborted,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Saves `model` with the training config and history in its metadata.
pub fn save_checkpoint(path: &Path, model: &BackboneModel, cfg: &TrainConfig, history: &[EpochRecord], epoch: usize) -> Result<()> {
    let mut m = model.clone();
    m.set_extra(serde_json::json!({
        "train_config": cfg,
        "history": history,
        "epoch": epoch,
    }));
    m.save(path)
}
