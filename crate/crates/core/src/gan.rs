//! Label-conditioned GAN for minority-class synthesis.
//!
//! Generator: `[z ‖ embed(label)]` → fully connected projection to a 4×4
//! map → transposed convolutions (k4 s2 p1, ReLU) doubling the side up to
//! `gen_image_side` → sigmoid. Discriminator: image plus a learned per-label
//! S×S map as a second channel → strided convolutions (k4 s2 p1, leaky ReLU
//! 0.2) down to 4×4 → fully connected logit. Both are trained with the
//! non-saturating binary cross-entropy losses.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use stroke_autograd::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};

use crate::backbones::archive::{read_archive, write_archive};
use crate::backbones::layers::{ConvGeom, Ctx, Init};
use crate::data::{list_files, ImageRecord, Manifest, Origin, Split, StrokeClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::preprocess::load_and_resize;
use crate::seed;

const KERNEL: usize = 4;
const LEAK: f64 = 0.2;
const BASE_SIDE: usize = 4;
const MIN_CHANNELS: usize = 4;

/// How many synthetic images per minority class [`merge_synthetic`] takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeSelection {
    /// Every available image.
    All,
    /// Enough to bring each minority class up to the largest class.
    Equalize,
    /// At most this many per class.
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub gen_image_side: usize,
    pub num_classes: usize,
    pub stabilization_epochs: usize,
    pub generation_epochs: usize,
    pub images_per_generation_epoch: usize,
    pub minority_classes: Vec<StrokeClass>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    /// Width of the generator's 4×4 map; halves at every upsampling.
    pub gen_channels: usize,
    /// Width of the first discriminator convolution; doubles per layer.
    pub disc_channels: usize,
    pub label_embed_dim: usize,
    /// Discriminator target for real pairs; below 1 gives one-sided label
    /// smoothing.
    pub real_target: f64,
    /// Std of Gaussian noise added to every discriminator input, decayed
    /// linearly to zero over the run.
    pub instance_noise: f64,
    /// Weight of the auxiliary classification loss. The auxiliary head has
    /// one slot per class plus a "generated" slot: the discriminator learns
    /// true labels on real images and the extra slot on generated ones, the
    /// generator is pushed towards the requested class. Zero gives a plain
    /// cGAN.
    pub aux_class_weight: f64,
    /// Images per class drawn from a fixed noise bank after each epoch to
    /// track class-conditional statistics.
    pub monitor_samples: usize,
    pub merge_count_per_class: MergeSelection,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            gen_image_side: 64,
            num_classes: NUM_CLASSES,
            stabilization_epochs: 200,
            generation_epochs: 800,
            images_per_generation_epoch: 800,
            minority_classes: vec![StrokeClass::Hemorrhagic, StrokeClass::Ischemic],
            learning_rate: 2e-4,
            beta1: 0.5,
            batch_size: 32,
            gen_channels: 32,
            disc_channels: 8,
            label_embed_dim: 16,
            real_target: 0.9,
            instance_noise: 0.1,
            aux_class_weight: 1.0,
            monitor_samples: 16,
            merge_count_per_class: MergeSelection::Equalize,
        }
    }
}

impl GanConfig {
    pub fn total_epochs(&self) -> usize {
        self.stabilization_epochs + self.generation_epochs
    }

    fn upsamplings(&self) -> usize {
        (self.gen_image_side / BASE_SIDE).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.gen_image_side;
        if s < 2 * BASE_SIDE || s % BASE_SIDE != 0 || !(s / BASE_SIDE).is_power_of_two() {
            return bad(format!("gen_image_side {s} must be 4·2^k with k >= 1"));
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}"));
        }
        if self.noise_dim == 0 || self.batch_size == 0 || self.gen_channels == 0 || self.disc_channels == 0 {
            return bad("noise_dim, batch_size and channel widths must be positive".into());
        }
        if self.minority_classes.is_empty() {
            return bad("minority_classes is empty".into());
        }
        if self.minority_classes.contains(&StrokeClass::Normal) {
            return bad("the normal class is never synthesised".into());
        }
        if self.images_per_generation_epoch % self.minority_classes.len() != 0 {
            return bad(format!(
                "images_per_generation_epoch {} not divisible by {} minority classes",
                self.images_per_generation_epoch,
                self.minority_classes.len()
            ));
        }
        if !(self.real_target > 0.5 && self.real_target <= 1.0) {
            return bad(format!("real_target {} outside (0.5, 1]", self.real_target));
        }
        if !(self.instance_noise >= 0.0 && self.instance_noise.is_finite()) {
            return bad(format!("instance_noise {} must be finite and >= 0", self.instance_noise));
        }
        if !(self.aux_class_weight >= 0.0 && self.aux_class_weight.is_finite()) {
            return bad(format!("aux_class_weight {} must be finite and >= 0", self.aux_class_weight));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return bad("learning_rate must be > 0 and beta1 in [0, 1)".into());
        }
        Ok(())
    }

    fn gen_widths(&self) -> Vec<usize> {
        (0..=self.upsamplings())
            .map(|i| (self.gen_channels >> i).max(MIN_CHANNELS))
            .collect()
    }

    fn disc_widths(&self) -> Vec<usize> {
        let cap = self.disc_channels << 2;
        (0..self.upsamplings())
            .map(|i| (self.disc_channels << i).min(cap))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stabilization,
    Generation,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub gen_loss: f64,
    pub disc_loss: f64,
    /// Discriminator accuracy on the epoch's final real/fake batch.
    pub disc_accuracy: f64,
    /// Mean intensity of monitor samples per class.
    pub class_means: [f64; NUM_CLASSES],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanState {
    pub config: GanConfig,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub epoch: usize,
    pub phase: Phase,
    pub loss_history: Vec<GanEpoch>,
    /// Mean intensity of the real training images per class.
    pub real_class_means: [f64; NUM_CLASSES],
    pub images_written: usize,
}

pub fn phase_at(cfg: &GanConfig, epoch: usize) -> Phase {
    if epoch < cfg.stabilization_epochs {
        Phase::Stabilization
    } else if epoch < cfg.total_epochs() {
        Phase::Generation
    } else {
        Phase::Done
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub fn init_generator(cfg: &GanConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    let mut init = Init::new(&mut p, seed);
    let widths = cfg.gen_widths();
    let fc_in = cfg.noise_dim + cfg.label_embed_dim;
    let fc_out = BASE_SIDE * BASE_SIDE * widths[0];
    init.normal("gen.label_embed", &[cfg.num_classes, cfg.label_embed_dim], 1.0);
    init.normal("gen.fc.weight", &[fc_in, fc_out], he_std(fc_in));
    init.constant("gen.fc.bias", &[fc_out], 0.0);
    init.layer_norm("gen.fc.norm", widths[0]);
    let n = widths.len() - 1;
    for i in 0..n {
        let cin = widths[i];
        let cout = if i + 1 == n { 1 } else { widths[i + 1] };
        init.normal(&format!("gen.up{i}.weight"), &[cin, KERNEL * KERNEL * cout], he_std(cin * 4));
        init.constant(&format!("gen.up{i}.bias"), &[cout], 0.0);
        if i + 1 < n {
            init.layer_norm(&format!("gen.up{i}.norm"), cout);
        }
    }
    p
}

pub fn init_discriminator(cfg: &GanConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    let mut init = Init::new(&mut p, seed);
    let s = cfg.gen_image_side;
    init.normal("disc.label_embed", &[cfg.num_classes, s * s], 0.1);
    let widths = cfg.disc_widths();
    let mut cin = 2;
    for (i, &cout) in widths.iter().enumerate() {
        let fan_in = KERNEL * KERNEL * cin;
        init.normal(&format!("disc.conv{i}.weight"), &[fan_in, cout], he_std(fan_in));
        init.constant(&format!("disc.conv{i}.bias"), &[cout], 0.0);
        cin = cout;
    }
    let fc_in = BASE_SIDE * BASE_SIDE * cin;
    init.normal("disc.fc.weight", &[fc_in, 1], he_std(fc_in) * 0.5);
    init.normal("disc.label_proj", &[cfg.num_classes, fc_in], he_std(fc_in) * 0.5);
    init.normal("disc.aux.weight", &[fc_in, cfg.num_classes + 1], he_std(fc_in) * 0.5);
    init.constant("disc.aux.bias", &[cfg.num_classes + 1], 0.0);
    init.constant("disc.fc.bias", &[1], 0.0);
    p
}

fn check_label(cfg: &GanConfig, label: StrokeClass) -> Result<()> {
    if label.id() >= cfg.num_classes {
        return Err(Error::Parameter(format!("label {} out of range", label.id())));
    }
    Ok(())
}

fn embed_row(ctx: &mut Ctx<'_>, name: &str, label: StrokeClass) -> Var {
    let table = ctx.param(name);
    let width = ctx.g.shape(table)[1];
    let idx: Vec<usize> = (0..width).map(|j| label.id() * width + j).collect();
    ctx.g.gather(table, idx.into(), vec![width])
}

/// Generator graph: returns the `[S·S]` image node with values in (0, 1).
pub fn generator_graph(ctx: &mut Ctx<'_>, cfg: &GanConfig, z: Var, label: StrokeClass) -> Var {
    let widths = cfg.gen_widths();
    let e = embed_row(ctx, "gen.label_embed", label);
    let input = ctx.g.concat(&[z, e], vec![1, cfg.noise_dim + cfg.label_embed_dim]);
    let x = ctx.linear(input, "gen.fc");
    let x = ctx.g.reshape(x, vec![BASE_SIDE * BASE_SIDE, widths[0]]);
    let x = ctx.layer_norm(x, "gen.fc.norm");
    let mut x = ctx.g.relu(x);
    let mut side = BASE_SIDE;
    let n = widths.len() - 1;
    for i in 0..n {
        let cout = if i + 1 == n { 1 } else { widths[i + 1] };
        let geom = ConvGeom {
            h: side,
            w: side,
            c_in: widths[i],
            kernel: KERNEL,
            stride: 2,
            pad: 1,
        };
        let (y, ho, _) = ctx.conv_transpose2d(x, geom, cout, &format!("gen.up{i}"));
        side = ho;
        x = if i + 1 == n {
            ctx.g.sigmoid(y)
        } else {
            let y = ctx.layer_norm(y, &format!("gen.up{i}.norm"));
            ctx.g.relu(y)
        };
    }
    ctx.g.reshape(x, vec![side * side])
}

/// Discriminator graph: returns `[2 + num_classes]` holding the real-vs-fake
/// logit followed by the auxiliary logits (one per class plus a final
/// "generated" slot).
pub fn discriminator_graph(ctx: &mut Ctx<'_>, cfg: &GanConfig, img: Var, label: StrokeClass) -> Var {
    let s = cfg.gen_image_side;
    let scaled = ctx.g.scale(img, 2.0);
    let shift = ctx.g.constant(Tensor::full(vec![s * s], -1.0));
    let centred = ctx.g.add(scaled, shift);
    let lab = embed_row(ctx, "disc.label_embed", label);
    let stacked = ctx.g.concat(&[centred, lab], vec![2, s * s]);
    let mut x = ctx.g.transpose(stacked);
    let mut side = s;
    let mut cin = 2;
    for (i, &cout) in cfg.disc_widths().iter().enumerate() {
        let geom = ConvGeom {
            h: side,
            w: side,
            c_in: cin,
            kernel: KERNEL,
            stride: 2,
            pad: 1,
        };
        x = ctx.conv2d(x, geom, &format!("disc.conv{i}"));
        x = ctx.g.leaky_relu(x, LEAK);
        side /= 2;
        cin = cout;
    }
    let flat = ctx.g.reshape(x, vec![1, side * side * cin]);
    let logit = ctx.linear(flat, "disc.fc");
    let logit = ctx.g.reshape(logit, vec![1]);
    // projection term: ⟨embed(label), features⟩
    let flat = ctx.g.reshape(flat, vec![side * side * cin]);
    let proj = embed_row(ctx, "disc.label_proj", label);
    let prod = ctx.g.mul(flat, proj);
    let dot = ctx.g.sum(prod);
    let dot = ctx.g.reshape(dot, vec![1]);
    let logit = ctx.g.add(logit, dot);
    let flat = ctx.g.reshape(flat, vec![1, side * side * cin]);
    let aux = ctx.linear(flat, "disc.aux");
    ctx.g.concat(&[logit, aux], vec![2 + cfg.num_classes])
}

fn frozen(_: &str) -> bool {
    false
}

fn trainable(_: &str) -> bool {
    true
}

/// Deterministic generator pass: `1 × S × S` grey image, values in (0, 1).
pub fn generator_forward(cfg: &GanConfig, params: &ParamSet, z: &[f64], label: StrokeClass) -> Result<Vec<f64>> {
    check_label(cfg, label)?;
    if z.len() != cfg.noise_dim {
        return Err(Error::Parameter(format!("noise length {} != noise_dim {}", z.len(), cfg.noise_dim)));
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, params, &frozen);
    let zv = ctx.g.constant(Tensor::from_parts(vec![cfg.noise_dim], z.to_vec()));
    let img = generator_graph(&mut ctx, cfg, zv, label);
    Ok(g.value(img).data().to_vec())
}

/// Probability that `img` (`S·S` values) is a real image of class `label`.
pub fn discriminator_forward(cfg: &GanConfig, params: &ParamSet, img: &[f64], label: StrokeClass) -> Result<f64> {
    check_label(cfg, label)?;
    let s = cfg.gen_image_side;
    if img.len() != s * s {
        return Err(Error::Parameter(format!("image has {} values, expected {s}x{s}", img.len())));
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, params, &frozen);
    let x = ctx.g.constant(Tensor::from_parts(vec![s * s], img.to_vec()));
    let out = discriminator_graph(&mut ctx, cfg, x, label);
    Ok(sigmoid(g.value(out).data()[0]))
}

/// Real-vs-fake probability and auxiliary class probabilities (the
/// auxiliary "generated" slot excluded, remaining classes renormalised).
pub fn discriminator_outputs(
    cfg: &GanConfig,
    params: &ParamSet,
    img: &[f64],
    label: StrokeClass,
) -> Result<(f64, [f64; NUM_CLASSES])> {
    check_label(cfg, label)?;
    let s = cfg.gen_image_side;
    if img.len() != s * s {
        return Err(Error::Parameter(format!("image has {} values, expected {s}x{s}", img.len())));
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, params, &frozen);
    let x = ctx.g.constant(Tensor::from_parts(vec![s * s], img.to_vec()));
    let out = discriminator_graph(&mut ctx, cfg, x, label);
    let o = g.value(out).data();
    let cls = &o[1..1 + NUM_CLASSES];
    let max = cls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = cls.iter().map(|v| (v - max).exp()).sum();
    Ok((sigmoid(o[0]), std::array::from_fn(|k| (cls[k] - max).exp() / z)))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) = ln(1 + eˣ)`, overflow-safe.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weighted cross-entropy of logits against index `target`, and its
/// gradient.
fn class_loss(logits: &[f64], target: usize, weight: f64) -> (f64, Vec<f64>) {
    if weight == 0.0 {
        return (0.0, vec![0.0; logits.len()]);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, l)| weight * ((l - max).exp() / z - f64::from(u8::from(k == target))))
        .collect();
    (weight * (z.ln() + max - logits[target]), grad)
}

fn gauss(rng: &mut seed::Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn sample_noise(rng: &mut seed::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| gauss(rng)).collect()
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

/// Real training images at the generator resolution, grouped with labels.
pub fn load_gan_corpus(m: &Manifest, side: usize) -> Result<Vec<(Vec<f64>, StrokeClass)>> {
    m.records()
        .iter()
        .filter(|r| r.origin == Origin::Real)
        .map(|r| Ok((load_and_resize(&r.path, side)?.luminance(), r.label)))
        .collect()
}

pub fn class_means(corpus: &[(Vec<f64>, StrokeClass)]) -> [f64; NUM_CLASSES] {
    let mut sum = [0.0; NUM_CLASSES];
    let mut n = [0usize; NUM_CLASSES];
    for (img, l) in corpus {
        sum[l.id()] += img.iter().sum::<f64>() / img.len() as f64;
        n[l.id()] += 1;
    }
    std::array::from_fn(|c| if n[c] > 0 { sum[c] / n[c] as f64 } else { f64::NAN })
}

pub fn write_gray_png(values: &[f64], side: usize, path: &Path) -> Result<()> {
    let px = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(side as u32, side as u32, px)
        .expect("buffer matches size")
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub const CHECKPOINT_FILE: &str = "gan_checkpoint.bin";
pub const HISTORY_FILE: &str = "gan_history.json";

/// Saves generator and discriminator with config, epoch and history.
pub fn save_gan_checkpoint(path: &Path, state: &GanState) -> Result<()> {
    let mut params = state.generator.clone();
    for (n, t) in state.discriminator.iter() {
        params.insert(n, t.clone());
    }
    let meta = serde_json::json!({
        "kind": "cgan",
        "config": state.config,
        "epoch": state.epoch,
        "phase": state.phase,
        "loss_history": state.loss_history,
        "real_class_means": state.real_class_means,
        "images_written": state.images_written,
    });
    write_archive(path, &meta, &params)
}

pub fn load_gan_checkpoint(path: &Path) -> Result<GanState> {
    let a = read_archive(path)?;
    let get = |k: &str| {
        a.meta.get(k).cloned().ok_or_else(|| Error::Archive {
            path: path.to_path_buf(),
            message: format!("metadata lacks `{k}`"),
        })
    };
    let split = |prefix: &str| -> ParamSet {
        a.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    };
    Ok(GanState {
        config: serde_json::from_value(get("config")?)?,
        epoch: serde_json::from_value(get("epoch")?)?,
        phase: serde_json::from_value(get("phase")?)?,
        loss_history: serde_json::from_value(get("loss_history")?)?,
        real_class_means: serde_json::from_value(get("real_class_means")?)?,
        images_written: serde_json::from_value(get("images_written")?)?,
        generator: split("gen."),
        discriminator: split("disc."),
    })
}

struct Step {
    gen_loss: f64,
    disc_loss: f64,
    disc_correct: usize,
    disc_seen: usize,
}

fn train_step(
    cfg: &GanConfig,
    batch: &[&(Vec<f64>, StrokeClass)],
    gen: &mut ParamSet,
    disc: &mut ParamSet,
    g_opt: &mut Adam,
    d_opt: &mut Adam,
    rng: &mut seed::Rng,
    sigma: f64,
) -> Result<Step> {
    let s = cfg.gen_image_side;
    let n = batch.len() as f64;
    let mut d_grads = IndexMap::new();
    let mut disc_loss = 0.0;
    let mut disc_correct = 0;

    // Discriminator: real pairs → 1, generated pairs (same labels) → 0.
    for (img, label) in batch.iter().map(|b| (&b.0, b.1)) {
        let z = sample_noise(rng, cfg.noise_dim);
        let fake = generator_forward(cfg, gen, &z, label)?;
        for (mut x, real) in [(img.clone(), true), (fake, false)] {
            if sigma > 0.0 {
                x.iter_mut().for_each(|v| *v += sigma * gauss(rng));
            }
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, disc, &trainable);
            let xv = ctx.g.constant(Tensor::from_parts(vec![s * s], x));
            let out = discriminator_graph(&mut ctx, cfg, xv, label);
            let o = g.value(out).data().to_vec();
            let l = o[0];
            // BCE with logits: t·softplus(−l) + (1 − t)·softplus(l)
            let t = if real { cfg.real_target } else { 0.0 };
            let mut loss = t * softplus(-l) + (1.0 - t) * softplus(l);
            let mut seed_grad = vec![(sigmoid(l) - t) / n];
            // auxiliary head: true class for real pairs, the extra "fake" slot otherwise
            let target = if real { label.id() } else { cfg.num_classes };
            let (ce, dce) = class_loss(&o[1..], target, cfg.aux_class_weight);
            loss += ce;
            seed_grad.extend(dce.iter().map(|d| d / n));
            disc_loss += loss / n;
            if (l > 0.0) == real {
                disc_correct += 1;
            }
            let grads = g.backward_with(out, seed_grad);
            accumulate(&mut d_grads, g.param_grads(&grads));
        }
    }
    d_opt.step(disc, &d_grads);

    // Generator: make the discriminator call fresh samples real.
    let mut g_grads = IndexMap::new();
    let mut gen_loss = 0.0;
    for label in batch.iter().map(|b| b.1) {
        let z = sample_noise(rng, cfg.noise_dim);
        let mut g = Graph::new();
        let out = {
            let mut gctx = Ctx::new(&mut g, gen, &trainable);
            let zv = gctx.g.constant(Tensor::from_parts(vec![cfg.noise_dim], z));
            let mut img = generator_graph(&mut gctx, cfg, zv, label);
            if sigma > 0.0 {
                let noise: Vec<f64> = (0..s * s).map(|_| sigma * gauss(rng)).collect();
                let nv = gctx.g.constant(Tensor::from_parts(vec![s * s], noise));
                img = gctx.g.add(img, nv);
            }
            let mut dctx = Ctx::new(&mut g, disc, &frozen);
            discriminator_graph(&mut dctx, cfg, img, label)
        };
        let o = g.value(out).data().to_vec();
        let l = o[0];
        let (ce, dce) = class_loss(&o[1..], label.id(), cfg.aux_class_weight);
        gen_loss += (softplus(-l) + ce) / n;
        let mut seed_grad = vec![(sigmoid(l) - 1.0) / n];
        seed_grad.extend(dce.iter().map(|d| d / n));
        let grads = g.backward_with(out, seed_grad);
        accumulate(&mut g_grads, g.param_grads(&grads));
    }
    g_opt.step(gen, &g_grads);

    Ok(Step {
        gen_loss,
        disc_loss,
        disc_correct,
        disc_seen: 2 * batch.len(),
    })
}

fn monitor_means(cfg: &GanConfig, gen: &ParamSet, bank: &[Vec<f64>]) -> Result<[f64; NUM_CLASSES]> {
    let mut out = [0.0; NUM_CLASSES];
    for c in StrokeClass::ALL {
        let mut total = 0.0;
        for z in bank {
            let img = generator_forward(cfg, gen, z, c)?;
            total += img.iter().sum::<f64>() / img.len() as f64;
        }
        out[c.id()] = total / bank.len().max(1) as f64;
    }
    Ok(out)
}

/// Trains the conditional GAN on the real records of `train`. During the
/// generation phase every epoch writes `images_per_generation_epoch`
/// images, split evenly across the minority classes, to
/// `out_dir/<class>/ep<E>_<i>.png`; a checkpoint and the loss history are
/// written to `out_dir` after every epoch.
pub fn train_cgan(train: &Manifest, cfg: &GanConfig, seed_value: u64, out_dir: &Path) -> Result<GanState> {
    cfg.validate()?;
    let corpus = load_gan_corpus(train, cfg.gen_image_side)?;
    for c in &cfg.minority_classes {
        if !corpus.iter().any(|(_, l)| l == c) {
            return Err(Error::Config(format!(
                "minority class `{}` has no real training images",
                c.dir_name()
            )));
        }
    }
    train_cgan_on(&corpus, cfg, seed_value, out_dir)
}

/// [`train_cgan`] over an already loaded corpus.
pub fn train_cgan_on(
    corpus: &[(Vec<f64>, StrokeClass)],
    cfg: &GanConfig,
    seed_value: u64,
    out_dir: &Path,
) -> Result<GanState> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("empty GAN training corpus".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let side = cfg.gen_image_side;
    let mut rng = seed::rng(seed::stage_seed(seed_value, "gan/steps"));
    let mut bank_rng = seed::rng(seed::stage_seed(seed_value, "gan/monitor"));
    let bank: Vec<Vec<f64>> = (0..cfg.monitor_samples)
        .map(|_| sample_noise(&mut bank_rng, cfg.noise_dim))
        .collect();
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        ..AdamConfig::default()
    };
    let (mut g_opt, mut d_opt) = (Adam::new(adam), Adam::new(adam));
    let mut state = GanState {
        config: cfg.clone(),
        generator: init_generator(cfg, seed::stage_seed(seed_value, "gan/gen-init")),
        discriminator: init_discriminator(cfg, seed::stage_seed(seed_value, "gan/disc-init")),
        epoch: 0,
        phase: phase_at(cfg, 0),
        loss_history: Vec::new(),
        real_class_means: class_means(corpus),
        images_written: 0,
    };
    let per_class = cfg.images_per_generation_epoch / cfg.minority_classes.len();
    let ckpt = out_dir.join(CHECKPOINT_FILE);

    for epoch in 0..cfg.total_epochs() {
        let phase = phase_at(cfg, epoch);
        let sigma = cfg.instance_noise * (1.0 - epoch as f64 / cfg.total_epochs() as f64);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        let (mut gl, mut dl, mut steps) = (0.0, 0.0, 0usize);
        let mut acc = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&(Vec<f64>, StrokeClass)> = chunk.iter().map(|&i| &corpus[i]).collect();
            let st = train_step(cfg, &batch, &mut state.generator, &mut state.discriminator, &mut g_opt, &mut d_opt, &mut rng, sigma)?;
            if !st.gen_loss.is_finite() || !st.disc_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    detail: format!(
                        "non-finite GAN loss (generator {}, discriminator {}) after {} steps",
                        st.gen_loss, st.disc_loss, steps
                    ),
                });
            }
            gl += st.gen_loss;
            dl += st.disc_loss;
            acc = st.disc_correct as f64 / st.disc_seen as f64;
            steps += 1;
        }
        let means = monitor_means(cfg, &state.generator, &bank)?;
        let rec = GanEpoch {
            epoch: epoch + 1,
            gen_loss: gl / steps as f64,
            disc_loss: dl / steps as f64,
            disc_accuracy: acc,
            class_means: means,
        };
        log::info!(
            "gan epoch {} ({phase:?}): G {:.4} D {:.4} D-acc {:.2}",
            rec.epoch,
            rec.gen_loss,
            rec.disc_loss,
            rec.disc_accuracy
        );
        state.loss_history.push(rec);

        if phase == Phase::Generation {
            let mut img_rng = seed::rng(seed::mix(&[seed_value, 0x5AE7, epoch as u64]));
            for class in &cfg.minority_classes {
                let dir = out_dir.join(class.dir_name());
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for i in 0..per_class {
                    let z = sample_noise(&mut img_rng, cfg.noise_dim);
                    let img = generator_forward(cfg, &state.generator, &z, *class)?;
                    write_gray_png(&img, side, &dir.join(synthetic_name(epoch + 1, i)))?;
                    state.images_written += 1;
                }
            }
        }
        // files of this epoch exist before the counter advances
        state.epoch = epoch + 1;
        state.phase = phase_at(cfg, state.epoch);
        save_gan_checkpoint(&ckpt, &state)?;
    }
    let hist = serde_json::to_string_pretty(&state.loss_history)?;
    let hp = out_dir.join(HISTORY_FILE);
    std::fs::write(&hp, hist).map_err(|e| Error::io(&hp, e))?;
    Ok(state)
}

pub fn synthetic_name(epoch: usize, index: usize) -> String {
    format!("ep{epoch:05}_{index:05}.png")
}

/// Appends synthetic images from `synth_root/<class>/` to the training
/// manifest. Images are taken latest-epoch first, up to the count chosen
/// by `selection`. Any image under `synth_root/normal` is a policy
/// violation.
pub fn merge_synthetic(train: &Manifest, synth_root: &Path, selection: MergeSelection) -> Result<Manifest> {
    let normal_dir = synth_root.join(StrokeClass::Normal.dir_name());
    if normal_dir.is_dir() && !list_files(&normal_dir)?.is_empty() {
        return Err(Error::PolicyViolation(format!(
            "synthetic images found for the normal class under {}",
            normal_dir.display()
        )));
    }
    let counts = train.class_counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut records: Vec<ImageRecord> = train.records().to_vec();
    for class in [StrokeClass::Hemorrhagic, StrokeClass::Ischemic] {
        let dir = synth_root.join(class.dir_name());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = list_files(&dir)?;
        files.reverse();
        let take = match selection {
            MergeSelection::All => files.len(),
            MergeSelection::Equalize => target.saturating_sub(counts[class.id()]).min(files.len()),
            MergeSelection::Fixed(n) => n.min(files.len()),
        };
        let mut chosen: Vec<PathBuf> = files.into_iter().take(take).collect();
        chosen.sort();
        records.extend(chosen.into_iter().map(|path| ImageRecord {
            path,
            label: class,
            origin: Origin::Synthetic,
            split: Split::Train,
        }));
    }
    Manifest::from_records(train.root(), records)
}

/// Threshold classifier over bright and dark pixel fractions, fit on real
/// images: hyperdense first, then hypodense, otherwise normal. Each cut
/// sits halfway between the lesion class mean and the largest mean of the
/// other two classes.
///
/// Images are box-blurred (3×3) first; a dark pixel only counts when the
/// pixels `INSET` steps away in all four directions are above background,
/// which keeps the head boundary out of the dark count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityClassifier {
    pub bright_threshold: f64,
    pub dark_low: f64,
    pub dark_high: f64,
    /// Mean `[bright, dark]` fractions per class.
    pub class_means: [[f64; 2]; NUM_CLASSES],
    pub bright_cut: f64,
    pub dark_cut: f64,
}

impl IntensityClassifier {
    pub const BRIGHT: f64 = 0.75;
    pub const DARK: (f64, f64) = (0.15, 0.4);
    const BACKGROUND: f64 = 0.1;
    const INSET: usize = 4;

    pub fn features(&self, img: &[f64]) -> [f64; 2] {
        let side = (img.len() as f64).sqrt() as usize;
        let b = box_blur(img, side);
        let inside = |y: usize, x: usize| {
            let k = Self::INSET;
            y >= k
                && x >= k
                && y + k < side
                && x + k < side
                && [(y - k, x), (y + k, x), (y, x - k), (y, x + k)]
                    .iter()
                    .all(|&(yy, xx)| b[yy * side + xx] > Self::BACKGROUND)
        };
        let n = img.len() as f64;
        let (mut bright, mut dark) = (0usize, 0usize);
        for y in 0..side {
            for x in 0..side {
                let v = b[y * side + x];
                if v > self.bright_threshold {
                    bright += 1;
                } else if v > self.dark_low && v < self.dark_high && inside(y, x) {
                    dark += 1;
                }
            }
        }
        [bright as f64 / n, dark as f64 / n]
    }

    pub fn fit(corpus: &[(Vec<f64>, StrokeClass)]) -> Self {
        let mut c = Self {
            bright_threshold: Self::BRIGHT,
            dark_low: Self::DARK.0,
            dark_high: Self::DARK.1,
            class_means: [[0.0; 2]; NUM_CLASSES],
            bright_cut: 0.0,
            dark_cut: 0.0,
        };
        let mut n = [0usize; NUM_CLASSES];
        let mut sums = [[0.0; 2]; NUM_CLASSES];
        for (img, l) in corpus {
            let f = c.features(img);
            sums[l.id()][0] += f[0];
            sums[l.id()][1] += f[1];
            n[l.id()] += 1;
        }
        for k in 0..NUM_CLASSES {
            let d = n[k].max(1) as f64;
            c.class_means[k] = [sums[k][0] / d, sums[k][1] / d];
        }
        let cut = |lesion: StrokeClass, f: usize| {
            let others = StrokeClass::ALL
                .iter()
                .filter(|&&k| k != lesion)
                .map(|k| c.class_means[k.id()][f])
                .fold(f64::NEG_INFINITY, f64::max);
            0.5 * (c.class_means[lesion.id()][f] + others)
        };
        c.bright_cut = cut(StrokeClass::Hemorrhagic, 0);
        c.dark_cut = cut(StrokeClass::Ischemic, 1);
        c
    }

    pub fn predict(&self, img: &[f64]) -> StrokeClass {
        let [bright, dark] = self.features(img);
        if bright > self.bright_cut {
            StrokeClass::Hemorrhagic
        } else if dark > self.dark_cut {
            StrokeClass::Ischemic
        } else {
            StrokeClass::Normal
        }
    }
}

fn box_blur(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(side) {
                for xx in x.saturating_sub(1)..(x + 2).min(side) {
                    acc += img[yy * side + xx];
                    n += 1.0;
                }
            }
            out[y * side + x] = acc / n;
        }
    }
    out
}

/// Fraction of freshly generated images per minority class that the real-
/// data intensity classifier assigns to the requested class.
pub fn conditioning_accuracy(
    cfg: &GanConfig,
    gen: &ParamSet,
    clf: &IntensityClassifier,
    per_class: usize,
    seed_value: u64,
) -> Result<f64> {
    let mut rng = seed::rng(seed_value);
    let (mut hit, mut total) = (0usize, 0usize);
    for class in &cfg.minority_classes {
        for _ in 0..per_class {
            let z = sample_noise(&mut rng, cfg.noise_dim);
            let img = generator_forward(cfg, gen, &z, *class)?;
            hit += usize::from(clf.predict(&img) == *class);
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Discriminator accuracy on held-out real images versus fresh samples.
pub fn discriminator_accuracy(
    cfg: &GanConfig,
    state: &GanState,
    real: &[(Vec<f64>, StrokeClass)],
    seed_value: u64,
) -> Result<f64> {
    let mut rng = seed::rng(seed_value);
    let mut correct = 0usize;
    for (img, label) in real {
        if discriminator_forward(cfg, &state.discriminator, img, *label)? > 0.5 {
            correct += 1;
        }
        let z = sample_noise(&mut rng, cfg.noise_dim);
        let fake = generator_forward(cfg, &state.generator, &z, *label)?;
        if discriminator_forward(cfg, &state.discriminator, &fake, *label)? < 0.5 {
            correct += 1;
        }
    }
    Ok(correct as f64 / (2 * real.len()).max(1) as f64)
}
