//! Backbone contract and from-scratch reference implementations of ViT, TNT,
//! ConvNeXt and MaxViT.
//!
//! Every backbone maps a `3 × side × side` image to a pooled feature vector,
//! exposes named intermediate activations through its layer registry, and
//! carries a replaceable linear classification head (`head.weight`
//! `[classes, feature_dim]`, `head.bias` `[classes]`). Reference
//! configurations default to toy scale so gradient checks and desk-scale
//! training stay fast.

pub mod archive;
pub mod convnext;
pub mod layers;
pub mod maxvit;
pub mod tnt;
pub mod vit;

use std::path::Path;

use serde::{Deserialize, Serialize};
use stroke_autograd::{Graph, ParamSet, Var};

use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::preprocess::ImageTensor;
use layers::{Ctx, Init};

pub use archive::{load_external_backbone, read_archive, write_archive, Archive};

pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vit,
    Tnt,
    Convnext,
    Maxvit,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Vit, Arch::Tnt, Arch::Convnext, Arch::Maxvit];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Vit => "vit",
            Arch::Tnt => "tnt",
            Arch::Convnext => "convnext",
            Arch::Maxvit => "maxvit",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters. For ConvNeXt and MaxViT, `patch_size` is
/// the stem stride and `depth` the number of stages (channels double and
/// resolution halves from one stage to the next).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub image_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_inner_patch")]
    pub inner_patch_size: usize,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_inner_patch() -> usize {
    4
}

fn default_window() -> usize {
    2
}

fn default_kernel() -> usize {
    7
}

impl BackboneConfig {
    /// Desk-scale reference configuration for `arch` on 64×64 inputs.
    pub fn toy(arch: Arch) -> Self {
        let base = Self {
            arch,
            image_side: 64,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            inner_patch_size: 4,
            window_size: 2,
            kernel_size: 7,
            dropout: 0.0,
        };
        match arch {
            Arch::Vit => base,
            Arch::Tnt => Self {
                patch_size: 16,
                ..base
            },
            Arch::Convnext => Self {
                patch_size: 4,
                embed_dim: 16,
                depth: 3,
                ..base
            },
            Arch::Maxvit => Self {
                patch_size: 4,
                embed_dim: 16,
                depth: 4,
                ..base
            },
        }
    }

    /// Dimension of the pooled feature vector fed to the head.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Arch::Vit | Arch::Tnt => self.embed_dim,
            Arch::Convnext | Arch::Maxvit => self.embed_dim << (self.depth - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_side == 0 || self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 {
            return bad("image_side, patch_size, embed_dim and depth must be positive".into());
        }
        if self.image_side % self.patch_size != 0 {
            return bad(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.arch {
            Arch::Vit => vit::validate(self),
            Arch::Tnt => tnt::validate(self),
            Arch::Convnext => convnext::validate(self),
            Arch::Maxvit => maxvit::validate(self),
        }
    }

    fn layout(&self) -> Vec<LayerInfo> {
        let mut layers = match self.arch {
            Arch::Vit => vit::layout(self),
            Arch::Tnt => tnt::layout(self),
            Arch::Convnext => convnext::layout(self),
            Arch::Maxvit => maxvit::layout(self),
        };
        let spatial = layers.len();
        if spatial > 0 {
            layers[0].tag = Some(LayerTag::Early);
            layers[spatial / 2].tag = Some(LayerTag::Mid);
            layers[spatial - 1].tag = Some(LayerTag::Deep);
        }
        layers.push(LayerInfo {
            name: "pool".into(),
            internal: "pool".into(),
            grid: None,
            channels: self.feature_dim(),
            tag: None,
        });
        layers
    }
}

/// One entry of a model's layer registry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    /// Exposed name; differs from `internal` when an external weight set
    /// maps it to the source model's naming.
    pub name: String,
    pub internal: String,
    /// Spatial grid `(h, w)` of the token-major activation; `None` for
    /// vector-valued layers.
    pub grid: Option<(usize, usize)>,
    pub channels: usize,
    pub tag: Option<LayerTag>,
}

/// Coarse depth position of a spatial layer, used to pick default probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerTag {
    Early,
    Mid,
    Deep,
}

impl LayerInfo {
    pub(crate) fn spatial(name: String, h: usize, w: usize, channels: usize) -> Self {
        Self {
            internal: name.clone(),
            name,
            grid: Some((h, w)),
            channels,
            tag: None,
        }
    }

    pub fn is_spatial(&self) -> bool {
        self.grid.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    HeadOnly,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInit {
    TruncNormal,
    Zeros,
}

/// Evaluation or training pass; dropout is active only when training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    Train { seed: u64 },
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub features: Var,
    pub logits: Var,
    /// Activations in layer-registry order.
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    params: ParamSet,
    num_classes: usize,
    freeze: FreezeMode,
    registry: Vec<LayerInfo>,
    extra: serde_json::Value,
}

impl BackboneModel {
    /// Freshly initialised reference model with a `NUM_CLASSES`-way head.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        {
            let mut init = Init::new(&mut params, seed);
            match config.arch {
                Arch::Vit => vit::init(&config, &mut init),
                Arch::Tnt => tnt::init(&config, &mut init),
                Arch::Convnext => convnext::init(&config, &mut init),
                Arch::Maxvit => maxvit::init(&config, &mut init),
            }
        }
        let registry = config.layout();
        let mut model = Self {
            config,
            params,
            num_classes: NUM_CLASSES,
            freeze: FreezeMode::Full,
            registry,
            extra: serde_json::Value::Null,
        };
        replace_head(&mut model, NUM_CLASSES, HeadInit::TruncNormal, seed ^ 0x4EAD);
        Ok(model)
    }

    pub(crate) fn from_parts(
        config: BackboneConfig,
        params: ParamSet,
        num_classes: usize,
        extra: serde_json::Value,
    ) -> Self {
        let registry = config.layout();
        Self {
            config,
            params,
            num_classes,
            freeze: FreezeMode::Full,
            registry,
            extra,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Dropout applied in training-mode forward passes.
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
        }
        self.config.dropout = p;
        Ok(())
    }

    pub fn freeze_mode(&self) -> FreezeMode {
        self.freeze
    }

    pub fn layer_registry(&self) -> &[LayerInfo] {
        &self.registry
    }

    pub fn tagged(&self, tag: LayerTag) -> Option<&LayerInfo> {
        self.registry.iter().find(|l| l.tag == Some(tag))
    }

    /// Registry index of a layer by exposed or internal name.
    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.registry
            .iter()
            .position(|l| l.name == name)
            .or_else(|| self.registry.iter().position(|l| l.internal == name))
    }

    /// Opaque metadata carried through archive round-trips.
    pub fn extra(&self) -> &serde_json::Value {
        &self.extra
    }

    pub fn set_extra(&mut self, extra: serde_json::Value) {
        self.extra = extra;
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with(HEAD_PREFIX)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        match self.freeze {
            FreezeMode::Full => true,
            FreezeMode::HeadOnly => Self::is_head_param(name),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| Self::is_head_param(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Parameters outside the head.
    pub fn backbone_params(&self) -> ParamSet {
        self.params
            .iter()
            .filter(|(n, _)| !Self::is_head_param(n))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// Records the forward pass of `img` (a `[3, side, side]` node).
    pub fn forward(&self, g: &mut Graph, img: Var, mode: ForwardMode) -> Result<ForwardOutput> {
        let side = self.config.image_side;
        if g.shape(img) != [3, side, side] {
            return Err(Error::Input(format!(
                "backbone expects a [3, {side}, {side}] image, got {:?}",
                g.shape(img)
            )));
        }
        let trainable = |name: &str| self.is_trainable(name);
        let mut ctx = Ctx::new(g, &self.params, &trainable);
        if let ForwardMode::Train { seed } = mode {
            ctx = ctx.with_dropout(self.config.dropout, seed);
        }
        let (features, mut taps) = match self.config.arch {
            Arch::Vit => vit::trunk(&mut ctx, &self.config, img),
            Arch::Tnt => tnt::trunk(&mut ctx, &self.config, img),
            Arch::Convnext => convnext::trunk(&mut ctx, &self.config, img),
            Arch::Maxvit => maxvit::trunk(&mut ctx, &self.config, img),
        };
        taps.push(features);
        let logits = classify(&mut ctx, features, self.feature_dim(), self.num_classes);
        Ok(ForwardOutput {
            features,
            logits,
            taps,
        })
    }

    /// Inference convenience: logits for one image.
    pub fn logits(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let out = self.forward(&mut g, x, ForwardMode::Eval)?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_archive(path, &self.archive_meta()?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = read_archive(path)?;
        archive::model_from_archive(path, archive, None)
    }

    pub(crate) fn archive_meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "config": serde_json::to_value(&self.config)?,
            "num_classes": self.num_classes,
            "extra": self.extra,
        }))
    }

    pub(crate) fn set_aliases(&mut self, aliases: &indexmap::IndexMap<String, String>) -> Result<()> {
        for (internal, external) in aliases {
            let entry = self
                .registry
                .iter_mut()
                .find(|l| &l.internal == internal)
                .ok_or_else(|| Error::Config(format!("registry map names unknown layer `{internal}`")))?;
            entry.name = external.clone();
        }
        Ok(())
    }
}

fn classify(ctx: &mut Ctx<'_>, features: Var, dim: usize, classes: usize) -> Var {
    let f = ctx.dropout(features);
    let f = ctx.g.reshape(f, vec![1, dim]);
    let w = ctx.param("head.weight");
    let b = ctx.param("head.bias");
    let wt = ctx.g.transpose(w);
    let y = ctx.g.matmul(f, wt);
    let y = ctx.g.reshape(y, vec![classes]);
    ctx.g.add_bias(y, b)
}

/// Discards any existing classification head and installs a fresh
/// `feature_dim → num_classes` affine map.
pub fn replace_head(model: &mut BackboneModel, num_classes: usize, init: HeadInit, seed: u64) {
    let dim = model.feature_dim();
    model.params.remove_prefix(HEAD_PREFIX);
    let mut i = Init::new(&mut model.params, seed);
    match init {
        HeadInit::TruncNormal => i.trunc_normal("head.weight", &[num_classes, dim]),
        HeadInit::Zeros => i.constant("head.weight", &[num_classes, dim], 0.0),
    }
    i.constant("head.bias", &[num_classes], 0.0);
    model.num_classes = num_classes;
}

pub fn apply_freeze(model: &mut BackboneModel, mode: FreezeMode) {
    model.freeze = mode;
}
