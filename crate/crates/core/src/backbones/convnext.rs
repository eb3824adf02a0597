//! ConvNeXt: patchify stem, then stages of large-kernel depthwise blocks
//! with channel-wise layer norm and an inverted-bottleneck MLP. Each stage
//! after the first starts with a 2×2 stride-2 downsampling convolution that
//! doubles the channel count.

use stroke_autograd::Var;

use super::layers::{ConvGeom, Ctx, Init, MLP_RATIO};
use super::{BackboneConfig, LayerInfo};
use crate::error::{Error, Result};

pub(super) fn stage_dims(cfg: &BackboneConfig) -> Vec<(usize, usize)> {
    let base = cfg.image_side / cfg.patch_size;
    (0..cfg.depth).map(|s| (base >> s, cfg.embed_dim << s)).collect()
}

pub fn check_kernel(kernel: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("depthwise kernel size {kernel} must be odd")));
    }
    Ok(())
}

pub(super) fn check_stage_sides(cfg: &BackboneConfig, multiple: usize) -> Result<()> {
    let base = cfg.image_side / cfg.patch_size;
    let need = multiple << (cfg.depth - 1);
    if base % need != 0 {
        return Err(Error::Config(format!(
            "stem output side {base} must be divisible by {need} for {} stages",
            cfg.depth
        )));
    }
    Ok(())
}

pub(super) fn validate(cfg: &BackboneConfig) -> Result<()> {
    check_kernel(cfg.kernel_size)?;
    check_stage_sides(cfg, 1)
}

pub(super) fn init_stem_and_downsample(cfg: &BackboneConfig, init: &mut Init<'_>, s: usize) {
    let dims = stage_dims(cfg);
    if s == 0 {
        init.conv("stem.conv", cfg.patch_size, 3, dims[0].1);
        init.layer_norm("stem.norm", dims[0].1);
    } else {
        init.layer_norm(&format!("stages.{s}.downsample.norm"), dims[s - 1].1);
        init.conv(&format!("stages.{s}.downsample.conv"), 2, dims[s - 1].1, dims[s].1);
    }
}

pub fn init_block(init: &mut Init<'_>, prefix: &str, dim: usize, kernel: usize) {
    init.depthwise(&format!("{prefix}.dwconv"), kernel, dim);
    init.layer_norm(&format!("{prefix}.norm"), dim);
    init.linear(&format!("{prefix}.pwconv1"), dim, dim * MLP_RATIO);
    init.linear(&format!("{prefix}.pwconv2"), dim * MLP_RATIO, dim);
}

pub(super) fn init(cfg: &BackboneConfig, init: &mut Init<'_>) {
    for (s, &(_, c)) in stage_dims(cfg).iter().enumerate() {
        init_stem_and_downsample(cfg, init, s);
        init_block(init, &format!("stages.{s}.block"), c, cfg.kernel_size);
    }
    init.layer_norm("norm", cfg.feature_dim());
}

pub(super) fn layout(cfg: &BackboneConfig) -> Vec<LayerInfo> {
    let dims = stage_dims(cfg);
    std::iter::once(LayerInfo::spatial("stem".into(), dims[0].0, dims[0].0, dims[0].1))
        .chain(
            dims.iter()
                .enumerate()
                .map(|(s, &(side, c))| LayerInfo::spatial(format!("stages.{s}"), side, side, c)),
        )
        .collect()
}

/// Residual block on a token-major `[h·w, C]` map: same-padded depthwise
/// convolution, layer norm over channels, ×4 pointwise expansion, GELU,
/// pointwise contraction, residual add.
pub fn convnext_block(ctx: &mut Ctx<'_>, x: Var, h: usize, w: usize, prefix: &str) -> Result<Var> {
    let k = ctx.param_shape(&format!("{prefix}.dwconv.weight"))[0];
    let side = (k as f64).sqrt().round() as usize;
    check_kernel(side)?;
    let y = ctx.depthwise(x, h, w, &format!("{prefix}.dwconv"));
    let y = ctx.layer_norm(y, &format!("{prefix}.norm"));
    let y = ctx.linear(y, &format!("{prefix}.pwconv1"));
    let y = ctx.g.gelu(y);
    let y = ctx.linear(y, &format!("{prefix}.pwconv2"));
    let y = ctx.dropout(y);
    Ok(ctx.g.add(x, y))
}

/// Stem (s = 0) or downsampling layer (s > 0). Returns the new map.
pub(super) fn stem_or_downsample(ctx: &mut Ctx<'_>, cfg: &BackboneConfig, x: Var, s: usize) -> Var {
    let dims = stage_dims(cfg);
    if s == 0 {
        let tokens = ctx.to_tokens(x);
        let geom = ConvGeom {
            h: cfg.image_side,
            w: cfg.image_side,
            c_in: 3,
            kernel: cfg.patch_size,
            stride: cfg.patch_size,
            pad: 0,
        };
        let y = ctx.conv2d(tokens, geom, "stem.conv");
        ctx.layer_norm(y, "stem.norm")
    } else {
        let (side, c) = dims[s - 1];
        let y = ctx.layer_norm(x, &format!("stages.{s}.downsample.norm"));
        let geom = ConvGeom {
            h: side,
            w: side,
            c_in: c,
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        ctx.conv2d(y, geom, &format!("stages.{s}.downsample.conv"))
    }
}

pub(super) fn trunk(ctx: &mut Ctx<'_>, cfg: &BackboneConfig, img: Var) -> (Var, Vec<Var>) {
    let mut x = img;
    let mut taps = Vec::with_capacity(cfg.depth + 1);
    for (s, &(side, _)) in stage_dims(cfg).iter().enumerate() {
        x = stem_or_downsample(ctx, cfg, x, s);
        if s == 0 {
            taps.push(x);
        }
        x = convnext_block(ctx, x, side, side, &format!("stages.{s}.block")).expect("validated config");
        taps.push(x);
    }
    let pooled = ctx.g.mean_rows(x);
    let d = cfg.feature_dim();
    let pooled = ctx.g.reshape(pooled, vec![1, d]);
    let pooled = ctx.layer_norm(pooled, "norm");
    (ctx.g.reshape(pooled, vec![d]), taps)
}
