//! Vision Transformer: linear patch embedding, pre-norm encoder blocks,
//! mean-pooled tokens.

use stroke_autograd::Var;

use super::layers::{Attention, ConvGeom, Ctx, Init, MLP_RATIO};
use super::{BackboneConfig, LayerInfo};
use crate::error::{Error, Result};

pub(super) fn validate(cfg: &BackboneConfig) -> Result<()> {
    if cfg.heads == 0 || cfg.embed_dim % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "heads {} must divide embed_dim {}",
            cfg.heads, cfg.embed_dim
        )));
    }
    Ok(())
}

pub fn token_count(side: usize, patch: usize) -> Result<usize> {
    if patch == 0 || side % patch != 0 {
        return Err(Error::Config(format!("image side {side} not divisible by patch size {patch}")));
    }
    Ok((side / patch).pow(2))
}

pub(super) fn init_patch_embed(cfg: &BackboneConfig, init: &mut Init<'_>) {
    let n = (cfg.image_side / cfg.patch_size).pow(2);
    init.conv("patch_embed.proj", cfg.patch_size, 3, cfg.embed_dim);
    init.constant("pos_embed", &[n, cfg.embed_dim], 0.0);
}

pub(super) fn init_encoder_block(init: &mut Init<'_>, prefix: &str, dim: usize) {
    init.layer_norm(&format!("{prefix}.norm1"), dim);
    init.attention(&format!("{prefix}.attn"), dim);
    init.layer_norm(&format!("{prefix}.norm2"), dim);
    init.mlp(&format!("{prefix}.mlp"), dim, dim * MLP_RATIO);
}

pub(super) fn init(cfg: &BackboneConfig, init: &mut Init<'_>) {
    init_patch_embed(cfg, init);
    for i in 0..cfg.depth {
        init_encoder_block(init, &format!("blocks.{i}"), cfg.embed_dim);
    }
    init.layer_norm("norm", cfg.embed_dim);
}

pub(super) fn layout(cfg: &BackboneConfig) -> Vec<LayerInfo> {
    let g = cfg.image_side / cfg.patch_size;
    std::iter::once(LayerInfo::spatial("patch_embed".into(), g, g, cfg.embed_dim))
        .chain((0..cfg.depth).map(|i| LayerInfo::spatial(format!("blocks.{i}"), g, g, cfg.embed_dim)))
        .collect()
}

/// Splits a `[3, side, side]` image into non-overlapping patches, projects
/// each flattened patch to `embed_dim` and adds the positional embedding
/// (`patch_embed.proj.*`, `pos_embed`). Returns `[(side/patch)², embed_dim]`.
pub fn patch_embed(ctx: &mut Ctx<'_>, img: Var, patch: usize) -> Result<Var> {
    let s = ctx.g.shape(img).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("patch_embed expects [3, h, w], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if h != w {
        return Err(Error::Input(format!("patch_embed expects a square image, got {h}x{w}")));
    }
    token_count(h, patch)?;
    let tokens = ctx.to_tokens(img);
    let geom = ConvGeom {
        h,
        w,
        c_in: 3,
        kernel: patch,
        stride: patch,
        pad: 0,
    };
    let x = ctx.conv2d(tokens, geom, "patch_embed.proj");
    let pos = ctx.param("pos_embed");
    Ok(ctx.g.add(x, pos))
}

/// Multi-head self-attention over a `[n, d]` token sequence.
pub fn mhsa(ctx: &mut Ctx<'_>, tokens: Var, heads: usize, prefix: &str) -> Result<Attention> {
    let d = ctx.g.shape(tokens)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("heads {heads} must divide token dim {d}")));
    }
    Ok(ctx.attention(tokens, 1, heads, prefix))
}

/// Pre-norm encoder block over `groups` independent token sequences.
pub(super) fn encoder_block(ctx: &mut Ctx<'_>, x: Var, groups: usize, heads: usize, prefix: &str) -> Var {
    let y = ctx.layer_norm(x, &format!("{prefix}.norm1"));
    let a = ctx.attention(y, groups, heads, &format!("{prefix}.attn")).out;
    let a = ctx.dropout(a);
    let x = ctx.g.add(x, a);
    let y = ctx.layer_norm(x, &format!("{prefix}.norm2"));
    let m = ctx.mlp(y, &format!("{prefix}.mlp"));
    let m = ctx.dropout(m);
    ctx.g.add(x, m)
}

pub(super) fn pool(ctx: &mut Ctx<'_>, x: Var) -> Var {
    let x = ctx.layer_norm(x, "norm");
    ctx.g.mean_rows(x)
}

pub(super) fn trunk(ctx: &mut Ctx<'_>, cfg: &BackboneConfig, img: Var) -> (Var, Vec<Var>) {
    let mut x = patch_embed(ctx, img, cfg.patch_size).expect("validated config");
    let mut taps = vec![x];
    for i in 0..cfg.depth {
        x = encoder_block(ctx, x, 1, cfg.heads, &format!("blocks.{i}"));
        taps.push(x);
    }
    (pool(ctx, x), taps)
}
