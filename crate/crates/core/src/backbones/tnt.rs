//! Transformer-in-Transformer. Each patch ("sentence") is subdivided into
//! `(patch/inner)²` sub-patches ("words"); an inner transformer mixes words
//! within a patch, their flattened representation is projected onto the
//! sentence token, and an outer transformer runs over sentences. Outer
//! parameters share ViT's names, so a TNT with a zero inner projection is
//! exactly a ViT.

use std::sync::Arc;

use stroke_autograd::Var;

use super::layers::{Ctx, Init, MLP_RATIO};
use super::vit;
use super::{BackboneConfig, LayerInfo};
use crate::error::{Error, Result};

/// Inner (word) embedding width.
pub fn inner_dim(cfg: &BackboneConfig) -> usize {
    cfg.embed_dim / 4
}

pub fn words_per_patch(cfg: &BackboneConfig) -> usize {
    (cfg.patch_size / cfg.inner_patch_size).pow(2)
}

pub(super) fn validate(cfg: &BackboneConfig) -> Result<()> {
    vit::validate(cfg)?;
    if cfg.inner_patch_size == 0 || cfg.patch_size % cfg.inner_patch_size != 0 {
        return Err(Error::Config(format!(
            "patch size {} not divisible by inner patch size {}",
            cfg.patch_size, cfg.inner_patch_size
        )));
    }
    if cfg.embed_dim % (4 * cfg.heads) != 0 {
        return Err(Error::Config(format!(
            "embed_dim {} must be divisible by 4·heads so the inner width splits across heads",
            cfg.embed_dim
        )));
    }
    Ok(())
}

pub(super) fn init(cfg: &BackboneConfig, init: &mut Init<'_>) {
    let di = inner_dim(cfg);
    let m = words_per_patch(cfg);
    let ip = cfg.inner_patch_size;
    vit::init_patch_embed(cfg, init);
    init.linear("word_embed.proj", 3 * ip * ip, di);
    init.constant("word_pos", &[m, di], 0.0);
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        init.layer_norm(&format!("{p}.inner_norm1"), di);
        init.attention(&format!("{p}.inner_attn"), di);
        init.layer_norm(&format!("{p}.inner_norm2"), di);
        init.mlp(&format!("{p}.inner_mlp"), di, di * MLP_RATIO);
        init.layer_norm(&format!("{p}.proj_norm"), di);
        init.linear(&format!("{p}.inner_proj"), m * di, cfg.embed_dim);
        vit::init_encoder_block(init, &p, cfg.embed_dim);
    }
    init.layer_norm("norm", cfg.embed_dim);
}

pub(super) fn layout(cfg: &BackboneConfig) -> Vec<LayerInfo> {
    vit::layout(cfg)
}

/// Gather map extracting word pixels: rows `patch·m + word`, columns
/// `(c, y, x)` within the inner patch.
fn word_pixels(side: usize, patch: usize, inner: usize) -> Arc<[usize]> {
    let g = side / patch;
    let q = patch / inner;
    let mut idx = Vec::with_capacity(3 * side * side);
    for py in 0..g {
        for px in 0..g {
            for wy in 0..q {
                for wx in 0..q {
                    for c in 0..3 {
                        for a in 0..inner {
                            for b in 0..inner {
                                let y = py * patch + wy * inner + a;
                                let x = px * patch + wx * inner + b;
                                idx.push((c * side + y) * side + x);
                            }
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// One TNT block: inner transformer over `words [n·m, di]`, projection into
/// `sentences [n, D]`, then the outer encoder block. Returns both streams.
pub fn tnt_block(
    ctx: &mut Ctx<'_>,
    sentences: Var,
    words: Var,
    words_per_patch: usize,
    heads: usize,
    prefix: &str,
) -> (Var, Var) {
    let (rows, di) = {
        let s = ctx.g.shape(words);
        (s[0], s[1])
    };
    let n = rows / words_per_patch;
    let y = ctx.layer_norm(words, &format!("{prefix}.inner_norm1"));
    let a = ctx.attention(y, n, heads, &format!("{prefix}.inner_attn")).out;
    let a = ctx.dropout(a);
    let words = ctx.g.add(words, a);
    let y = ctx.layer_norm(words, &format!("{prefix}.inner_norm2"));
    let m = ctx.mlp(y, &format!("{prefix}.inner_mlp"));
    let m = ctx.dropout(m);
    let words = ctx.g.add(words, m);

    let flat = ctx.layer_norm(words, &format!("{prefix}.proj_norm"));
    let flat = ctx.g.reshape(flat, vec![n, words_per_patch * di]);
    let proj = ctx.linear(flat, &format!("{prefix}.inner_proj"));
    let sentences = ctx.g.add(sentences, proj);
    let sentences = vit::encoder_block(ctx, sentences, 1, heads, prefix);
    (sentences, words)
}

pub(super) fn trunk(ctx: &mut Ctx<'_>, cfg: &BackboneConfig, img: Var) -> (Var, Vec<Var>) {
    let n = (cfg.image_side / cfg.patch_size).pow(2);
    let m = words_per_patch(cfg);
    let ip = cfg.inner_patch_size;
    let di = inner_dim(cfg);
    let mut sentences = vit::patch_embed(ctx, img, cfg.patch_size).expect("validated config");
    let px = ctx.g.gather(
        img,
        word_pixels(cfg.image_side, cfg.patch_size, ip),
        vec![n * m, 3 * ip * ip],
    );
    let mut words = ctx.linear(px, "word_embed.proj");
    let pos = ctx.param("word_pos");
    words = ctx.g.add_broadcast(words, pos, 1);
    debug_assert_eq!(ctx.g.shape(words), [n * m, di]);
    let mut taps = vec![sentences];
    for i in 0..cfg.depth {
        (sentences, words) = tnt_block(ctx, sentences, words, m, cfg.heads, &format!("blocks.{i}"));
        taps.push(sentences);
    }
    (vit::pool(ctx, sentences), taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_map_is_a_permutation() {
        let idx = word_pixels(32, 16, 4);
        let mut seen = vec![false; 3 * 32 * 32];
        for &i in idx.iter() {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
