//! MaxViT: hierarchical stages of multi-axis blocks. Each block runs an
//! MBConv unit (pointwise expansion, 3×3 depthwise, pointwise projection),
//! then block attention within non-overlapping P×P windows, then grid
//! attention over tokens that share the same position inside their window.

use stroke_autograd::Var;

use super::convnext::{check_stage_sides, init_stem_and_downsample, stage_dims, stem_or_downsample};
use super::layers::{invert_permutation, row_gather_map, Ctx, Init, MLP_RATIO};
use super::{BackboneConfig, LayerInfo};
use crate::error::{Error, Result};

const MBCONV_KERNEL: usize = 3;

pub(super) fn validate(cfg: &BackboneConfig) -> Result<()> {
    if cfg.window_size == 0 {
        return Err(Error::Config("window_size must be positive".into()));
    }
    check_stage_sides(cfg, cfg.window_size)?;
    for (_, c) in stage_dims(cfg) {
        if cfg.heads == 0 || c % cfg.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide stage width {c}", cfg.heads)));
        }
    }
    Ok(())
}

fn check_partition(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}x{w} map not divisible by window {p}")));
    }
    Ok(())
}

/// Token order of block attention: `(h/P)·(w/P)` windows of `P²` tokens,
/// windows and in-window positions in raster order. Entry `r` is the source
/// row of partitioned row `r`.
pub fn window_partition(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    check_partition(h, w, p)?;
    let mut perm = Vec::with_capacity(h * w);
    for wy in 0..h / p {
        for wx in 0..w / p {
            for i in 0..p {
                for j in 0..p {
                    perm.push((wy * p + i) * w + wx * p + j);
                }
            }
        }
    }
    Ok(perm)
}

/// Token order of grid attention: `P²` groups of `(h/P)·(w/P)` tokens;
/// group `(i, j)` holds the token at offset `(i, j)` of every window.
pub fn grid_partition(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    check_partition(h, w, p)?;
    let mut perm = Vec::with_capacity(h * w);
    for i in 0..p {
        for j in 0..p {
            for a in 0..h / p {
                for b in 0..w / p {
                    perm.push((a * p + i) * w + b * p + j);
                }
            }
        }
    }
    Ok(perm)
}

pub fn init_block(init: &mut Init<'_>, prefix: &str, dim: usize) {
    let hidden = dim * MLP_RATIO;
    init.layer_norm(&format!("{prefix}.mbconv.norm"), dim);
    init.linear(&format!("{prefix}.mbconv.pw1"), dim, hidden);
    init.depthwise(&format!("{prefix}.mbconv.dw"), MBCONV_KERNEL, hidden);
    init.linear(&format!("{prefix}.mbconv.pw2"), hidden, dim);
    for axis in ["window", "grid"] {
        let p = format!("{prefix}.{axis}");
        init.layer_norm(&format!("{p}.norm1"), dim);
        init.attention(&format!("{p}.attn"), dim);
        init.layer_norm(&format!("{p}.norm2"), dim);
        init.mlp(&format!("{p}.mlp"), dim, hidden);
    }
}

pub(super) fn init(cfg: &BackboneConfig, init: &mut Init<'_>) {
    for (s, &(_, c)) in stage_dims(cfg).iter().enumerate() {
        init_stem_and_downsample(cfg, init, s);
        init_block(init, &format!("stages.{s}.block"), c);
    }
    init.layer_norm("norm", cfg.feature_dim());
}

pub(super) fn layout(cfg: &BackboneConfig) -> Vec<LayerInfo> {
    super::convnext::layout(cfg)
}

fn partitioned_attention(
    ctx: &mut Ctx<'_>,
    x: Var,
    perm: &[usize],
    groups: usize,
    heads: usize,
    prefix: &str,
) -> Var {
    let c = ctx.g.shape(x)[1];
    let rows = perm.len();
    let y = ctx.layer_norm(x, &format!("{prefix}.norm1"));
    let y = ctx.g.gather(y, row_gather_map(perm, c), vec![rows, c]);
    let a = ctx.attention(y, groups, heads, &format!("{prefix}.attn")).out;
    let back = ctx
        .g
        .gather(a, row_gather_map(&invert_permutation(perm), c), vec![rows, c]);
    let back = ctx.dropout(back);
    let x = ctx.g.add(x, back);
    let y = ctx.layer_norm(x, &format!("{prefix}.norm2"));
    let m = ctx.mlp(y, &format!("{prefix}.mlp"));
    let m = ctx.dropout(m);
    ctx.g.add(x, m)
}

/// Multi-axis block on a token-major `[h·w, C]` map.
pub fn maxvit_block(
    ctx: &mut Ctx<'_>,
    x: Var,
    h: usize,
    w: usize,
    window: usize,
    heads: usize,
    prefix: &str,
) -> Result<Var> {
    let win = window_partition(h, w, window)?;
    let grid = grid_partition(h, w, window)?;
    let c = ctx.g.shape(x)[1];
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("heads {heads} must divide channels {c}")));
    }

    let y = ctx.layer_norm(x, &format!("{prefix}.mbconv.norm"));
    let y = ctx.linear(y, &format!("{prefix}.mbconv.pw1"));
    let y = ctx.g.gelu(y);
    let y = ctx.depthwise(y, h, w, &format!("{prefix}.mbconv.dw"));
    let y = ctx.g.gelu(y);
    let y = ctx.linear(y, &format!("{prefix}.mbconv.pw2"));
    let y = ctx.dropout(y);
    let x = ctx.g.add(x, y);

    let windows = (h / window) * (w / window);
    let x = partitioned_attention(ctx, x, &win, windows, heads, &format!("{prefix}.window"));
    Ok(partitioned_attention(
        ctx,
        x,
        &grid,
        window * window,
        heads,
        &format!("{prefix}.grid"),
    ))
}

pub(super) fn trunk(ctx: &mut Ctx<'_>, cfg: &BackboneConfig, img: Var) -> (Var, Vec<Var>) {
    let mut x = img;
    let mut taps = Vec::with_capacity(cfg.depth + 1);
    for (s, &(side, _)) in stage_dims(cfg).iter().enumerate() {
        x = stem_or_downsample(ctx, cfg, x, s);
        if s == 0 {
            taps.push(x);
        }
        x = maxvit_block(ctx, x, side, side, cfg.window_size, cfg.heads, &format!("stages.{s}.block"))
            .expect("validated config");
        taps.push(x);
    }
    let d = cfg.feature_dim();
    let pooled = ctx.g.mean_rows(x);
    let pooled = ctx.g.reshape(pooled, vec![1, d]);
    let pooled = ctx.layer_norm(pooled, "norm");
    (ctx.g.reshape(pooled, vec![d]), taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        let w = window_partition(56, 56, 7).unwrap();
        let g = grid_partition(56, 56, 7).unwrap();
        assert_eq!(w.len(), 64 * 49);
        assert_eq!(g.len(), 49 * 64);
        // first window is the top-left 7x7 block; first grid group strides by 7
        assert_eq!(&w[..8], &[0, 1, 2, 3, 4, 5, 6, 56]);
        assert_eq!(&g[..3], &[0, 7, 14]);
        assert!(window_partition(10, 10, 3).is_err());
    }
}
