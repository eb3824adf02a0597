//! Parameter initialisation and differentiable building blocks shared by
//! the backbones. Feature maps are token-major: `[h·w, channels]`, rows in
//! raster order.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use stroke_autograd::{Graph, ParamSet, Tensor, Var, NONE};

use crate::seed;

pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

/// Seeded parameter initialiser writing into a [`ParamSet`].
pub struct Init<'a> {
    params: &'a mut ParamSet,
    rng: seed::Rng,
}

impl<'a> Init<'a> {
    pub fn new(params: &'a mut ParamSet, seed: u64) -> Self {
        Self {
            params,
            rng: seed::rng(seed),
        }
    }

    /// Normal(0, 0.02²) truncated at two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize]) {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            })
            .collect();
        self.params.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// Untruncated Normal(0, std²).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.params.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape.to_vec(), value));
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.trunc_normal(&format!("{prefix}.weight"), &[fan_in, fan_out]);
        self.constant(&format!("{prefix}.bias"), &[fan_out], 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(&format!("{prefix}.weight"), &[dim], 1.0);
        self.constant(&format!("{prefix}.bias"), &[dim], 0.0);
    }

    /// Dense convolution kernel stored as `[k·k·c_in, c_out]`.
    pub fn conv(&mut self, prefix: &str, kernel: usize, c_in: usize, c_out: usize) {
        self.linear(prefix, kernel * kernel * c_in, c_out);
    }

    /// Depthwise kernel stored as `[k·k, channels]`.
    pub fn depthwise(&mut self, prefix: &str, kernel: usize, channels: usize) {
        self.trunc_normal(&format!("{prefix}.weight"), &[kernel * kernel, channels]);
        self.constant(&format!("{prefix}.bias"), &[channels], 0.0);
    }

    pub fn mlp(&mut self, prefix: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), dim, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, dim);
    }

    pub fn attention(&mut self, prefix: &str, dim: usize) {
        self.linear(&format!("{prefix}.qkv"), dim, 3 * dim);
        self.linear(&format!("{prefix}.proj"), dim, dim);
    }
}

/// Output of one multi-head self-attention call.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub out: Var,
    /// Row-stochastic attention weights, `[groups·heads, t, t]`.
    pub probs: Var,
}

/// Spatial geometry of a dense convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// im2col gather map: rows are output positions, columns `(ki, kj, c)`.
    pub fn im2col(&self) -> Arc<[usize]> {
        let (ho, wo) = self.out_hw();
        let k = self.kernel;
        let mut idx = Vec::with_capacity(ho * wo * k * k * self.c_in);
        for oy in 0..ho {
            for ox in 0..wo {
                for ki in 0..k {
                    let y = (oy * self.stride + ki) as isize - self.pad as isize;
                    for kj in 0..k {
                        let x = (ox * self.stride + kj) as isize - self.pad as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w;
                        for c in 0..self.c_in {
                            idx.push(if inside {
                                (y as usize * self.w + x as usize) * self.c_in + c
                            } else {
                                NONE
                            });
                        }
                    }
                }
            }
        }
        idx.into()
    }

    /// Scatter map of the transposed convolution with the same geometry:
    /// input rows are `h·w` positions, columns `(ki, kj, c_out)`; targets
    /// are positions in the `[out_h·out_w, c_out]` output.
    pub fn col2im_transposed(&self, c_out: usize) -> (Arc<[usize]>, usize, usize) {
        let k = self.kernel;
        let ho = (self.h - 1) * self.stride + k - 2 * self.pad;
        let wo = (self.w - 1) * self.stride + k - 2 * self.pad;
        let mut idx = Vec::with_capacity(self.h * self.w * k * k * c_out);
        for iy in 0..self.h {
            for ix in 0..self.w {
                for ki in 0..k {
                    let y = (iy * self.stride + ki) as isize - self.pad as isize;
                    for kj in 0..k {
                        let x = (ix * self.stride + kj) as isize - self.pad as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < ho && (x as usize) < wo;
                        for c in 0..c_out {
                            idx.push(if inside {
                                (y as usize * wo + x as usize) * c_out + c
                            } else {
                                NONE
                            });
                        }
                    }
                }
            }
        }
        (idx.into(), ho, wo)
    }
}

/// Expands a row permutation (`new row r ← old row perm[r]`) to an element map.
pub fn row_gather_map(perm: &[usize], cols: usize) -> Arc<[usize]> {
    perm.iter()
        .flat_map(|&r| (0..cols).map(move |c| r * cols + c))
        .collect()
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Differentiable layer context over one [`Graph`].
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamSet,
    trainable: &'a dyn Fn(&str) -> bool,
    dropout: Option<(f64, seed::Rng)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamSet, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            g,
            params,
            trainable,
            dropout: None,
        }
    }

    /// Enables inverted dropout with drop probability `p`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, seed::rng(seed)));
        }
        self
    }

    pub fn param(&mut self, name: &str) -> Var {
        let t = self.params.expect(name);
        let trainable = (self.trainable)(name);
        self.g.param(name, t, trainable)
    }

    pub fn param_shape(&self, name: &str) -> &[usize] {
        self.params.expect(name).shape()
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, rng)) = self.dropout.as_mut() else {
            return x;
        };
        let p = *p;
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.g.constant(Tensor::from_parts(shape, mask));
        self.g.mul(x, m)
    }

    /// `x · W + b` on the last axis of a `[rows, in]` input.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let y = self.g.matmul(x, w);
        self.g.add_bias(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let n = self.g.layer_norm(x, LN_EPS);
        let s = self.g.mul_bias(n, w);
        self.g.add_bias(s, b)
    }

    pub fn mlp(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.fc1"));
        let h = self.g.gelu(h);
        let h = self.dropout(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// Scaled dot-product multi-head self-attention applied independently to
    /// `groups` contiguous blocks of rows of `x: [groups·t, d]`.
    pub fn attention(&mut self, x: Var, groups: usize, heads: usize, prefix: &str) -> Attention {
        let (rows, d) = {
            let s = self.g.shape(x);
            (s[0], s[1])
        };
        assert!(rows % groups == 0 && d % heads == 0, "attention: bad grouping");
        let t = rows / groups;
        let dh = d / heads;
        let qkv = self.linear(x, &format!("{prefix}.qkv"));
        let bh = groups * heads;
        let mut q_idx = Vec::with_capacity(rows * d);
        let mut kt_idx = Vec::with_capacity(rows * d);
        let mut v_idx = Vec::with_capacity(rows * d);
        for gi in 0..groups {
            for h in 0..heads {
                for i in 0..t {
                    for j in 0..dh {
                        q_idx.push((gi * t + i) * 3 * d + h * dh + j);
                        v_idx.push((gi * t + i) * 3 * d + 2 * d + h * dh + j);
                    }
                }
                for j in 0..dh {
                    for i in 0..t {
                        kt_idx.push((gi * t + i) * 3 * d + d + h * dh + j);
                    }
                }
            }
        }
        let q = self.g.gather(qkv, q_idx.into(), vec![bh, t, dh]);
        let kt = self.g.gather(qkv, kt_idx.into(), vec![bh, dh, t]);
        let v = self.g.gather(qkv, v_idx.into(), vec![bh, t, dh]);
        let scores = self.g.matmul(q, kt);
        let scores = self.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = self.g.softmax(scores);
        let o = self.g.matmul(probs, v);
        let mut merge = Vec::with_capacity(rows * d);
        for gi in 0..groups {
            for i in 0..t {
                for h in 0..heads {
                    for j in 0..dh {
                        merge.push(((gi * heads + h) * t + i) * dh + j);
                    }
                }
            }
        }
        let merged = self.g.gather(o, merge.into(), vec![rows, d]);
        let out = self.linear(merged, &format!("{prefix}.proj"));
        Attention { out, probs }
    }

    /// Dense convolution of a token-major map; returns `[out_h·out_w, c_out]`.
    pub fn conv2d(&mut self, x: Var, geom: ConvGeom, prefix: &str) -> Var {
        let (ho, wo) = geom.out_hw();
        let k = geom.kernel;
        let cols = self
            .g
            .gather(x, geom.im2col(), vec![ho * wo, k * k * geom.c_in]);
        self.linear(cols, prefix)
    }

    /// Transposed convolution of a token-major map.
    pub fn conv_transpose2d(&mut self, x: Var, geom: ConvGeom, c_out: usize, prefix: &str) -> (Var, usize, usize) {
        let w = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let cols = self.g.matmul(x, w);
        let (idx, ho, wo) = geom.col2im_transposed(c_out);
        let y = self.g.scatter_add(cols, idx, vec![ho * wo, c_out]);
        (self.g.add_bias(y, b), ho, wo)
    }

    /// Same-padded depthwise convolution plus bias.
    pub fn depthwise(&mut self, x: Var, h: usize, w: usize, prefix: &str) -> Var {
        let k = self.param(&format!("{prefix}.weight"));
        let b = self.param(&format!("{prefix}.bias"));
        let y = self.g.depthwise_conv(x, k, h, w);
        self.g.add_bias(y, b)
    }

    /// Converts a channel-major `[c, h, w]` node to token-major `[h·w, c]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let s = self.g.shape(x).to_vec();
        let (c, hw) = (s[0], s[1..].iter().product::<usize>());
        let flat = self.g.reshape(x, vec![c, hw]);
        self.g.transpose(flat)
    }
}
