//! Image loading, normalisation and the classical augmentation policy.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use stroke_autograd::Tensor;

use crate::error::{Error, Result};
use crate::seed;

pub const CHANNELS: usize = 3;
pub const DEFAULT_SIDE: usize = 224;
pub const MIN_SIDE: usize = 32;

/// Channel statistics of the large natural-image corpus most pretrained
/// backbones were trained on.
pub const PRETRAINED_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PRETRAINED_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Constants used for backbones trained from scratch.
pub const SCRATCH_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const SCRATCH_STD: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    Unit,
    Standardized,
}

/// Channel-major `3 × H × W` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a 3×{height}×{width} image",
                data.len()
            )));
        }
        if range == ValueRange::Unit && data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage("unit-range image has values outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            range,
        })
    }

    /// Replicates a single grey plane across all three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * gray.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(gray);
        }
        Self::new(height, width, data, ValueRange::Unit)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [CHANNELS, self.height, self.width]
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape().to_vec(), self.data.clone())
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| (0..CHANNELS).map(|c| self.data[c * n + i]).sum::<f64>() / CHANNELS as f64)
            .collect()
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // Exact when a == b, so constant images survive interpolation unchanged.
    a + t * (b - a)
}

/// Bilinear sample at continuous pixel coordinates with edge clamping.
fn sample_clamped(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
    let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
    lerp(top, bottom, ty)
}

/// Bilinear sample that treats everything outside the image as zero.
fn sample_zero(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    let top = lerp(at(y0, x0), at(y0, x0 + 1.0), tx);
    let bottom = lerp(at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0), tx);
    lerp(top, bottom, ty)
}

/// Bilinear resize of one plane with half-pixel centres.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out.push(sample_clamped(src, h, w, fy, fx));
        }
    }
    out
}

/// Decodes a PNG, scales it to `[0, 1]`, resizes to `side × side` and
/// replicates grey images to three channels.
pub fn load_and_resize(path: &Path, side: usize) -> Result<ImageTensor> {
    if side < MIN_SIDE {
        return Err(Error::Parameter(format!("side {side} below minimum {MIN_SIDE}")));
    }
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!("{} has zero size", path.display())));
    }
    let is_gray = !img.color().has_color();
    if is_gray {
        let gray: Vec<f64> = img.to_luma32f().into_raw().into_iter().map(f64::from).collect();
        let plane = resize_plane(&gray, h, w, side, side);
        ImageTensor::from_gray(side, side, &plane)
    } else {
        let rgb = img.to_rgb32f().into_raw();
        let mut data = Vec::with_capacity(CHANNELS * side * side);
        for c in 0..CHANNELS {
            let plane: Vec<f64> = rgb.iter().skip(c).step_by(CHANNELS).map(|&v| f64::from(v)).collect();
            data.extend(resize_plane(&plane, h, w, side, side));
        }
        ImageTensor::new(side, side, data, ValueRange::Unit)
    }
}

/// `(x − mean_c) / std_c` per channel.
pub fn normalize(img: &ImageTensor, mean: [f64; 3], std: [f64; 3]) -> Result<ImageTensor> {
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Parameter(format!("normalisation std {s} must be positive")));
    }
    let n = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i / n]) / std[i / n])
        .collect();
    Ok(ImageTensor {
        data,
        range: ValueRange::Standardized,
        ..*img
    })
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &ImageTensor, mean: [f64; 3], std: [f64; 3]) -> ImageTensor {
    let n = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| v * std[i / n] + mean[i / n])
        .collect();
    ImageTensor {
        data,
        range: ValueRange::Unit,
        ..*img
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub crop_scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub rotation_max_degrees: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub enabled: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.8, 1.0),
            hflip_prob: 0.5,
            rotation_max_degrees: 15.0,
            jitter_brightness: 0.1,
            jitter_contrast: 0.1,
            enabled: true,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Enabled policy where every transform is a no-op.
    pub fn identity() -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            rotation_max_degrees: 0.0,
            jitter_brightness: 0.0,
            jitter_contrast: 0.0,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Parameter(format!(
                "crop_scale_range ({lo}, {hi}) must satisfy 0 < low <= high <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Parameter(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        for (name, v) in [
            ("rotation_max_degrees", self.rotation_max_degrees),
            ("jitter_brightness", self.jitter_brightness),
            ("jitter_contrast", self.jitter_contrast),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Parameter(format!("{name} {v} must be non-negative")));
            }
        }
        Ok(())
    }
}

fn map_planes(img: &ImageTensor, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    (0..CHANNELS).flat_map(|c| f(img.channel(c))).collect()
}

fn random_resized_crop(img: &ImageTensor, scale: f64, rng: &mut seed::Rng) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let ch = ((scale.sqrt() * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale.sqrt() * w as f64).round() as usize).clamp(1, w);
    let oy = rng.random_range(0..=h - ch);
    let ox = rng.random_range(0..=w - cw);
    if ch == h && cw == w {
        return img.data.clone();
    }
    map_planes(img, |plane| {
        let crop: Vec<f64> = (oy..oy + ch)
            .flat_map(|y| plane[y * w + ox..y * w + ox + cw].iter().copied())
            .collect();
        resize_plane(&crop, ch, cw, h, w)
    })
}

fn hflip(img: &ImageTensor) -> Vec<f64> {
    let w = img.width;
    map_planes(img, |plane| {
        plane
            .chunks(w)
            .flat_map(|row| row.iter().rev().copied())
            .collect()
    })
}

fn rotate(img: &ImageTensor, degrees: f64) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    map_planes(img, |plane| {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                // Inverse map: rotate the output coordinate back into the source.
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                out.push(sample_zero(plane, h, w, sy, sx));
            }
        }
        out
    })
}

/// Applies crop, flip, rotation and brightness/contrast jitter, in that
/// order, with randomness drawn only from `seed`. Output is clamped to
/// `[0, 1]`.
pub fn augment(img: &ImageTensor, policy: &AugmentPolicy, seed: u64) -> Result<ImageTensor> {
    if img.range != ValueRange::Unit || img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Ordering);
    }
    policy.validate()?;
    if !policy.enabled {
        return Ok(img.clone());
    }
    let mut rng = seed::rng(seed);
    let mut cur = img.clone();

    let (lo, hi) = policy.crop_scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    if scale < 1.0 {
        cur.data = random_resized_crop(&cur, scale, &mut rng);
    }
    if rng.random::<f64>() < policy.hflip_prob {
        cur.data = hflip(&cur);
    }
    if policy.rotation_max_degrees > 0.0 {
        let m = policy.rotation_max_degrees;
        let angle = rng.random_range(-m..=m);
        cur.data = rotate(&cur, angle);
    }
    if policy.jitter_brightness > 0.0 {
        let j = policy.jitter_brightness;
        let b = rng.random_range(1.0 - j..=1.0 + j);
        cur.data.iter_mut().for_each(|v| *v *= b);
    }
    if policy.jitter_contrast > 0.0 {
        let j = policy.jitter_contrast;
        let c = rng.random_range(1.0 - j..=1.0 + j);
        let mean = cur.data.iter().sum::<f64>() / cur.data.len() as f64;
        cur.data.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    }
    cur.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(cur)
}
