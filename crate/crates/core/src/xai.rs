//! Grad-CAM and Grad-CAM++ heatmaps over registered layers, overlays and
//! bounding-box localisation scores.
//!
//! Token-grid layers are probed by viewing the token sequence as its
//! spatial grid. Grad-CAM++ uses the usual exponential-score substitution:
//! with `S = exp(y_c)` the higher derivatives reduce to powers of the
//! first-order gradient `g`, so `α = g² / (2g² + Σ A·g³)` and the constant
//! `S` factor vanishes under normalisation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stroke_autograd::{Graph, Var};

use crate::backbones::{BackboneModel, ForwardMode, LayerInfo, LayerTag};
use crate::data::{BoundingBox, StrokeClass, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::preprocess::{resize_plane, ImageTensor, ValueRange};

pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamVariant {
    Gradcam,
    Gradcampp,
}

impl CamVariant {
    pub fn name(self) -> &'static str {
        match self {
            CamVariant::Gradcam => "gradcam",
            CamVariant::Gradcampp => "gradcampp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub depth_tag: LayerTag,
    pub layer_name: String,
}

/// Anything exposing a layer registry and a differentiable forward pass.
pub trait CamModel {
    fn layer_registry(&self) -> &[LayerInfo];
    fn input_side(&self) -> usize;
    /// Logits and registry-ordered activations for a `[3, side, side]` input.
    fn forward_taps(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)>;
}

impl CamModel for BackboneModel {
    fn layer_registry(&self) -> &[LayerInfo] {
        BackboneModel::layer_registry(self)
    }

    fn input_side(&self) -> usize {
        self.config().image_side
    }

    fn forward_taps(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<Var>)> {
        let out = self.forward(g, x, ForwardMode::Eval)?;
        Ok((out.logits, out.taps))
    }
}

/// Activations and class-score gradients at one spatial layer, both
/// channel-major `C × h × w`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCapture {
    pub layer_name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activations: Vec<f64>,
    pub gradients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub values: Vec<f64>,
    pub layer_name: String,
    pub target_class: StrokeClass,
    pub variant: CamVariant,
    /// The raw map was identically zero; `values` are all 0.
    pub degenerate: bool,
}

fn find_layer<'a>(registry: &'a [LayerInfo], name: &str) -> Result<(usize, &'a LayerInfo)> {
    registry
        .iter()
        .enumerate()
        .find(|(_, l)| l.name == name)
        .or_else(|| registry.iter().enumerate().find(|(_, l)| l.internal == name))
        .ok_or_else(|| {
            let names: Vec<&str> = registry.iter().map(|l| l.name.as_str()).collect();
            Error::Probe(format!("unknown layer `{name}`; available: {}", names.join(", ")))
        })
}

/// Runs the model on `img` (already preprocessed for inference) and
/// captures the probed layer's activations and `∂y_c/∂A`.
pub fn capture<M: CamModel + ?Sized>(
    model: &M,
    img: &ImageTensor,
    target_class: StrokeClass,
    layer_name: &str,
) -> Result<FeatureCapture> {
    let (idx, info) = find_layer(model.layer_registry(), layer_name)?;
    let Some((h, w)) = info.grid else {
        return Err(Error::Probe(format!("layer `{layer_name}` has no spatial grid")));
    };
    let c = info.channels;
    let mut g = Graph::new();
    // A differentiable input keeps every activation on the gradient path,
    // even when the backbone parameters are frozen.
    let x = g.variable(img.to_tensor());
    let (logits, taps) = model.forward_taps(&mut g, x)?;
    let tap = taps[idx];
    if g.shape(tap) != [h * w, c] {
        return Err(Error::Probe(format!(
            "layer `{layer_name}` produced {:?}, registry says {}x{}x{c}",
            g.shape(tap),
            h,
            w
        )));
    }
    let n = g.shape(logits).iter().product::<usize>();
    let mut seed = vec![0.0; n];
    seed[target_class.id()] = 1.0;
    let grads = g.backward_with(logits, seed);
    let gtap = grads
        .get(tap)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; h * w * c]);
    let act = g.value(tap).data();
    let to_cm = |tm: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; tm.len()];
        for p in 0..h * w {
            for k in 0..c {
                out[k * h * w + p] = tm[p * c + k];
            }
        }
        out
    };
    Ok(FeatureCapture {
        layer_name: info.name.clone(),
        channels: c,
        height: h,
        width: w,
        activations: to_cm(act),
        gradients: to_cm(&gtap),
    })
}

/// Channel weights for the chosen variant.
pub fn channel_weights(cap: &FeatureCapture, variant: CamVariant) -> Vec<f64> {
    let hw = cap.height * cap.width;
    (0..cap.channels)
        .map(|k| {
            let a = &cap.activations[k * hw..(k + 1) * hw];
            let gr = &cap.gradients[k * hw..(k + 1) * hw];
            match variant {
                CamVariant::Gradcam => gr.iter().sum::<f64>() / hw as f64,
                CamVariant::Gradcampp => {
                    let a_sum: f64 = a.iter().sum();
                    gr.iter()
                        .map(|&g| {
                            let g2 = g * g;
                            let den = 2.0 * g2 + a_sum * g2 * g;
                            let alpha = if den != 0.0 { g2 / den } else { 0.0 };
                            alpha * g.max(0.0)
                        })
                        .sum()
                }
            }
        })
        .collect()
}

/// Weighted ReLU map, bilinear upsampling to `out × out`, min-max
/// normalisation.
pub fn heatmap_from_capture(
    cap: &FeatureCapture,
    variant: CamVariant,
    target_class: StrokeClass,
    out_h: usize,
    out_w: usize,
) -> Heatmap {
    let hw = cap.height * cap.width;
    let weights = channel_weights(cap, variant);
    let raw: Vec<f64> = (0..hw)
        .map(|p| {
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * cap.activations[k * hw + p])
                .sum();
            s.max(0.0)
        })
        .collect();
    let up = resize_plane(&raw, cap.height, cap.width, out_h, out_w);
    let (values, degenerate) = normalize_map(up);
    Heatmap {
        height: out_h,
        width: out_w,
        values,
        layer_name: cap.layer_name.clone(),
        target_class,
        variant,
        degenerate,
    }
}

fn normalize_map(mut v: Vec<f64>) -> (Vec<f64>, bool) {
    for x in &mut v {
        *x = x.max(0.0);
    }
    let max = v.iter().copied().fold(0.0, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !max.is_finite() {
        return (vec![0.0; v.len()], true);
    }
    if max - min > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x - min) / (max - min));
    } else {
        v.iter_mut().for_each(|x| *x /= max);
    }
    (v, false)
}

fn cam<M: CamModel + ?Sized>(
    model: &M,
    img: &ImageTensor,
    target_class: StrokeClass,
    probe: &LayerProbe,
    variant: CamVariant,
) -> Result<Heatmap> {
    let cap = capture(model, img, target_class, &probe.layer_name)?;
    Ok(heatmap_from_capture(&cap, variant, target_class, img.height(), img.width()))
}

pub fn gradcam<M: CamModel + ?Sized>(model: &M, img: &ImageTensor, target_class: StrokeClass, probe: &LayerProbe) -> Result<Heatmap> {
    cam(model, img, target_class, probe, CamVariant::Gradcam)
}

pub fn gradcampp<M: CamModel + ?Sized>(model: &M, img: &ImageTensor, target_class: StrokeClass, probe: &LayerProbe) -> Result<Heatmap> {
    cam(model, img, target_class, probe, CamVariant::Gradcampp)
}

pub fn explain<M: CamModel + ?Sized>(
    model: &M,
    img: &ImageTensor,
    target_class: StrokeClass,
    probe: &LayerProbe,
    variant: CamVariant,
) -> Result<Heatmap> {
    cam(model, img, target_class, probe, variant)
}

/// Early, middle and last spatial layers in registry order.
pub fn resolve_probes<M: CamModel + ?Sized>(model: &M) -> Result<[LayerProbe; 3]> {
    let spatial: Vec<&LayerInfo> = model.layer_registry().iter().filter(|l| l.is_spatial()).collect();
    if spatial.len() < 3 {
        let names: Vec<&str> = spatial.iter().map(|l| l.name.as_str()).collect();
        return Err(Error::Probe(format!(
            "need at least 3 spatial layers, found [{}]",
            names.join(", ")
        )));
    }
    let pick = |i: usize, depth_tag| LayerProbe {
        depth_tag,
        layer_name: spatial[i].name.clone(),
    };
    Ok([
        pick(0, LayerTag::Early),
        pick(spatial.len() / 2, LayerTag::Mid),
        pick(spatial.len() - 1, LayerTag::Deep),
    ])
}

/// Probes from explicit layer names, tagged early/mid/deep in order.
pub fn probes_from_names<M: CamModel + ?Sized>(model: &M, names: &[String]) -> Result<Vec<LayerProbe>> {
    let tags = [LayerTag::Early, LayerTag::Mid, LayerTag::Deep];
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let (_, info) = find_layer(model.layer_registry(), n)?;
            if !info.is_spatial() {
                return Err(Error::Probe(format!("layer `{n}` has no spatial grid")));
            }
            Ok(LayerProbe {
                depth_tag: tags[i.min(2)],
                layer_name: info.name.clone(),
            })
        })
        .collect()
}

/// Blue (0) → green (0.5) → red (1).
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        [0.0, 2.0 * v, 1.0 - 2.0 * v]
    } else {
        [2.0 * v - 1.0, 2.0 - 2.0 * v, 0.0]
    }
}

/// `(1 − alpha)·img + alpha·colormap(h)` on a unit-range image.
pub fn overlay(h: &Heatmap, img: &ImageTensor, alpha: f64) -> Result<ImageTensor> {
    if (img.height(), img.width()) != (h.height, h.width) {
        return Err(Error::Input(format!(
            "heatmap {}x{} does not match image {}x{}",
            h.height,
            h.width,
            img.height(),
            img.width()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Input(format!("alpha {alpha} outside [0, 1]")));
    }
    if img.range() != ValueRange::Unit {
        return Err(Error::Input("overlay needs a unit-range image".into()));
    }
    let n = h.height * h.width;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        let c = colormap(h.values[p]);
        for ch in 0..3 {
            data[ch * n + p] = ((1.0 - alpha) * img.channel(ch)[p] + alpha * c[ch]).clamp(0.0, 1.0);
        }
    }
    ImageTensor::new(h.height, h.width, data, ValueRange::Unit)
}

/// Share of the top `mass_fraction` of heatmap mass (pixels ranked by
/// value) that lies inside `bbox`. Pixels tied at the cut-off value are
/// included fractionally, so a uniform map scores the box's area share.
/// Degenerate maps score 0.
pub fn localization_score(h: &Heatmap, bbox: &BoundingBox, mass_fraction: f64) -> Result<f64> {
    if !(mass_fraction > 0.0 && mass_fraction <= 1.0) {
        return Err(Error::Input(format!("mass_fraction {mass_fraction} outside (0, 1]")));
    }
    if bbox.x1 > h.width || bbox.y1 > h.height || bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
        return Err(Error::Input(format!("box {bbox:?} outside {}x{} heatmap", h.width, h.height)));
    }
    let total: f64 = h.values.iter().sum();
    if h.degenerate || !(total > 0.0) {
        return Ok(0.0);
    }
    let target = mass_fraction * total;
    let mut order: Vec<usize> = (0..h.values.len()).collect();
    order.sort_by(|&a, &b| h.values[b].total_cmp(&h.values[a]));

    let inside = |p: usize| bbox.contains(p % h.width, p / h.width);
    let (mut taken, mut taken_in) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() && taken < target {
        let v = h.values[order[i]];
        if v <= 0.0 {
            break;
        }
        let mut j = i;
        let (mut group, mut group_in) = (0.0, 0.0);
        while j < order.len() && h.values[order[j]] == v {
            group += v;
            if inside(order[j]) {
                group_in += v;
            }
            j += 1;
        }
        let lambda = ((target - taken) / group).min(1.0);
        taken += lambda * group;
        taken_in += lambda * group_in;
        i = j;
    }
    Ok(if taken > 0.0 { taken_in / taken } else { 0.0 })
}

/// Writes a unit-range image as 8-bit RGB PNG.
pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut buf = Vec::with_capacity(3 * n);
    for p in 0..n {
        for c in 0..3 {
            buf.push((img.channel(c)[p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches size")
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

/// Raw heatmap dump: one comma-separated row per image row, values with
/// full round-trip precision.
pub fn write_heatmap_grid(h: &Heatmap, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(h.values.len() * 20);
    for row in h.values.chunks(h.width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap_grid(path: &Path) -> Result<Vec<Vec<f64>>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .map(|l| {
            l.split(',')
                .map(|c| c.parse::<f64>().map_err(|e| Error::Input(format!("{}: {e}", path.display()))))
                .collect()
        })
        .collect()
}

pub fn l1_distance(a: &Heatmap, b: &Heatmap) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum()
}

/// A class other than `c`.
pub fn other_class(c: StrokeClass) -> StrokeClass {
    StrokeClass::from_id((c.id() + 1) % NUM_CLASSES).expect("valid id")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, w: usize) -> Heatmap {
        Heatmap {
            height: values.len() / w,
            width: w,
            values,
            layer_name: "x".into(),
            target_class: StrokeClass::Normal,
            variant: CamVariant::Gradcam,
            degenerate: false,
        }
    }

    #[test]
    fn uniform_map_scores_box_area() {
        let h = map(vec![0.7; 64], 8);
        let b = BoundingBox { x0: 0, y0: 0, x1: 4, y1: 4 };
        assert!((localization_score(&h, &b, 0.1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn contained_map_scores_one() {
        let mut v = vec![0.0; 64];
        v[9] = 1.0;
        v[10] = 0.5;
        let h = map(v, 8);
        let b = BoundingBox { x0: 1, y0: 1, x1: 3, y1: 2 };
        assert_eq!(localization_score(&h, &b, 1.0).unwrap(), 1.0);
        assert_eq!(localization_score(&h, &b, 0.1).unwrap(), 1.0);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
    }
}
