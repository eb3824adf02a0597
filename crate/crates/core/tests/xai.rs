use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stroke_autograd::{Graph, Var};
use stroke_core::backbones::{Arch, BackboneConfig, BackboneModel, LayerInfo, LayerTag};
use stroke_core::data::{BoundingBox, StrokeClass};
use stroke_core::preprocess::{ImageTensor, ValueRange};
use stroke_core::xai::{
    capture, gradcam, gradcampp, localization_score, overlay, read_heatmap_grid, resolve_probes,
    write_heatmap_grid, CamModel, CamVariant, Heatmap, LayerProbe,
};
use stroke_core::Error;

/// Exposes the input planes as a `side × side × 3` layer and scores class
/// `k` as the spatial mean of plane `k`.
struct ChannelMean {
    side: usize,
    registry: Vec<LayerInfo>,
}

impl ChannelMean {
    fn new(side: usize, extra_layers: usize) -> Self {
        let mut registry = vec![LayerInfo {
            name: "planes".into(),
            internal: "planes".into(),
            grid: Some((side, side)),
            channels: 3,
            tag: None,
        }];
        for i in 0..extra_layers {
            registry.push(LayerInfo {
                name: format!("copy{i}"),
                internal: format!("copy{i}"),
                grid: Some((side, side)),
                channels: 3,
                tag: None,
            });
        }
        Self { side, registry }
    }
}

impl CamModel for ChannelMean {
    fn layer_registry(&self) -> &[LayerInfo] {
        &self.registry
    }

    fn input_side(&self) -> usize {
        self.side
    }

    fn forward_taps(&self, g: &mut Graph, x: Var) -> stroke_core::Result<(Var, Vec<Var>)> {
        let flat = g.reshape(x, vec![3, self.side * self.side]);
        let a = g.transpose(flat);
        let logits = g.mean_rows(a);
        Ok((logits, vec![a; self.registry.len()]))
    }
}

fn probe() -> LayerProbe {
    LayerProbe {
        depth_tag: LayerTag::Deep,
        layer_name: "planes".into(),
    }
}

fn standardized(side: usize, seed: u64, lo: f64, hi: f64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * side * side).map(|_| rng.random_range(lo..hi)).collect();
    ImageTensor::new(side, side, data, ValueRange::Standardized).unwrap()
}

/// min-max normalised ReLU of plane 0, computed directly.
fn analytic(img: &ImageTensor) -> Vec<f64> {
    let r: Vec<f64> = img.channel(0).iter().map(|v| v.max(0.0)).collect();
    let max = r.iter().copied().fold(f64::MIN, f64::max);
    let min = r.iter().copied().fold(f64::MAX, f64::min);
    r.iter().map(|v| (v - min) / (max - min)).collect()
}

#[test]
fn gradcam_matches_analytic_map() {
    let m = ChannelMean::new(8, 0);
    for seed in 0..10 {
        let img = standardized(8, seed, -1.0, 1.0);
        let h = gradcam(&m, &img, StrokeClass::Normal, &probe()).unwrap();
        assert!(!h.degenerate);
        for (a, b) in h.values.iter().zip(analytic(&img)) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn captured_gradient_is_one_over_area() {
    let m = ChannelMean::new(6, 0);
    let img = standardized(6, 3, -1.0, 1.0);
    let cap = capture(&m, &img, StrokeClass::Normal, "planes").unwrap();
    let hw = 36;
    assert!(cap.gradients[..hw].iter().all(|&g| (g - 1.0 / hw as f64).abs() < 1e-15));
    assert!(cap.gradients[hw..].iter().all(|&g| g == 0.0));
    assert_eq!(&cap.activations[..hw], img.channel(0));
}

#[test]
fn gradcampp_equals_gradcam_under_uniform_gradients() {
    let m = ChannelMean::new(8, 0);
    for seed in 0..10 {
        let img = standardized(8, seed, 0.0, 2.0);
        for class in StrokeClass::ALL {
            let a = gradcam(&m, &img, class, &probe()).unwrap();
            let b = gradcampp(&m, &img, class, &probe()).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn negative_plane_gives_degenerate_map() {
    let m = ChannelMean::new(8, 0);
    let img = standardized(8, 1, -2.0, -0.1);
    for variant in [CamVariant::Gradcam, CamVariant::Gradcampp] {
        let h = stroke_core::xai::explain(&m, &img, StrokeClass::Normal, &probe(), variant).unwrap();
        assert!(h.degenerate);
        assert!(h.values.iter().all(|&v| v == 0.0));
        let b = BoundingBox { x0: 0, y0: 0, x1: 4, y1: 4 };
        assert_eq!(localization_score(&h, &b, 0.1).unwrap(), 0.0);
    }
}

#[test]
fn unknown_layer_lists_alternatives() {
    let m = ChannelMean::new(8, 0);
    let img = standardized(8, 1, 0.0, 1.0);
    let bad = LayerProbe {
        depth_tag: LayerTag::Early,
        layer_name: "nope".into(),
    };
    match gradcam(&m, &img, StrokeClass::Normal, &bad) {
        Err(Error::Probe(msg)) => assert!(msg.contains("planes")),
        other => panic!("expected probe error, got {other:?}"),
    }
}

#[test]
fn probes_follow_registry_order() {
    assert!(matches!(resolve_probes(&ChannelMean::new(4, 1)), Err(Error::Probe(_))));
    let p = resolve_probes(&ChannelMean::new(4, 2)).unwrap();
    let names: Vec<&str> = p.iter().map(|p| p.layer_name.as_str()).collect();
    assert_eq!(names, ["planes", "copy0", "copy1"]);
    assert_eq!(p.map(|p| p.depth_tag), [LayerTag::Early, LayerTag::Mid, LayerTag::Deep]);

    let maxvit = BackboneModel::new(BackboneConfig::toy(Arch::Maxvit), 0).unwrap();
    let p = resolve_probes(&maxvit).unwrap();
    let spatial: Vec<&str> = maxvit
        .layer_registry()
        .iter()
        .filter(|l| l.is_spatial())
        .map(|l| l.name.as_str())
        .collect();
    assert_eq!(p[0].layer_name, spatial[0]);
    assert_eq!(p[2].layer_name, *spatial.last().unwrap());
}

#[test]
fn real_backbone_maps_are_normalised_and_deterministic() {
    let model = BackboneModel::new(BackboneConfig::toy(Arch::Vit), 4).unwrap();
    let img = standardized(64, 9, -1.5, 1.5);
    for p in resolve_probes(&model).unwrap() {
        let a = gradcampp(&model, &img, StrokeClass::Ischemic, &p).unwrap();
        let b = gradcampp(&model, &img, StrokeClass::Ischemic, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (64, 64));
        if !a.degenerate {
            let max = a.values.iter().copied().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-9);
            assert!(a.values.iter().all(|&v| v >= 0.0));
        }
    }
}

fn flat(v: f64, side: usize) -> Heatmap {
    Heatmap {
        height: side,
        width: side,
        values: vec![v; side * side],
        layer_name: "x".into(),
        target_class: StrokeClass::Normal,
        variant: CamVariant::Gradcampp,
        degenerate: v == 0.0,
    }
}

fn grey(side: usize, v: f64) -> ImageTensor {
    ImageTensor::new(side, side, vec![v; 3 * side * side], ValueRange::Unit).unwrap()
}

#[test]
fn overlay_endpoints() {
    let img = grey(4, 0.3);
    assert_eq!(overlay(&flat(0.7, 4), &img, 0.0).unwrap(), img);
    let blue = overlay(&flat(0.0, 4), &img, 1.0).unwrap();
    assert!(blue.channel(2).iter().all(|&v| v == 1.0));
    assert!(blue.channel(0).iter().chain(blue.channel(1)).all(|&v| v == 0.0));
    let red = overlay(&flat(1.0, 4), &img, 0.4).unwrap();
    assert!(red.channel(0).iter().all(|&v| (v - 0.58).abs() < 1e-12));
    assert!(red.channel(2).iter().all(|&v| (v - 0.18).abs() < 1e-12));
    assert!(matches!(overlay(&flat(1.0, 4), &grey(5, 0.3), 0.4), Err(Error::Input(_))));
}

#[test]
fn localization_examples() {
    let b = BoundingBox { x0: 0, y0: 0, x1: 4, y1: 4 };
    assert!((localization_score(&flat(0.5, 8), &b, 0.1).unwrap() - 0.25).abs() < 1e-12);
    let mut h = flat(0.0, 8);
    h.degenerate = false;
    for y in 1..3 {
        for x in 1..3 {
            h.values[y * 8 + x] = 1.0;
        }
    }
    assert_eq!(localization_score(&h, &b, 1.0).unwrap(), 1.0);
    assert!(localization_score(&h, &b, 0.0).is_err());
}

#[test]
fn heatmap_grid_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = ChannelMean::new(8, 0);
    let h = gradcam(&m, &standardized(8, 2, -1.0, 1.0), StrokeClass::Normal, &probe()).unwrap();
    let p = dir.path().join("h.csv");
    write_heatmap_grid(&h, &p).unwrap();
    let rows = read_heatmap_grid(&p).unwrap();
    assert_eq!(rows.concat(), h.values);
}

proptest! {
    #[test]
    fn uniform_map_scores_box_area(x0 in 0usize..8, y0 in 0usize..8, w in 1usize..8, hgt in 1usize..8, frac in 0.05f64..1.0) {
        let b = BoundingBox { x0, y0, x1: (x0 + w).min(8).max(x0 + 1), y1: (y0 + hgt).min(8).max(y0 + 1) };
        let s = localization_score(&flat(0.3, 8), &b, frac).unwrap();
        prop_assert!((s - b.area() as f64 / 64.0).abs() < 1e-9);
    }
}
