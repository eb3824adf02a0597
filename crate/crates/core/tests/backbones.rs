use indexmap::IndexMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stroke_autograd::{check_gradients, GradCheckConfig, Graph, ParamSet, Tensor, Var};
use stroke_core::backbones::layers::{invert_permutation, Ctx, Init};
use stroke_core::backbones::{
    convnext, load_external_backbone, maxvit, replace_head, tnt, vit, Arch, BackboneConfig,
    BackboneModel, ForwardMode, HeadInit, LayerTag,
};
use stroke_core::preprocess::{ImageTensor, ValueRange};
use stroke_core::Error;

const GRAD_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> ImageTensor {
    let data = (0..3 * side * side).map(|_| rng.random::<f64>()).collect();
    ImageTensor::new(side, side, data, ValueRange::Unit).unwrap()
}

/// Replaces every parameter by uniform noise so gradient checks are not
/// dominated by the tiny initialisation scale.
fn scramble(params: &ParamSet, seed: u64, scale: f64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params
        .iter()
        .map(|(n, t)| (n.to_string(), random_tensor(&mut rng, t.shape(), scale)))
        .collect()
}

fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(x, w);
    g.sum(p)
}

fn assert_grads(params: &ParamSet, f: impl Fn(&mut Graph, &ParamSet) -> Var) {
    let report = check_gradients(params, f, GradCheckConfig::default());
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_error() <= GRAD_TOL,
        "{} rel error {:.3e}",
        worst.name,
        worst.rel_error
    );
}

fn all_trainable(_: &str) -> bool {
    true
}

fn tiny(arch: Arch) -> BackboneConfig {
    let mut c = BackboneConfig::toy(arch);
    c.image_side = 16;
    match arch {
        Arch::Vit => {
            c.patch_size = 4;
            c.embed_dim = 8;
        }
        Arch::Tnt => {
            c.patch_size = 8;
            c.inner_patch_size = 4;
            c.embed_dim = 16;
        }
        Arch::Convnext => {
            c.patch_size = 4;
            c.embed_dim = 4;
            c.depth = 2;
            c.kernel_size = 3;
        }
        Arch::Maxvit => {
            c.patch_size = 2;
            c.embed_dim = 4;
            c.depth = 2;
        }
    }
    c
}

#[test]
fn patch_embed_token_counts() {
    assert_eq!(vit::token_count(224, 16).unwrap(), 196);
    assert_eq!(vit::token_count(32, 16).unwrap(), 4);
    assert!(matches!(vit::token_count(30, 16), Err(Error::Config(_))));
}

#[test]
fn patch_embed_of_zero_image_is_the_bias() {
    let cfg = BackboneConfig::toy(Arch::Vit);
    let mut params = ParamSet::new();
    let mut init = Init::new(&mut params, 4);
    init.conv("patch_embed.proj", 8, 3, 32);
    init.constant("pos_embed", &[64, 32], 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    params.insert("patch_embed.proj.bias", random_tensor(&mut rng, &[32], 1.0));
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &all_trainable);
    let img = ctx.g.constant(Tensor::zeros(vec![3, cfg.image_side, cfg.image_side]));
    let x = vit::patch_embed(&mut ctx, img, 8).unwrap();
    let bias = params.expect("patch_embed.proj.bias").data();
    assert_eq!(g.shape(x), [64, 32]);
    for row in g.value(x).data().chunks(32) {
        assert_eq!(row, bias);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut params = ParamSet::new();
    Init::new(&mut params, 2).attention("attn", 8);
    let params = scramble(&params, 3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &all_trainable);
    let x = ctx.g.constant(random_tensor(&mut rng, &[7, 8], 2.0));
    let att = vit::mhsa(&mut ctx, x, 2, "attn").unwrap();
    let probs = g.value(att.probs);
    assert_eq!(probs.shape(), [2, 7, 7]);
    for row in probs.data().chunks(7) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn single_token_attention_is_projected_value() {
    let mut params = ParamSet::new();
    Init::new(&mut params, 2).attention("attn", 4);
    let params = scramble(&params, 5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = random_tensor(&mut rng, &[1, 4], 1.0);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &all_trainable);
    let x = ctx.g.constant(xt.clone());
    let att = vit::mhsa(&mut ctx, x, 2, "attn").unwrap();
    assert_eq!(g.value(att.probs).data(), &[1.0, 1.0]);

    // oracle: out = (x·Wv + bv)·Wp + bp with Wv the last third of the qkv weight
    let wqkv = params.expect("attn.qkv.weight").data();
    let bqkv = params.expect("attn.qkv.bias").data();
    let wp = params.expect("attn.proj.weight").data();
    let bp = params.expect("attn.proj.bias").data();
    let v: Vec<f64> = (0..4)
        .map(|j| bqkv[8 + j] + (0..4).map(|i| xt.data()[i] * wqkv[i * 12 + 8 + j]).sum::<f64>())
        .collect();
    let want: Vec<f64> = (0..4)
        .map(|j| bp[j] + (0..4).map(|i| v[i] * wp[i * 4 + j]).sum::<f64>())
        .collect();
    for (a, b) in g.value(att.out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mhsa_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut params = ParamSet::new();
        Init::new(&mut params, seed).attention("attn", 6);
        let mut params = scramble(&params, seed + 100, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.insert("x", random_tensor(&mut rng, &[5, 6], 1.0));
        assert_grads(&params, |g, p| {
            let mut ctx = Ctx::new(g, p, &all_trainable);
            let x = ctx.param("x");
            let out = vit::mhsa(&mut ctx, x, 3, "attn").unwrap().out;
            project(g, out, seed)
        });
    }
}

fn model_gradcheck(arch: Arch, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let model = BackboneModel::new(tiny(arch), seed).unwrap();
        let params = scramble(model.params(), seed + 7, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 16).to_tensor();
        assert_grads(&params, |g, p| {
            let mut m = model.clone();
            *m.params_mut() = p.clone();
            let x = g.constant(img.clone());
            let out = m.forward(g, x, ForwardMode::Eval).unwrap();
            let a = project(g, out.logits, seed);
            let b = project(g, out.features, seed + 1);
            g.add(a, b)
        });
    }
}

#[test]
fn vit_gradients_match_finite_differences() {
    model_gradcheck(Arch::Vit, 0..5);
}

#[test]
fn tnt_gradients_match_finite_differences() {
    model_gradcheck(Arch::Tnt, 0..5);
}

#[test]
fn convnext_gradients_match_finite_differences() {
    model_gradcheck(Arch::Convnext, 0..5);
}

#[test]
fn maxvit_gradients_match_finite_differences() {
    model_gradcheck(Arch::Maxvit, 0..5);
}

#[test]
fn convnext_block_depthwise_gradient() {
    for seed in 0..5 {
        let mut params = ParamSet::new();
        convnext::init_block(&mut Init::new(&mut params, seed), "b", 3, 7);
        let mut params = scramble(&params, seed + 1, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.insert("x", random_tensor(&mut rng, &[6 * 5, 3], 1.0));
        assert_grads(&params, |g, p| {
            let mut ctx = Ctx::new(g, p, &all_trainable);
            let x = ctx.param("x");
            let y = convnext::convnext_block(&mut ctx, x, 6, 5, "b").unwrap();
            project(g, y, seed)
        });
    }
}

#[test]
fn convnext_block_identity_and_shape() {
    let mut params = ParamSet::new();
    convnext::init_block(&mut Init::new(&mut params, 1), "b", 4, 7);
    let mut dw = vec![0.0; 49 * 4];
    dw[24 * 4..25 * 4].fill(1.0);
    params.insert("b.dwconv.weight", Tensor::from_parts(vec![49, 4], dw));
    params.insert("b.pwconv1.weight", Tensor::zeros(vec![4, 16]));
    params.insert("b.pwconv2.weight", Tensor::zeros(vec![16, 4]));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xt = random_tensor(&mut rng, &[9 * 7, 4], 1.0);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &all_trainable);
    let x = ctx.g.constant(xt.clone());
    let y = convnext::convnext_block(&mut ctx, x, 9, 7, "b").unwrap();
    assert_eq!(g.value(y), &xt);

    let mut even = ParamSet::new();
    convnext::init_block(&mut Init::new(&mut even, 1), "b", 4, 4);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &even, &all_trainable);
    let x = ctx.g.constant(xt);
    assert!(matches!(
        convnext::convnext_block(&mut ctx, x, 9, 7, "b"),
        Err(Error::Config(_))
    ));
    let mut cfg = BackboneConfig::toy(Arch::Convnext);
    cfg.kernel_size = 6;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn maxvit_block_gradients_through_both_stages() {
    for seed in 0..5 {
        let mut params = ParamSet::new();
        maxvit::init_block(&mut Init::new(&mut params, seed), "b", 4);
        let mut params = scramble(&params, seed + 3, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.insert("x", random_tensor(&mut rng, &[4 * 4, 4], 1.0));
        assert_grads(&params, |g, p| {
            let mut ctx = Ctx::new(g, p, &all_trainable);
            let x = ctx.param("x");
            let y = maxvit::maxvit_block(&mut ctx, x, 4, 4, 2, 2, "b").unwrap();
            project(g, y, seed)
        });
    }
}

#[test]
fn maxvit_partition_counts_and_errors() {
    let w = maxvit::window_partition(56, 56, 7).unwrap();
    let g = maxvit::grid_partition(56, 56, 7).unwrap();
    // 64 windows of 49 tokens, 49 groups of 64 tokens
    assert_eq!((w.len() / 49, g.len() / 64), (64, 49));
    assert!(matches!(maxvit::grid_partition(56, 56, 5), Err(Error::Config(_))));
    let mut cfg = BackboneConfig::toy(Arch::Maxvit);
    cfg.window_size = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn window_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = random_tensor(&mut rng, &[8 * 8, 3], 10.0);
    for perm in [
        maxvit::window_partition(8, 8, 2).unwrap(),
        maxvit::grid_partition(8, 8, 4).unwrap(),
    ] {
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let fwd = stroke_core::backbones::layers::row_gather_map(&perm, 3);
        let back = stroke_core::backbones::layers::row_gather_map(&invert_permutation(&perm), 3);
        let y = g.gather(x, fwd, vec![64, 3]);
        let z = g.gather(y, back, vec![64, 3]);
        assert_eq!(g.value(z), &xt);
    }
}

#[test]
fn tnt_with_zero_inner_projection_equals_vit() {
    let cfg = BackboneConfig::toy(Arch::Tnt);
    assert_eq!(tnt::words_per_patch(&cfg), 16);
    let mut t = BackboneModel::new(cfg.clone(), 3).unwrap();
    let scrambled = scramble(t.params(), 4, 0.3);
    *t.params_mut() = scrambled;
    for i in 0..cfg.depth {
        for part in ["weight", "bias"] {
            let name = format!("blocks.{i}.inner_proj.{part}");
            let shape = t.params().expect(&name).shape().to_vec();
            t.params_mut().insert(name, Tensor::zeros(shape));
        }
    }
    let vcfg = BackboneConfig {
        arch: Arch::Vit,
        ..cfg
    };
    let mut v = BackboneModel::new(vcfg, 0).unwrap();
    let shared: Vec<String> = v.params().names().map(str::to_string).collect();
    for n in shared {
        v.params_mut().insert(n.clone(), t.params().expect(&n).clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        let img = random_image(&mut rng, 64);
        let a = t.logits(&img).unwrap();
        let b = v.logits(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn tnt_rejects_indivisible_inner_patch() {
    let mut cfg = BackboneConfig::toy(Arch::Tnt);
    cfg.inner_patch_size = 5;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn reference_configs_produce_three_logits_deterministically() {
    let mut vcfg = BackboneConfig::toy(Arch::Vit);
    vcfg.embed_dim = 64;
    let cfgs = [
        vcfg,
        BackboneConfig::toy(Arch::Tnt),
        BackboneConfig::toy(Arch::Convnext),
        BackboneConfig::toy(Arch::Maxvit),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 64);
    for cfg in cfgs {
        let m = BackboneModel::new(cfg.clone(), 1).unwrap();
        let a = m.logits(&img).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, m.logits(&img).unwrap());
        assert_eq!(m, BackboneModel::new(cfg, 1).unwrap());
        for tag in [LayerTag::Early, LayerTag::Mid, LayerTag::Deep] {
            assert!(m.tagged(tag).unwrap().is_spatial());
        }
    }
}

#[test]
fn dropout_is_seeded() {
    let mut cfg = BackboneConfig::toy(Arch::Vit);
    cfg.dropout = 0.3;
    let m = BackboneModel::new(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 64).to_tensor();
    let run = |seed| {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let out = m.forward(&mut g, x, ForwardMode::Train { seed }).unwrap();
        g.value(out.logits).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn archive_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = BackboneModel::new(BackboneConfig::toy(Arch::Vit), 9).unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    m.save(&p1).unwrap();
    let mut map = IndexMap::new();
    map.insert("blocks.1".to_string(), "encoder.layer.1".to_string());
    let loaded = load_external_backbone(Arch::Vit, &p1, &map).unwrap();
    assert_eq!(loaded.layer_index("encoder.layer.1"), loaded.layer_index("blocks.1"));
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10 {
        let img = random_image(&mut rng, 64);
        let a = m.logits(&img).unwrap();
        let b = loaded.logits(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    assert!(load_external_backbone(Arch::Convnext, &p1, &IndexMap::new()).is_err());
}

#[test]
fn missing_tensor_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = BackboneModel::new(BackboneConfig::toy(Arch::Convnext), 1).unwrap();
    m.params_mut().remove_prefix("stages.1.block.norm.bias");
    let path = dir.path().join("w.bin");
    m.save(&path).unwrap();
    match load_external_backbone(Arch::Convnext, &path, &IndexMap::new()) {
        Err(Error::Schema(diff)) => {
            assert_eq!(diff.missing, vec!["stages.1.block.norm.bias".to_string()]);
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn head_can_be_zeroed_after_load() {
    let mut m = BackboneModel::new(BackboneConfig::toy(Arch::Vit), 1).unwrap();
    replace_head(&mut m, 3, HeadInit::Zeros, 0);
    assert!(m.params().expect("head.weight").data().iter().all(|&v| v == 0.0));
}

fn valid_config() -> impl Strategy<Value = BackboneConfig> {
    (0usize..4, 1usize..4, 1usize..3, 1usize..3).prop_map(|(a, grid_pow, heads, depth)| {
        let arch = Arch::ALL[a];
        let mut c = BackboneConfig::toy(arch);
        c.heads = heads;
        c.depth = depth;
        match arch {
            Arch::Vit => {
                c.patch_size = 4;
                c.image_side = 4 << grid_pow;
                c.embed_dim = 4 * heads;
            }
            Arch::Tnt => {
                c.patch_size = 8;
                c.inner_patch_size = 2 << (grid_pow % 2);
                c.image_side = 8 << grid_pow;
                c.embed_dim = 8 * heads;
            }
            Arch::Convnext => {
                c.patch_size = 2;
                c.image_side = 2 << (grid_pow + depth);
                c.embed_dim = 2;
                c.kernel_size = 3;
            }
            Arch::Maxvit => {
                c.patch_size = 2;
                c.window_size = 2;
                c.image_side = 4 << (grid_pow + depth);
                c.embed_dim = 2 * heads;
            }
        }
        c
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn shape_algebra_holds_for_valid_configs(cfg in valid_config()) {
        cfg.validate().unwrap();
        let m = BackboneModel::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, cfg.image_side, cfg.image_side], 0.5));
        let out = m.forward(&mut g, x, ForwardMode::Eval).unwrap();
        prop_assert_eq!(g.shape(out.logits), [3]);
        prop_assert_eq!(g.shape(out.features), [m.feature_dim()]);
        prop_assert_eq!(out.taps.len(), m.layer_registry().len());
        for (tap, info) in out.taps.iter().zip(m.layer_registry()) {
            match info.grid {
                Some((h, w)) => prop_assert_eq!(g.shape(*tap), [h * w, info.channels]),
                None => prop_assert_eq!(g.shape(*tap), [info.channels]),
            }
        }
        if cfg.arch == Arch::Vit || cfg.arch == Arch::Tnt {
            let n = vit::token_count(cfg.image_side, cfg.patch_size).unwrap();
            prop_assert_eq!(m.layer_registry()[0].grid, Some(((n as f64).sqrt() as usize, (n as f64).sqrt() as usize)));
        }
    }

    #[test]
    fn partitions_are_bijections(a in 1usize..6, b in 1usize..6, p in 1usize..5) {
        let (h, w) = (a * p, b * p);
        for perm in [maxvit::window_partition(h, w, p).unwrap(), maxvit::grid_partition(h, w, p).unwrap()] {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..h * w).collect::<Vec<_>>());
            let inv = invert_permutation(&perm);
            for (i, &q) in perm.iter().enumerate() {
                prop_assert_eq!(inv[q], i);
            }
        }
    }
}
