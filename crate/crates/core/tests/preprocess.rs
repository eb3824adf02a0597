use proptest::prelude::*;
use stroke_core::preprocess::{
    augment, denormalize, load_and_resize, normalize, resize_plane, AugmentPolicy, ImageTensor, PRETRAINED_MEAN,
    PRETRAINED_STD,
};

fn image(side: usize, seed: u64) -> ImageTensor {
    let gray: Vec<f64> = (0..side * side)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64 / 999.0)
        .collect();
    ImageTensor::from_gray(side, side, &gray).unwrap()
}

proptest! {
    #[test]
    fn normalisation_round_trips(side in 2usize..12, seed in any::<u64>()) {
        let img = image(side, seed);
        let n = normalize(&img, PRETRAINED_MEAN, PRETRAINED_STD).unwrap();
        let back = denormalize(&n, PRETRAINED_MEAN, PRETRAINED_STD);
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_is_seeded_and_bounded(seed in any::<u64>(), img_seed in any::<u64>()) {
        let img = image(16, img_seed);
        let p = AugmentPolicy::default();
        let a = augment(&img, &p, seed).unwrap();
        prop_assert_eq!(&a, &augment(&img, &p, seed).unwrap());
        prop_assert_eq!(a.shape(), img.shape());
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resizing_a_constant_plane_is_exact(h in 1usize..20, w in 1usize..20, oh in 1usize..30, ow in 1usize..30, v in 0.0f64..1.0) {
        let out = resize_plane(&vec![v; h * w], h, w, oh, ow);
        prop_assert_eq!(out.len(), oh * ow);
        prop_assert!(out.iter().all(|&x| x == v));
    }
}

#[test]
fn identity_resize_keeps_pixels() {
    let img = image(9, 3);
    let plane = img.channel(0);
    assert_eq!(resize_plane(plane, 9, 9, 9, 9), plane);
}

#[test]
fn png_loading_resizes_to_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    image::GrayImage::from_fn(20, 10, |x, _| image::Luma([(x * 12) as u8])).save(&p).unwrap();
    let t = load_and_resize(&p, 32).unwrap();
    assert_eq!(t.shape(), [3, 32, 32]);
    assert_eq!(t.channel(0), t.channel(2));
}
