mod common;

use common::{random_tensor, warp_pyramid, warp_translation_inverse, warp_zero_identity};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use warpadapt::gradcore::{grad_check, Graph, Shape, Tensor};
use warpadapt::warp::{
    multiscale_warp_loss, stagewise_warp_loss, warp_by_disparity, warp_by_flow, FieldKind,
};

#[test]
fn zero_field_is_bit_exact_identity() {
    for seed in 0..100 {
        warp_zero_identity(seed).unwrap();
    }
}

#[test]
fn hand_built_four_by_four() {
    let src = Tensor::new(Shape::new(1, 1, 4, 4), (1..=16).map(|v| v as f32).collect()).unwrap();
    let mut g = Graph::<f32>::new();
    let s = g.constant(src);
    let one = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0));
    let half = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 0.5));
    let by_one = warp_by_disparity(&mut g, s, one, 1.0).unwrap();
    let by_half = warp_by_disparity(&mut g, s, half, 1.0).unwrap();
    #[rustfmt::skip]
    let want_one = [
        0.0, 1.0, 2.0, 3.0,
        0.0, 5.0, 6.0, 7.0,
        0.0, 9.0, 10.0, 11.0,
        0.0, 13.0, 14.0, 15.0,
    ];
    #[rustfmt::skip]
    let want_half = [
        0.5, 1.5, 2.5, 3.5,
        2.5, 5.5, 6.5, 7.5,
        4.5, 9.5, 10.5, 11.5,
        6.5, 13.5, 14.5, 15.5,
    ];
    assert_eq!(g.value(by_one).data(), &want_one);
    assert_eq!(g.value(by_half).data(), &want_half);

    // Flow (0, 1) reads the row below; the last row falls outside.
    let down = g.constant(Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, c, _, _| {
        c as f32
    }));
    let moved = warp_by_flow(&mut g, s, down, 1.0).unwrap();
    let want: Vec<f32> = (5..=16).map(|v| v as f32).chain([0.0; 4]).collect();
    assert_eq!(g.value(moved).data(), &want[..]);
}

#[test]
fn constructed_translation_is_inverted() {
    for seed in 0..100 {
        warp_translation_inverse(seed).unwrap();
    }
}

#[test]
fn pyramid_rescaling_is_consistent() {
    for seed in 0..100 {
        warp_pyramid(seed).unwrap();
    }
}

#[test]
fn consistent_taps_give_zero_multiscale_loss() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let mut g = Graph::<f32>::new();
    let full = g.constant(random_tensor(&mut rng, Shape::new(2, 4, 16, 16), -1.0, 1.0));
    let half = g.downsample2(full).unwrap();
    let taps = [full, half, half];
    let zero = g.constant(Tensor::zeros(Shape::new(2, 1, 16, 16)));
    let l =
        multiscale_warp_loss(&mut g, &taps, &taps, FieldKind::Disparity, zero, 1.0, None).unwrap();
    assert_eq!(g.item(l), 0.0);
    // A constant 2 px field is 0.5 px at quarter resolution.
    let target = g.constant(Tensor::full(Shape::new(2, 1, 16, 16), 2.0));
    let stages = [
        g.constant(Tensor::full(Shape::new(2, 1, 4, 4), 0.5)),
        target,
    ];
    let l = stagewise_warp_loss(&mut g, &stages, target, 0.9, None).unwrap();
    assert_eq!(g.item(l), 0.0);
}

#[test]
fn mask_excludes_pixels() {
    let mut g = Graph::<f64>::new();
    let src = g.constant(Tensor::full(Shape::new(1, 1, 4, 4), 1.0));
    let mut dst = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
    dst.set(0, 0, 0, 0, 9.0);
    let dst = g.constant(dst);
    let zero = g.constant(Tensor::zeros(Shape::new(1, 1, 4, 4)));
    let mut m = Tensor::full(Shape::new(1, 1, 4, 4), 1.0);
    m.set(0, 0, 0, 0, 0.0);
    let mask = g.constant(m);
    let l = multiscale_warp_loss(
        &mut g,
        &[src],
        &[dst],
        FieldKind::Disparity,
        zero,
        1.0,
        Some(mask),
    )
    .unwrap();
    assert_eq!(g.item(l), 0.0);
    let l = multiscale_warp_loss(
        &mut g,
        &[src],
        &[dst],
        FieldKind::Disparity,
        zero,
        1.0,
        None,
    )
    .unwrap();
    assert_eq!(g.item(l), 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn integer_disparity_is_a_pixel_shift(seed in 0u64..10_000, d in 0usize..5) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let src = random_tensor(&mut rng, Shape::new(1, 2, 5, 9), -1.0, 1.0);
        let mut g = Graph::<f32>::new();
        let s = g.constant(src.clone());
        let dv = g.constant(Tensor::full(Shape::new(1, 1, 5, 9), d as f32));
        let out = warp_by_disparity(&mut g, s, dv, 1.0).unwrap();
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..9 {
                    let want = if x >= d { src.at(0, c, y, x - d) } else { 0.0 };
                    prop_assert_eq!(g.value(out).at(0, c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let (h, w) = (6, 7);
        let src: Tensor<f64> = random_tensor(&mut rng, Shape::new(1, 2, h, w), -1.0, 1.0).cast();
        // Fractional parts away from cell boundaries keep the sampler smooth.
        let flow: Tensor<f64> = Tensor::from_fn(Shape::new(1, 2, h, w), |_, _, _, _| {
            rng.random_range(-3i32..3) as f64 + rng.random_range(0.15..0.85)
        });
        let weights: Tensor<f64> = random_tensor(&mut rng, Shape::new(1, 2, h, w), -1.0, 1.0).cast();
        let contract = |g: &mut Graph<f64>, s, f| {
            let out = warp_by_flow(g, s, f, 1.0)?;
            let wv = g.constant(weights.clone());
            let p = g.mul(out, wv)?;
            g.sum(p)
        };
        let wrt_field = grad_check(|g, f| { let s = g.constant(src.clone()); contract(g, s, f) }, &flow, 1e-5).unwrap();
        let wrt_src = grad_check(|g, s| { let f = g.constant(flow.clone()); contract(g, s, f) }, &src, 1e-4).unwrap();
        prop_assert!(wrt_field < 1e-3, "field {}", wrt_field);
        prop_assert!(wrt_src < 1e-4, "src {}", wrt_src);
    }
}
