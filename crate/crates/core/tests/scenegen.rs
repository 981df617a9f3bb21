use warpadapt::gradcore::{Graph, Shape, Tensor};
use warpadapt::scenegen::{
    apply_domain_shift, generate_paired_domains, generate_scene, partition_by_domain, read_dataset,
    read_sample, write_dataset, write_sample, Domain, DomainShift, SceneConfig, SceneSample,
};
use warpadapt::warp::{warp_by_disparity, warp_by_flow};
use warpadapt::Error;

const W: usize = 128;
const H: usize = 64;

fn scene(seed: u64) -> SceneSample {
    generate_scene(seed, W, H, 16.0, 8.0).unwrap()
}

/// Per-pixel max and mean of |warp(src, field) - left| over mask pixels.
fn residual(s: &SceneSample, stereo: bool) -> (f64, f64, f64) {
    let mut g = Graph::<f32>::new();
    let (src, field, mask) = if stereo {
        (
            &s.right,
            &s.disparity.as_ref().unwrap().values,
            s.stereo_mask.as_ref().unwrap(),
        )
    } else {
        (
            &s.next_left,
            &s.flow.as_ref().unwrap().values,
            s.occlusion.as_ref().unwrap(),
        )
    };
    let sv = g.constant(src.clone());
    let fv = g.constant(field.clone());
    let out = if stereo {
        warp_by_disparity(&mut g, sv, fv, 1.0).unwrap()
    } else {
        warp_by_flow(&mut g, sv, fv, 1.0).unwrap()
    };
    let warped = g.value(out);
    let (mut worst, mut total, mut count) = (0.0f64, 0.0f64, 0usize);
    for y in 0..H {
        for x in 0..W {
            if mask.at(0, 0, y, x) == 0.0 {
                continue;
            }
            count += 1;
            for c in 0..3 {
                let e = (warped.at(0, c, y, x) - s.left.at(0, c, y, x)).abs() as f64;
                worst = worst.max(e);
                total += e;
            }
        }
    }
    let visible = count as f64 / (W * H) as f64;
    (worst, total / (3 * count.max(1)) as f64, visible)
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(scene(11), scene(11));
    assert_ne!(scene(11).left, scene(12).left);
}

#[test]
fn geometric_invariants_hold_over_many_seeds() {
    let mut occluded_total = 0.0;
    for seed in 0..100 {
        let s = scene(seed);
        let (worst_d, mean_d, _) = residual(&s, true);
        assert!(
            worst_d < 1e-2 && mean_d < 1e-2,
            "seed {seed}: stereo residual {worst_d}"
        );
        let (worst_f, _, visible) = residual(&s, false);
        assert!(worst_f < 1e-2, "seed {seed}: flow residual {worst_f}");
        occluded_total += 1.0 - visible;

        let d = &s.disparity.as_ref().unwrap().values;
        assert!(d.data().iter().all(|&v| (0.0..=16.0).contains(&v)));
        let f = &s.flow.as_ref().unwrap().values;
        for y in 0..H {
            for x in 0..W {
                let (u, v) = (f.at(0, 0, y, x), f.at(0, 1, y, x));
                assert!((u * u + v * v).sqrt() <= 8.0 + 1e-4);
            }
        }
    }
    assert!(occluded_total / 100.0 > 0.01);
}

#[test]
fn every_multi_layer_scene_has_occlusions() {
    for seed in 0..20 {
        let occ = scene(seed).occlusion.unwrap();
        let hidden = occ.data().iter().filter(|&&v| v == 0.0).count();
        assert!(hidden > 0, "seed {seed}");
    }
}

#[test]
fn identity_shift_leaves_pixels_unchanged() {
    let s = scene(3);
    let t = apply_domain_shift(&s, &DomainShift::identity(), 9);
    assert_eq!(t.left, s.left);
    assert_eq!(t.right, s.right);
    assert_eq!(t.domain, Domain::Real);
}

fn channel_correlation(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.mean_f64(), b.mean_f64());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (*x as f64 - ma, *y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    let _ = n;
    sab / (saa * sbb).sqrt()
}

#[test]
fn default_shift_changes_statistics_but_not_geometry() {
    let shift = DomainShift::preset("default").unwrap();
    let mut corr = 0.0;
    for seed in 0..10 {
        let s = scene(seed);
        let t = apply_domain_shift(&s, &shift, seed);
        assert_eq!(t.disparity, s.disparity);
        assert_eq!(t.flow, s.flow);
        for c in 0..3 {
            let a = Tensor::new(Shape::new(1, 1, H, W), s.left.plane(0, c).to_vec()).unwrap();
            let b = Tensor::new(Shape::new(1, 1, H, W), t.left.plane(0, c).to_vec()).unwrap();
            corr += channel_correlation(&a, &b) / 30.0;
        }
    }
    assert!(corr < 0.995, "mean channel correlation {corr}");
}

#[test]
fn noise_free_shift_preserves_stereo_consistency() {
    let shift = DomainShift {
        noise_sigma: 0.0,
        vignette_strength: 0.0,
        ..DomainShift::preset("default").unwrap()
    };
    for seed in 0..10 {
        let t = apply_domain_shift(&scene(seed), &shift, seed);
        let (_, mean, _) = residual(&t, true);
        assert!(mean < 1e-2, "seed {seed}: {mean}");
    }
}

#[test]
fn dataset_round_trip_and_partition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig {
        width: 32,
        height: 16,
        max_disp: 8.0,
        max_flow: 4.0,
        ..SceneConfig::default()
    };
    let shift = DomainShift::preset("default").unwrap();
    let samples = generate_paired_domains(5, 3, &cfg, &shift).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, samples);
    for (a, b) in back.iter().zip(&samples) {
        for (x, y) in a.left.data().iter().zip(b.left.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    let (syn, real) = partition_by_domain(back);
    assert_eq!((syn.len(), real.len()), (3, 3));
    assert!(real.iter().all(|s| s.domain == Domain::Real));
}

#[test]
fn truncated_file_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.wad");
    write_sample(&generate_scene(1, 16, 8, 2.0, 2.0).unwrap(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match read_sample(&path) {
        Err(Error::Format { offset, .. }) => assert!(offset > 10),
        other => panic!("expected format error, got {other:?}"),
    }
    std::fs::write(&path, b"NOTMAGIC").unwrap();
    assert!(matches!(
        read_sample(&path),
        Err(Error::Format { offset: 0, .. })
    ));
}
