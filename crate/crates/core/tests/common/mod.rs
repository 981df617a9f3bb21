//! Independent oracles shared by the module tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use warpadapt::gradcore::{Graph, Shape, Tensor, Var, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use warpadapt::losses::{
    corr_consistency_loss, cosine_loss, cycle_loss, mode_seeking_loss, perceptual_loss,
    real_warp_loss, supervised_disp_loss, supervised_flow_loss, synthetic_warp_loss, CycleTaps,
};
use warpadapt::metrics::{epe, psnr, ssim_metric, threshold_error_rate, D1Mode, D1_ABS, D1_REL};
use warpadapt::netlib::{build_extractor, EXTRACTOR_SEED};
use warpadapt::warp::{shrink_field, warp_by_disparity, warp_by_flow, FieldKind, WarpField};

pub type Check = Result<(), String>;

pub fn random_tensor(rng: &mut Xoshiro256PlusPlus, s: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(s, |_, _, _, _| rng.random_range(lo..hi))
}

/// Smooth analytic image; spatial frequencies stay below `band` rad/px.
pub struct Smooth {
    k: [(f64, f64, f64); 3],
}

impl Smooth {
    pub fn new(rng: &mut Xoshiro256PlusPlus, band: f64) -> Self {
        let mut k = [(0.0, 0.0, 0.0); 3];
        for t in &mut k {
            *t = (
                rng.random_range(-band..band),
                rng.random_range(-band..band),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Smooth { k }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        let (a, b, p) = self.k[c % 3];
        0.5 + 0.2 * (a * x + b * y + p).sin() + 0.1 * (b * x - a * y + p).cos()
    }

    pub fn render(&self, h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
            self.at(c, x as f64 + dx, y as f64 + dy) as f32
        })
    }
}

pub fn interior_error(a: &Tensor, b: &Tensor, margin: usize) -> f64 {
    let s = a.shape();
    let mut worst = 0.0f64;
    for c in 0..s.c() {
        for y in margin..s.h() - margin {
            for x in margin..s.w() - margin {
                worst = worst.max((a.at(0, c, y, x) - b.at(0, c, y, x)).abs() as f64);
            }
        }
    }
    worst
}

fn within(what: &str, err: f64, tol: f64) -> Check {
    if err < tol {
        Ok(())
    } else {
        Err(format!("{what}: {err:e} >= {tol:e}"))
    }
}

/// Zero disparity and zero flow return the source bit for bit.
pub fn warp_zero_identity(seed: u64) -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (n, c) = (rng.random_range(1..3), rng.random_range(1..5));
    let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
    let src = random_tensor(&mut rng, Shape::new(n, c, h, w), -3.0, 3.0);
    let mut g = Graph::<f32>::new();
    let s = g.constant(src.clone());
    let d = g.constant(Tensor::zeros(Shape::new(n, 1, h, w)));
    let f = g.constant(Tensor::zeros(Shape::new(n, 2, h, w)));
    let a = warp_by_disparity(&mut g, s, d, 1.0).unwrap();
    let b = warp_by_flow(&mut g, s, f, -1.0).unwrap();
    if g.value(a) != &src || g.value(b) != &src {
        return Err(format!("seed {seed}: zero field changed the image"));
    }
    Ok(())
}

/// Views rendered with a known disparity and flow are mapped back onto the
/// reference; warping forward then backward returns to the start.
pub fn warp_translation_inverse(seed: u64) -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1000 + seed);
    let img = Smooth::new(&mut rng, 0.25);
    let (h, w) = (24, 32);
    let d = rng.random_range(0.0..4.0);
    let (u, v) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    let left = img.render(h, w, 0.0, 0.0);
    // Right view: content at left x sits at x - d. Next frame: content at p
    // moves to p + (u, v).
    let right = img.render(h, w, d, 0.0);
    let next = img.render(h, w, -u, -v);

    let mut g = Graph::<f32>::new();
    let r = g.constant(right);
    let nx = g.constant(next);
    let l = g.constant(left.clone());
    let dv = g.constant(Tensor::full(Shape::new(1, 1, h, w), d as f32));
    let fv = g.constant(Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, _, _| {
        if c == 0 {
            u as f32
        } else {
            v as f32
        }
    }));
    let from_right = warp_by_disparity(&mut g, r, dv, 1.0).unwrap();
    let from_next = warp_by_flow(&mut g, nx, fv, 1.0).unwrap();
    within(
        &format!("seed {seed} right->left"),
        interior_error(g.value(from_right), &left, 5),
        1e-2,
    )?;
    within(
        &format!("seed {seed} next->left"),
        interior_error(g.value(from_next), &left, 4),
        1e-2,
    )?;

    let there = warp_by_flow(&mut g, l, fv, -1.0).unwrap();
    let back = warp_by_flow(&mut g, there, fv, 1.0).unwrap();
    within(
        &format!("seed {seed} flow round trip"),
        interior_error(g.value(back), &left, 7),
        1e-2,
    )?;
    let there = warp_by_disparity(&mut g, l, dv, -1.0).unwrap();
    let back = warp_by_disparity(&mut g, there, dv, 1.0).unwrap();
    within(
        &format!("seed {seed} disparity round trip"),
        interior_error(g.value(back), &left, 9),
        1e-2,
    )
}

/// Warping at half resolution with the shrunk field matches the downsampled
/// full-resolution warp.
pub fn warp_pyramid(seed: u64) -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2000 + seed);
    // Half resolution doubles every frequency.
    let img = Smooth::new(&mut rng, 0.125);
    let (h, w) = (32, 48);
    let src = img.render(h, w, 0.0, 0.0);
    let (u, v) = (
        rng.random_range(-4.0..4.0f32),
        rng.random_range(-4.0..4.0f32),
    );
    let mut g = Graph::<f32>::new();
    let s = g.constant(src);
    let f = g.constant(Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, _, _| {
        if c == 0 {
            u
        } else {
            v
        }
    }));
    let full = warp_by_flow(&mut g, s, f, 1.0).unwrap();
    let full_down = g.downsample2(full).unwrap();
    let s_half = g.downsample2(s).unwrap();
    let f_half = shrink_field(&mut g, f, 1).unwrap();
    let half = warp_by_flow(&mut g, s_half, f_half, 1.0).unwrap();
    within(
        &format!("seed {seed} pyramid"),
        interior_error(g.value(half), g.value(full_down), 4),
        1e-2,
    )
}

/// Per-pixel (error, ground-truth magnitude) pairs in f64.
pub fn oracle_errors(p: &Tensor, g: &Tensor, m: Option<&Tensor>) -> Vec<(f64, f64)> {
    let s = g.shape();
    let mut out = Vec::new();
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                if m.is_some_and(|m| m.at(n, 0, y, x) == 0.0) {
                    continue;
                }
                let diff: Vec<f64> = (0..s.c())
                    .map(|c| p.at(n, c, y, x) as f64 - g.at(n, c, y, x) as f64)
                    .collect();
                let mag: Vec<f64> = (0..s.c()).map(|c| g.at(n, c, y, x) as f64).collect();
                out.push((
                    diff.iter().map(|d| d * d).sum::<f64>().sqrt(),
                    mag.iter().map(|v| v * v).sum::<f64>().sqrt(),
                ));
            }
        }
    }
    out
}

pub fn oracle_rate(errs: &[(f64, f64)], abs: f64, rel: Option<f64>, and: bool) -> f64 {
    let bad = errs
        .iter()
        .filter(|(e, g)| {
            let a = *e > abs;
            match rel {
                None => a,
                Some(r) if and => a && *e > r * g,
                Some(r) => a || *e > r * g,
            }
        })
        .count();
    100.0 * bad as f64 / errs.len() as f64
}

pub fn oracle_psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mut sse = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        sse += (*x as f64 - *y as f64).powi(2);
    }
    let mse = sse / a.len() as f64;
    -10.0 * mse.log10()
}

/// Direct two-dimensional window sums; the window is truncated at the
/// border and renormalized.
pub fn oracle_ssim(a: &Tensor, b: &Tensor) -> f64 {
    let s = a.shape();
    let r = (SSIM_WINDOW / 2) as i64;
    let wgt = |d: i64| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            for y in 0..s.h() as i64 {
                for x in 0..s.w() as i64 {
                    let (mut m, mut sa, mut sb, mut saa, mut sbb, mut sab) =
                        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy < 0 || xx < 0 || yy >= s.h() as i64 || xx >= s.w() as i64 {
                                continue;
                            }
                            let k = wgt(dy) * wgt(dx);
                            let u = a.at(n, c, yy as usize, xx as usize) as f64;
                            let v = b.at(n, c, yy as usize, xx as usize) as f64;
                            m += k;
                            sa += k * u;
                            sb += k * v;
                            saa += k * u * u;
                            sbb += k * v * v;
                            sab += k * u * v;
                        }
                    }
                    let (ma, mb) = (sa / m, sb / m);
                    let va = saa / m - ma * ma;
                    let vb = sbb / m - mb * mb;
                    let cov = sab / m - ma * mb;
                    total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                }
            }
        }
    }
    total / s.numel() as f64
}

pub fn random_field(
    rng: &mut Xoshiro256PlusPlus,
    kind: FieldKind,
    h: usize,
    w: usize,
    scale: f32,
) -> WarpField {
    let t = Tensor::from_fn(Shape::new(1, kind.channels(), h, w), |_, _, _, _| {
        rng.random_range(-scale..scale)
    });
    WarpField::new(kind, t).unwrap()
}

pub fn perturbed(rng: &mut Xoshiro256PlusPlus, f: &WarpField, spread: f32) -> WarpField {
    let mut t = f.values.clone();
    for v in t.data_mut() {
        *v += rng.random_range(-spread..spread);
    }
    WarpField::new(f.kind, t).unwrap()
}

/// Every metric against its brute-force counterpart on one random instance
/// between 8x8 and 16x16, with and without a validity mask.
pub fn metric_oracles(seed: u64) -> Check {
    let tol = 1e-6;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (h, w) = (rng.random_range(8..=16), rng.random_range(8..=16));
    for kind in [FieldKind::Disparity, FieldKind::Flow] {
        let gt = random_field(&mut rng, kind, h, w, 40.0);
        let pred = perturbed(&mut rng, &gt, 8.0);
        let mask = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| {
            if rng.random_bool(0.8) {
                1.0
            } else {
                0.0
            }
        });
        for m in [None, Some(&mask)] {
            let errs = oracle_errors(&pred.values, &gt.values, m);
            if errs.is_empty() {
                continue;
            }
            let want_epe = errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64;
            let got = epe(&pred, &gt, m).map_err(|e| e.to_string())?;
            within(&format!("seed {seed} epe"), (got - want_epe).abs(), tol)?;
            for (mode, and) in [(D1Mode::Or, false), (D1Mode::And, true)] {
                let got = threshold_error_rate(&pred, &gt, D1_ABS, Some(D1_REL), m, mode)
                    .map_err(|e| e.to_string())?;
                let want = oracle_rate(&errs, 3.0, Some(0.05), and);
                within(
                    &format!("seed {seed} {mode:?} outlier rate"),
                    (got - want).abs(),
                    tol,
                )?;
            }
            for t in [2.0, 4.0, 5.0] {
                let got = threshold_error_rate(&pred, &gt, t, None, m, D1Mode::Or)
                    .map_err(|e| e.to_string())?;
                let want = oracle_rate(&errs, t, None, false);
                within(&format!("seed {seed} >{t}px rate"), (got - want).abs(), tol)?;
            }
        }
    }
    let a = Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| {
        rng.random_range(0.0..1.0)
    });
    let b = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        (a.at(0, c, y, x) + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0)
    });
    let got = psnr(&a, &b).map_err(|e| e.to_string())?;
    within(
        &format!("seed {seed} psnr"),
        (got - oracle_psnr(&a, &b)).abs(),
        tol,
    )?;
    let got = ssim_metric(&a, &b).map_err(|e| e.to_string())?;
    within(
        &format!("seed {seed} ssim"),
        (got - oracle_ssim(&a, &b)).abs(),
        tol,
    )
}

/// Every non-adversarial loss on inputs that already agree, each of which
/// must be exactly zero.
pub fn consistent_inputs_give_zero_loss() -> Check {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let s = Shape::new(2, 3, 16, 24);
    let mut g = Graph::<f32>::new();
    let x = g.constant(random_tensor(&mut rng, s, 0.0, 1.0));
    let xr = g.constant(random_tensor(&mut rng, s, 0.0, 1.0));
    let other = g.constant(random_tensor(&mut rng, s, 0.0, 1.0));
    let ext = build_extractor(EXTRACTOR_SEED);

    let mut terms: Vec<(&str, Var)> = vec![
        ("cycle", cycle_loss(&mut g, x, x).unwrap()),
        ("perceptual", perceptual_loss(&mut g, &ext, x, x).unwrap()),
        ("cosine", cosine_loss(&mut g, x, x).unwrap()),
        ("corr", corr_consistency_loss(&mut g, x, xr, x, xr).unwrap()),
        ("ms", mode_seeking_loss(&mut g, x, other, xr, xr).unwrap()),
    ];

    // Feature taps of a pair that already agree: zero fields, equal taps.
    let half = g.downsample2(x).unwrap();
    let taps = [x, half, half];
    let zero_d = g.constant(Tensor::zeros(Shape::new(2, 1, 16, 24)));
    let zero_f = g.constant(Tensor::zeros(Shape::new(2, 2, 16, 24)));
    let cycle_taps = CycleTaps {
        a2b_ref: &taps,
        a2b_other: &taps,
        b2a_ref: &taps,
        b2a_other: &taps,
    };
    terms.push((
        "disp_warpx",
        synthetic_warp_loss(&mut g, &cycle_taps, FieldKind::Disparity, zero_d, None).unwrap(),
    ));
    terms.push((
        "flow_warpx",
        synthetic_warp_loss(&mut g, &cycle_taps, FieldKind::Flow, zero_f, None).unwrap(),
    ));
    terms.push((
        "disp_warpy",
        real_warp_loss(&mut g, &taps, &taps, FieldKind::Disparity, zero_d).unwrap(),
    ));
    terms.push((
        "flow_warpy",
        real_warp_loss(&mut g, &taps, &taps, FieldKind::Flow, zero_f).unwrap(),
    ));

    // Exact stage pyramids of a constant field.
    let gt = g.constant(Tensor::full(Shape::new(2, 1, 16, 24), 3.0));
    let stages: Vec<Var> = [(4, 0.75), (2, 1.5)]
        .iter()
        .map(|&(k, v)| g.constant(Tensor::full(Shape::new(2, 1, 16 / k, 24 / k), v)))
        .chain([gt])
        .collect();
    terms.push((
        "disp",
        supervised_disp_loss(&mut g, &stages, gt, 0.9).unwrap(),
    ));
    let gtf = g.constant(Tensor::full(Shape::new(2, 2, 16, 24), -2.0));
    let mask = g.constant(random_tensor(&mut rng, Shape::new(2, 1, 16, 24), 0.0, 1.0));
    terms.push((
        "flow",
        supervised_flow_loss(&mut g, &[gtf], gtf, Some(mask), 0.9).unwrap(),
    ));

    for (name, v) in terms {
        if g.item(v) != 0.0 {
            return Err(format!("{name} is {} on consistent inputs", g.item(v)));
        }
    }
    Ok(())
}
