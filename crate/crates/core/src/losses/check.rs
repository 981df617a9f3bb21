//! Finite-difference checks of every loss term and objective.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;
use crate::gradcore::check::sample;
use crate::gradcore::{grad_check, grad_check_piecewise, CheckOutcome, Shape, Tensor};
use crate::netlib::{build_extractor, EXTRACTOR_SEED};
use crate::warp::{FieldKind, STAGE_GAMMA};

const SMOOTH: (f64, f64) = (1e-4, 3e-5);
const PIECEWISE: (f64, f64) = (1e-3, 1e-5);

/// Field that is constant on 2x2 blocks with fractional parts kept away
/// from interpolation-cell boundaries at full and half resolution.
fn block_field(
    rng: &mut Xoshiro256PlusPlus,
    c: usize,
    h: usize,
    w: usize,
    span: i32,
) -> Tensor<f64> {
    let blocks: Vec<f64> = (0..c * (h / 2) * (w / 2))
        .map(|_| {
            let whole = 2 * rng.random_range(-span..=span);
            whole as f64
                + rng.random_range(0.25..0.75) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        })
        .collect();
    Tensor::from_fn(Shape::new(1, c, h, w), |_, ch, y, x| {
        blocks[(ch * (h / 2) + y / 2) * (w / 2) + x / 2]
    })
}

/// Full, half, half: the tap layout of the generators.
fn taps_of(g: &mut Graph<f64>, full: Var) -> Result<Vec<Var>> {
    let half = g.downsample2(full)?;
    Ok(vec![full, half, half])
}

fn constant_taps(g: &mut Graph<f64>, t: &Tensor<f64>) -> Result<Vec<Var>> {
    let v = g.constant(t.clone());
    taps_of(g, v)
}

/// Checks every loss term, both warping losses with respect to the field and
/// the features, and the three objectives, on inputs drawn from `seed`.
///
/// Terms built only from smooth kernels must reach relative error `< 1e-4`,
/// the rest `< 1e-3` under [`grad_check_piecewise`].
pub fn loss_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x1055_c4ec);
    let r = &mut rng;
    let img = Shape::new(1, 3, 12, 12);
    let feat = Shape::new(1, 4, 8, 8);
    let prob = |r: &mut Xoshiro256PlusPlus| sample(r, Shape::new(1, 1, 3, 3), 0.05, 0.95, &[], 0.0);
    let unit = |r: &mut Xoshiro256PlusPlus, s: Shape| sample(r, s, 0.0, 1.0, &[], 0.0);

    let extractor = build_extractor(EXTRACTOR_SEED);
    let weights = LossWeights::default();
    let mut out = Vec::new();
    let mut run = |name: &str,
                   (threshold, step): (f64, f64),
                   x: &Tensor<f64>,
                   f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>|
     -> Result<()> {
        let max_rel_error = if threshold > SMOOTH.0 {
            grad_check_piecewise(f, x, step, threshold)?
        } else {
            grad_check(f, x, step)?
        };
        out.push(CheckOutcome {
            name: name.to_string(),
            max_rel_error,
            threshold,
        });
        Ok(())
    };

    let d_real = prob(r);
    let d_fake = prob(r);
    run("adversarial/generator", SMOOTH, &d_fake, &|g, x| {
        generator_term(g, x)
    })?;
    run(
        "adversarial/discriminator_real",
        SMOOTH,
        &d_real,
        &|g, x| {
            let f = g.constant(d_fake.clone());
            discriminator_term(g, x, f)
        },
    )?;
    run(
        "adversarial/discriminator_fake",
        SMOOTH,
        &d_fake,
        &|g, x| {
            let real = g.constant(d_real.clone());
            discriminator_term(g, real, x)
        },
    )?;

    let a = unit(r, img);
    let b = unit(r, img);
    run("cycle", PIECEWISE, &a, &|g, x| {
        let o = g.constant(b.clone());
        cycle_loss(g, x, o)
    })?;
    run("perceptual", PIECEWISE, &a, &|g, x| {
        let o = g.constant(b.clone());
        perceptual_loss(g, &extractor, x, o)
    })?;
    run("cosine", SMOOTH, &a, &|g, x| {
        let o = g.constant(b.clone());
        cosine_loss(g, x, o)
    })?;
    let (xl, xr, gr) = (unit(r, img), unit(r, img), unit(r, img));
    run("corr_consistency", PIECEWISE, &a, &|g, x| {
        let (l, rr, t) = (
            g.constant(xl.clone()),
            g.constant(xr.clone()),
            g.constant(gr.clone()),
        );
        corr_consistency_loss(g, l, rr, x, t)
    })?;
    let (f2, s1, s2) = (unit(r, img), unit(r, img), unit(r, img));
    run("mode_seeking", PIECEWISE, &a, &|g, x| {
        let (f2, s1, s2) = (
            g.constant(f2.clone()),
            g.constant(s1.clone()),
            g.constant(s2.clone()),
        );
        mode_seeking_loss(g, x, f2, s1, s2)
    })?;

    // Supervised terms over a three-stage pyramid; the finest stage is the
    // checked input and coarser stages derive from it.
    let (h, w) = (8, 8);
    let gt_disp = block_field(r, 1, h, w, 1);
    let gt_flow = block_field(r, 2, h, w, 1);
    let occ = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| {
        if r.random_bool(0.75) {
            1.0
        } else {
            0.0
        }
    });
    let pyramid = |g: &mut Graph<f64>, x: Var| -> Result<Vec<Var>> {
        let half = g.downsample2(x)?;
        let half = g.scale(half, 0.5)?;
        let quarter = g.downsample2(half)?;
        let quarter = g.scale(quarter, 0.5)?;
        Ok(vec![quarter, half, x])
    };
    let pd = block_field(r, 1, h, w, 1);
    let pf = block_field(r, 2, h, w, 1);
    run("supervised_disp", PIECEWISE, &pd, &|g, x| {
        let stages = pyramid(g, x)?;
        let t = g.constant(gt_disp.clone());
        supervised_disp_loss(g, &stages, t, STAGE_GAMMA)
    })?;
    run("supervised_flow", PIECEWISE, &pf, &|g, x| {
        let stages = pyramid(g, x)?;
        let t = g.constant(gt_flow.clone());
        let m = g.constant(occ.clone());
        supervised_flow_loss(g, &stages, t, Some(m), STAGE_GAMMA)
    })?;

    let feats: Vec<Tensor<f64>> = (0..4)
        .map(|_| sample(r, feat, -1.0, 1.0, &[], 0.0))
        .collect();
    for (kind, field, label) in [
        (FieldKind::Disparity, &gt_disp, "disparity"),
        (FieldKind::Flow, &gt_flow, "flow"),
    ] {
        let mask = (kind == FieldKind::Flow).then(|| occ.clone());
        run(
            &format!("synthetic_warp/{label}"),
            PIECEWISE,
            &feats[0],
            &|g, x| {
                let other = taps_of(g, x)?;
                let reference = constant_taps(g, &feats[1])?;
                let b2a_other = constant_taps(g, &feats[2])?;
                let b2a_ref = constant_taps(g, &feats[3])?;
                let taps = CycleTaps {
                    a2b_ref: &reference,
                    a2b_other: &other,
                    b2a_ref: &b2a_ref,
                    b2a_other: &b2a_other,
                };
                let f = g.constant(field.clone());
                let m = mask.clone().map(|m| g.constant(m));
                synthetic_warp_loss(g, &taps, kind, f, m)
            },
        )?;
    }
    for (kind, field, label) in [
        (FieldKind::Disparity, &pd, "disparity"),
        (FieldKind::Flow, &pf, "flow"),
    ] {
        run(
            &format!("real_warp/{label}/field"),
            PIECEWISE,
            field,
            &|g, x| {
                let reference = constant_taps(g, &feats[0])?;
                let other = constant_taps(g, &feats[1])?;
                real_warp_loss(g, &reference, &other, kind, x)
            },
        )?;
        run(
            &format!("real_warp/{label}/features"),
            PIECEWISE,
            &feats[0],
            &|g, x| {
                let reference = taps_of(g, x)?;
                let other = constant_taps(g, &feats[1])?;
                let f = g.constant(field.clone());
                real_warp_loss(g, &reference, &other, kind, f)
            },
        )?;
    }

    // Objectives with every term driven by the checked input.
    run("L_d", PIECEWISE, &pd, &|g, x| {
        let mut t = Terms::new();
        let stages = pyramid(g, x)?;
        let gt = g.constant(gt_disp.clone());
        t.insert(
            term::DISP,
            supervised_disp_loss(g, &stages, gt, STAGE_GAMMA)?,
        );
        let reference = constant_taps(g, &feats[0])?;
        let other = constant_taps(g, &feats[1])?;
        t.insert(
            term::DISP_WARPY,
            real_warp_loss(g, &reference, &other, FieldKind::Disparity, x)?,
        );
        assemble_L_d(g, &t, &weights)
    })?;
    run("L_f", PIECEWISE, &pf, &|g, x| {
        let mut t = Terms::new();
        let stages = pyramid(g, x)?;
        let gt = g.constant(gt_flow.clone());
        let m = g.constant(occ.clone());
        t.insert(
            term::FLOW,
            supervised_flow_loss(g, &stages, gt, Some(m), STAGE_GAMMA)?,
        );
        let reference = constant_taps(g, &feats[0])?;
        let other = constant_taps(g, &feats[1])?;
        t.insert(
            term::FLOW_WARPY,
            real_warp_loss(g, &reference, &other, FieldKind::Flow, x)?,
        );
        assemble_L_f(g, &t, &weights)
    })?;
    let fake_b = unit(r, img);
    let x_r = unit(r, img);
    run("L_T", PIECEWISE, &a, &|g, x| {
        let mut t = Terms::new();
        let orig = g.constant(b.clone());
        let p = g.mean_axes(x, Axes::CHANNEL)?;
        let p = g.sigmoid(p)?;
        t.insert(term::ADV_A2B, generator_term(g, p)?);
        t.insert(term::ADV_B2A, generator_term(g, p)?);
        t.insert(term::CYC, cycle_loss(g, x, orig)?);
        t.insert(term::PERCEPTUAL, perceptual_loss(g, &extractor, x, orig)?);
        t.insert(term::COSINE, cosine_loss(g, x, orig)?);
        let right = g.constant(x_r.clone());
        let fb = g.constant(fake_b.clone());
        t.insert(term::CORR, corr_consistency_loss(g, orig, right, x, fb)?);
        t.insert(term::MS, mode_seeking_loss(g, x, fb, orig, right)?);
        let x8 = g.narrow(x, 2, 0, 8)?;
        let x8 = g.narrow(x8, 3, 0, 8)?;
        let x8 = g.narrow(x8, 1, 0, 3)?;
        let other = taps_of(g, x8)?;
        let fixed = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, c, y, xx| {
            feats[1].at(0, c, y, xx)
        });
        let reference = constant_taps(g, &fixed)?;
        let taps = CycleTaps {
            a2b_ref: &reference,
            a2b_other: &other,
            b2a_ref: &reference,
            b2a_other: &other,
        };
        let fd = g.constant(gt_disp.clone());
        t.insert(
            term::DISP_WARPX,
            synthetic_warp_loss(g, &taps, FieldKind::Disparity, fd, None)?,
        );
        let ff = g.constant(gt_flow.clone());
        let m = g.constant(occ.clone());
        t.insert(
            term::FLOW_WARPX,
            synthetic_warp_loss(g, &taps, FieldKind::Flow, ff, Some(m))?,
        );
        assemble_L_T(g, &t, &weights)
    })?;
    Ok(out)
}
