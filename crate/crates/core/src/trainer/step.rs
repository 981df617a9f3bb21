//! One training iteration: a translation update or a task update.

use super::{adam_update, collect_grads, Batch, TrainConfig, TrainMode, TrainState};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor, Var};
use crate::losses::{
    assemble_L_T, assemble_L_d, assemble_L_f, assemble_translation, corr_consistency_loss,
    cosine_loss, cycle_loss, discriminator_term, generator_term, mode_seeking_loss,
    perceptual_loss, real_warp_loss, supervised_disp_loss, supervised_flow_loss,
    synthetic_warp_loss, term, CycleTaps, LossBreakdown, Terms,
};
use crate::warp::FieldKind;

type G = Graph<f32>;

fn check_batches(cfg: &TrainConfig, syn: &Batch, real: &Batch) -> Result<()> {
    let need = |what: &str, t: &Option<Tensor>| {
        t.as_ref()
            .map(|_| ())
            .ok_or_else(|| Error::usage(format!("synthetic batch lacks {what}")))
    };
    need("disparity", &syn.disparity)?;
    need("flow", &syn.flow)?;
    need("occlusion", &syn.occlusion)?;
    let s = syn.left.shape();
    for (name, t) in [("right", &syn.right), ("next_left", &syn.next_left)] {
        if t.shape() != s {
            return Err(Error::usage(format!(
                "synthetic {name} is {}, left is {s}",
                t.shape()
            )));
        }
    }
    if cfg.mode == TrainMode::Full {
        let r = real.left.shape();
        if real.right.shape() != r || real.next_left.shape() != r {
            return Err(Error::usage("real batch frames differ in shape"));
        }
        if (r.c(), r.h(), r.w()) != (s.c(), s.h(), s.w()) || r.n() != s.n() {
            return Err(Error::usage(format!(
                "real batch {r} does not match synthetic batch {s}"
            )));
        }
    }
    Ok(())
}

/// Runs one iteration: a translation update when `iteration % k == 0`,
/// otherwise a task update; returns the logged loss values.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    syn: &Batch,
    real: &Batch,
) -> Result<LossBreakdown> {
    check_batches(cfg, syn, real)?;
    let translation_slot = state.iteration.is_multiple_of(cfg.k as u64);
    let losses = match (cfg.mode, translation_slot) {
        (TrainMode::Full, true) => translation_step(state, cfg, syn, real)?,
        (TrainMode::Full, false) => task_step(state, cfg, syn, Some(real))?,
        (TrainMode::SourceOnly, true) => LossBreakdown::default(),
        (TrainMode::SourceOnly, false) => task_step(state, cfg, syn, None)?,
    };
    state.update_running(&losses);
    state.iteration += 1;
    Ok(losses)
}

/// Splits every tap of a `parts * b` batch into `parts` batches of `b`.
fn split_taps(g: &mut G, taps: &[Var], parts: usize, b: usize) -> Result<Vec<Vec<Var>>> {
    (0..parts)
        .map(|i| taps.iter().map(|&t| g.narrow(t, 0, i * b, b)).collect())
        .collect()
}

fn split(g: &mut G, x: Var, parts: usize, b: usize) -> Result<Vec<Var>> {
    (0..parts).map(|i| g.narrow(x, 0, i * b, b)).collect()
}

/// Pairs each batch element with the next one (cyclically).
fn roll(g: &mut G, x: Var, b: usize) -> Result<Var> {
    let head = g.narrow(x, 0, 1, b - 1)?;
    let tail = g.narrow(x, 0, 0, 1)?;
    g.concat(&[head, tail], 0)
}

fn translation_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    syn: &Batch,
    real: &Batch,
) -> Result<LossBreakdown> {
    let w = &cfg.weights;
    let b = syn.len();
    let nets = &state.nets;
    let mut g = G::new();
    let xl = g.constant(syn.left.clone());
    let xr = g.constant(syn.right.clone());
    let xn = g.constant(syn.next_left.clone());
    let yl = g.constant(real.left.clone());
    let yr = g.constant(real.right.clone());
    let xs = g.concat(&[xl, xr, xn], 0)?;
    let ys = g.concat(&[yl, yr], 0)?;

    // synthetic -> real -> synthetic on all three frames, real -> synthetic -> real on the pair
    let (ba2b, fwd_x) = nets.g_a2b.run(&mut g, true, &[xs])?;
    let (bb2a, fwd_y) = nets.g_b2a.run(&mut g, true, &[ys])?;
    let back_x = nets.g_b2a.forward(&mut g, &bb2a, &[fwd_x.output])?;
    let back_y = nets.g_a2b.forward(&mut g, &ba2b, &[fwd_y.output])?;
    let fake_b = fwd_x.output;
    let fake_a = fwd_y.output;

    // discriminators first, on detached translations
    let mut disc = LossBreakdown::default();
    {
        let mut gd = G::new();
        let real_a = gd.constant(g.value(xs).clone());
        let real_b = gd.constant(g.value(ys).clone());
        let fa = gd.constant(g.value(fake_a).clone());
        let fb = gd.constant(g.value(fake_b).clone());
        let (bda, pa_real) = nets.d_a.run(&mut gd, true, &[real_a])?;
        let pa_fake = nets.d_a.forward(&mut gd, &bda, &[fa])?;
        let (bdb, pb_real) = nets.d_b.run(&mut gd, true, &[real_b])?;
        let pb_fake = nets.d_b.forward(&mut gd, &bdb, &[fb])?;
        let la = discriminator_term(&mut gd, pa_real.output, pa_fake.output)?;
        let lb = discriminator_term(&mut gd, pb_real.output, pb_fake.output)?;
        let total = gd.add(la, lb)?;
        gd.backward(total)?;
        disc.push(term::DISC_A, gd.item(la) as f64);
        disc.push(term::DISC_B, gd.item(lb) as f64);
        let grads_a = collect_grads(&gd, &nets.d_a, &bda);
        let grads_b = collect_grads(&gd, &nets.d_b, &bdb);
        let betas = cfg.adam_betas;
        adam_update(
            state.nets.d_a.params_mut(),
            &grads_a,
            &mut state.opt.d_a,
            cfg.lr_translation,
            betas,
            0.0,
        )?;
        adam_update(
            state.nets.d_b.params_mut(),
            &grads_b,
            &mut state.opt.d_b,
            cfg.lr_translation,
            betas,
            0.0,
        )?;
    }
    let nets = &state.nets;

    // generators against the updated, now fixed discriminators
    let mut t = Terms::new();
    let (_, pb) = nets.d_b.run(&mut g, false, &[fake_b])?;
    let (_, pa) = nets.d_a.run(&mut g, false, &[fake_a])?;
    t.insert(term::ADV_A2B, generator_term(&mut g, pb.output)?);
    t.insert(term::ADV_B2A, generator_term(&mut g, pa.output)?);

    let c1 = cycle_loss(&mut g, back_x.output, xs)?;
    let c2 = cycle_loss(&mut g, back_y.output, ys)?;
    t.insert(term::CYC, g.add(c1, c2)?);
    let p1 = perceptual_loss(&mut g, &nets.extractor, back_x.output, xs)?;
    let p2 = perceptual_loss(&mut g, &nets.extractor, back_y.output, ys)?;
    t.insert(term::PERCEPTUAL, g.add(p1, p2)?);
    let k1 = cosine_loss(&mut g, back_x.output, xs)?;
    let k2 = cosine_loss(&mut g, back_y.output, ys)?;
    t.insert(term::COSINE, g.add(k1, k2)?);

    let a2b = split_taps(&mut g, &fwd_x.taps, 3, b)?;
    let b2a = split_taps(&mut g, &back_x.taps, 3, b)?;
    let disp = g.constant(syn.disparity.clone().expect("checked"));
    let flow = g.constant(syn.flow.clone().expect("checked"));
    let occ = g.constant(syn.occlusion.clone().expect("checked"));
    let stereo_taps = CycleTaps {
        a2b_ref: &a2b[0],
        a2b_other: &a2b[1],
        b2a_ref: &b2a[0],
        b2a_other: &b2a[1],
    };
    t.insert(
        term::DISP_WARPX,
        synthetic_warp_loss(&mut g, &stereo_taps, FieldKind::Disparity, disp, None)?,
    );
    let flow_taps = CycleTaps {
        a2b_ref: &a2b[0],
        a2b_other: &a2b[2],
        b2a_ref: &b2a[0],
        b2a_other: &b2a[2],
    };
    t.insert(
        term::FLOW_WARPX,
        synthetic_warp_loss(&mut g, &flow_taps, FieldKind::Flow, flow, Some(occ))?,
    );

    let fb = split(&mut g, fake_b, 3, b)?;
    let fa = split(&mut g, fake_a, 2, b)?;
    let r1 = corr_consistency_loss(&mut g, xl, xr, fb[0], fb[1])?;
    let r2 = corr_consistency_loss(&mut g, yl, yr, fa[0], fa[1])?;
    t.insert(term::CORR, g.add(r1, r2)?);

    let ms = if b >= 2 {
        let (fb2, xl2) = (roll(&mut g, fb[0], b)?, roll(&mut g, xl, b)?);
        let (fa2, yl2) = (roll(&mut g, fa[0], b)?, roll(&mut g, yl, b)?);
        let m1 = mode_seeking_loss(&mut g, fb[0], fb2, xl, xl2)?;
        let m2 = mode_seeking_loss(&mut g, fa[0], fa2, yl, yl2)?;
        g.add(m1, m2)?
    } else {
        let m1 = mode_seeking_loss(&mut g, fb[0], fb[1], xl, xr)?;
        let m2 = mode_seeking_loss(&mut g, fa[0], fa[1], yl, yr)?;
        g.add(m1, m2)?
    };
    t.insert(term::MS, ms);

    let translation = assemble_translation(&mut g, &t, w)?;
    t.insert(term::TRANSLATION, translation);
    let l_t = assemble_L_T(&mut g, &t, w)?;
    t.insert(term::L_T, l_t);
    g.backward(l_t)?;

    let grads_a2b = collect_grads(&g, &nets.g_a2b, &ba2b);
    let grads_b2a = collect_grads(&g, &nets.g_b2a, &bb2a);
    let mut out = t.breakdown(&g);
    out.extend(&disc);
    let (lr, betas) = (cfg.lr_translation, cfg.adam_betas);
    adam_update(
        state.nets.g_a2b.params_mut(),
        &grads_a2b,
        &mut state.opt.g_a2b,
        lr,
        betas,
        0.0,
    )?;
    adam_update(
        state.nets.g_b2a.params_mut(),
        &grads_b2a,
        &mut state.opt.g_b2a,
        lr,
        betas,
        0.0,
    )?;
    Ok(out)
}

/// Task update. With `real` the task networks see translated synthetic
/// frames plus the real-pair warping terms; without it, raw synthetic
/// frames and supervised terms only.
fn task_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    syn: &Batch,
    real: Option<&Batch>,
) -> Result<LossBreakdown> {
    let w = &cfg.weights;
    let b = syn.len();
    let nets = &state.nets;
    let mut g = G::new();
    let xl = g.constant(syn.left.clone());
    let xr = g.constant(syn.right.clone());
    let xn = g.constant(syn.next_left.clone());
    let (il, ir, inext) = match real {
        Some(_) => {
            // generators are bound as constants: no gradient reaches them
            let xs = g.concat(&[xl, xr, xn], 0)?;
            let (_, fwd) = nets.g_a2b.run(&mut g, false, &[xs])?;
            let f = split(&mut g, fwd.output, 3, b)?;
            (f[0], f[1], f[2])
        }
        None => (xl, xr, xn),
    };
    let disp = g.constant(syn.disparity.clone().expect("checked"));
    let flow = g.constant(syn.flow.clone().expect("checked"));
    let occ = g.constant(syn.occlusion.clone().expect("checked"));

    let mut t = Terms::new();
    let (bs, so) = nets.stereo.run(&mut g, true, &[il, ir])?;
    let (bf, fo) = nets.flow.run(&mut g, true, &[il, inext])?;
    t.insert(
        term::DISP,
        supervised_disp_loss(&mut g, &so.stages, disp, cfg.gamma)?,
    );
    t.insert(
        term::FLOW,
        supervised_flow_loss(&mut g, &fo.stages, flow, Some(occ), cfg.gamma)?,
    );

    let (l_d, l_f) = match real {
        Some(rb) => {
            let yl = g.constant(rb.left.clone());
            let yr = g.constant(rb.right.clone());
            let yn = g.constant(rb.next_left.clone());
            let ys = g.concat(&[yl, yr, yn], 0)?;
            let (_, gy) = nets.g_b2a.run(&mut g, false, &[ys])?;
            let taps = split_taps(&mut g, &gy.taps, 3, b)?;
            let pd = nets.stereo.forward(&mut g, &bs, &[yl, yr])?.output;
            let pf = nets.flow.forward(&mut g, &bf, &[yl, yn])?.output;
            // a zero-weight term is still logged but kept off the tape
            let pd = if w.lambda_f_disp_warpy == 0.0 {
                g.detach(pd)
            } else {
                pd
            };
            let pf = if w.lambda_f_flow_warpy == 0.0 {
                g.detach(pf)
            } else {
                pf
            };
            t.insert(
                term::DISP_WARPY,
                real_warp_loss(&mut g, &taps[0], &taps[1], FieldKind::Disparity, pd)?,
            );
            t.insert(
                term::FLOW_WARPY,
                real_warp_loss(&mut g, &taps[0], &taps[2], FieldKind::Flow, pf)?,
            );
            (assemble_L_d(&mut g, &t, w)?, assemble_L_f(&mut g, &t, w)?)
        }
        None => {
            let d = t.get(term::DISP)?;
            let f = t.get(term::FLOW)?;
            (
                g.weighted_sum(&[(w.lambda_disp, d)])?,
                g.weighted_sum(&[(w.lambda_flow, f)])?,
            )
        }
    };
    t.insert(term::L_D, l_d);
    t.insert(term::L_F, l_f);
    let total = g.add(l_d, l_f)?;
    g.backward(total)?;

    let grads_s = collect_grads(&g, &nets.stereo, &bs);
    let grads_f = collect_grads(&g, &nets.flow, &bf);
    let out = t.breakdown(&g);
    let betas = cfg.adam_betas;
    adam_update(
        state.nets.stereo.params_mut(),
        &grads_s,
        &mut state.opt.stereo,
        cfg.lr_disp,
        betas,
        0.0,
    )?;
    adam_update(
        state.nets.flow.params_mut(),
        &grads_f,
        &mut state.opt.flow,
        cfg.lr_flow,
        betas,
        cfg.weight_decay_flow,
    )?;
    Ok(out)
}
