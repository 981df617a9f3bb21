//! Translation, warping and supervised losses, and the three training
//! objectives assembled from them.

use std::collections::BTreeMap;
use std::fmt;

mod check;

use crate::error::{Error, Result};
use crate::gradcore::{Axes, CorrAxis, Graph, Real, Var};
use crate::netlib::{extractor_features, NetworkHandle};
use crate::warp::{multiscale_warp_loss, stagewise_warp_loss, FieldKind};

pub use check::loss_suite;

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-6;
/// Denominator guard of the mode-seeking ratio.
pub const MS_EPS: f64 = 1e-5;
/// Maximum displacement of the correlation volumes compared by L_corr.
pub const CORR_DISP: i32 = 8;
const CORR_NORM_EPS: f64 = 1e-5;

/// Loss coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_translation: f64,
    pub lambda_cyc: f64,
    pub lambda_perceptual: f64,
    pub lambda_cosine: f64,
    pub lambda_f_disp_warpx: f64,
    pub lambda_f_flow_warpx: f64,
    pub lambda_corr: f64,
    pub lambda_ms: f64,
    pub lambda_disp: f64,
    pub lambda_f_disp_warpy: f64,
    pub lambda_flow: f64,
    pub lambda_f_flow_warpy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_translation: 10.0,
            lambda_cyc: 10.0,
            lambda_perceptual: 1.0,
            lambda_cosine: 1.0,
            lambda_f_disp_warpx: 5.0,
            lambda_f_flow_warpx: 5.0,
            lambda_corr: 1.0,
            lambda_ms: 0.1,
            lambda_disp: 1.0,
            lambda_f_disp_warpy: 5.0,
            lambda_flow: 1.0,
            lambda_f_flow_warpy: 5.0,
        }
    }
}

impl LossWeights {
    pub const NAMES: [&'static str; 12] = [
        "lambda_translation",
        "lambda_cyc",
        "lambda_perceptual",
        "lambda_cosine",
        "lambda_f_disp_warpx",
        "lambda_f_flow_warpx",
        "lambda_corr",
        "lambda_ms",
        "lambda_disp",
        "lambda_f_disp_warpy",
        "lambda_flow",
        "lambda_f_flow_warpy",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut f64> {
        Some(match name {
            "lambda_translation" => &mut self.lambda_translation,
            "lambda_cyc" => &mut self.lambda_cyc,
            "lambda_perceptual" => &mut self.lambda_perceptual,
            "lambda_cosine" => &mut self.lambda_cosine,
            "lambda_f_disp_warpx" => &mut self.lambda_f_disp_warpx,
            "lambda_f_flow_warpx" => &mut self.lambda_f_flow_warpx,
            "lambda_corr" => &mut self.lambda_corr,
            "lambda_ms" => &mut self.lambda_ms,
            "lambda_disp" => &mut self.lambda_disp,
            "lambda_f_disp_warpy" => &mut self.lambda_f_disp_warpy,
            "lambda_flow" => &mut self.lambda_flow,
            "lambda_f_flow_warpy" => &mut self.lambda_f_flow_warpy,
            _ => return None,
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.clone().slot(name).map(|v| *v)
    }

    /// Sets a weight by name; unknown names and negative values are config
    /// errors.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::config(format!(
                "{name} must be finite and >= 0, got {value}"
            )));
        }
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::config(format!("unknown loss weight {name}")))?;
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for name in Self::NAMES {
            let v = self.get(name).unwrap_or(0.0);
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        Self::NAMES
            .iter()
            .map(|&n| (n, self.get(n).unwrap_or(0.0)))
            .collect()
    }
}

/// Names of the individual terms and aggregates.
pub mod term {
    pub const ADV_A2B: &str = "adv_a2b";
    pub const ADV_B2A: &str = "adv_b2a";
    pub const DISC_A: &str = "disc_a";
    pub const DISC_B: &str = "disc_b";
    pub const CYC: &str = "cyc";
    pub const PERCEPTUAL: &str = "perceptual";
    pub const COSINE: &str = "cosine";
    pub const TRANSLATION: &str = "translation";
    pub const DISP_WARPX: &str = "disp_warpx";
    pub const FLOW_WARPX: &str = "flow_warpx";
    pub const DISP_WARPY: &str = "disp_warpy";
    pub const FLOW_WARPY: &str = "flow_warpy";
    pub const CORR: &str = "corr";
    pub const MS: &str = "ms";
    pub const DISP: &str = "disp";
    pub const FLOW: &str = "flow";
    pub const L_T: &str = "L_T";
    pub const L_D: &str = "L_d";
    pub const L_F: &str = "L_f";
}

/// Named scalar graph nodes feeding an objective.
#[derive(Clone, Debug, Default)]
pub struct Terms {
    map: BTreeMap<&'static str, Var>,
}

impl Terms {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'static str, v: Var) {
        self.map.insert(name, v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("missing loss term {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, Var)> + '_ {
        self.map.iter().map(|(&k, &v)| (k, v))
    }

    /// Scalar values of every term, in name order.
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let mut b = LossBreakdown::default();
        for (name, v) in self.iter() {
            b.push(name, g.item(v).f64());
        }
        b
    }
}

/// Scalar values of loss terms, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    entries: Vec<(String, f64)>,
}

impl LossBreakdown {
    pub fn push(&mut self, name: &str, value: f64) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(e) => e.1 = value,
            None => self.entries.push((name.to_string(), value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn extend(&mut self, other: &LossBreakdown) {
        for (n, v) in &other.entries {
            self.push(n, *v);
        }
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str("\t")?;
            }
            write!(f, "{n}={v:e}")?;
        }
        Ok(())
    }
}

fn mean_log<T: Real>(g: &mut Graph<T>, p: Var, complement: bool) -> Result<Var> {
    let p = g.clamp(p, P_EPS, 1.0 - P_EPS)?;
    let p = if complement {
        g.affine(p, -1.0, 1.0)?
    } else {
        p
    };
    let l = g.ln(p)?;
    g.mean(l)
}

/// Discriminator side of the log loss: `-(mean ln d_real + mean ln(1 - d_fake))`.
pub fn discriminator_term<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let a = mean_log(g, d_real, false)?;
    let b = mean_log(g, d_fake, true)?;
    let s = g.add(a, b)?;
    g.scale(s, -1.0)
}

/// Non-saturating generator side: `-mean ln d_fake`.
pub fn generator_term<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    let a = mean_log(g, d_fake, false)?;
    g.scale(a, -1.0)
}

/// Returns `(generator_term, discriminator_term)`.
pub fn adversarial_loss<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<(Var, Var)> {
    Ok((
        generator_term(g, d_fake)?,
        discriminator_term(g, d_real, d_fake)?,
    ))
}

/// `mean|rec - orig| + (1 - mean SSIM(rec, orig))` for one direction.
pub fn cycle_loss<T: Real>(g: &mut Graph<T>, reconstructed: Var, original: Var) -> Result<Var> {
    let l1 = g.l1(reconstructed, original)?;
    let s = g.ssim_map(reconstructed, original)?;
    let s = g.mean(s)?;
    let dissim = g.affine(s, -1.0, 1.0)?;
    g.add(l1, dissim)
}

/// Sum over extractor scales of the mean squared feature difference.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &NetworkHandle,
    a: Var,
    b: Var,
) -> Result<Var> {
    let fa = extractor_features(extractor, g, a)?;
    let fb = extractor_features(extractor, g, b)?;
    let mut terms = Vec::with_capacity(fa.len());
    for (x, y) in fa.into_iter().zip(fb) {
        let d = g.sub(x, y)?;
        let d = g.square(d)?;
        terms.push((1.0, g.mean(d)?));
    }
    g.weighted_sum(&terms)
}

/// `1 - mean` of the per-pixel channel cosine similarity.
pub fn cosine_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let c = g.cosine_map(a, b)?;
    let m = g.mean(c)?;
    g.affine(m, -1.0, 1.0)
}

fn corr_volume<T: Real>(g: &mut Graph<T>, l: Var, r: Var) -> Result<Var> {
    let l = g.instance_norm(l, CORR_NORM_EPS)?;
    let r = g.instance_norm(r, CORR_NORM_EPS)?;
    g.correlation(l, r, CorrAxis::Horizontal, 0, CORR_DISP)
}

/// Mean L1 between the horizontal correlation volumes of the original pair
/// and of its translation; inputs are instance-normalized first.
pub fn corr_consistency_loss<T: Real>(
    g: &mut Graph<T>,
    x_l: Var,
    x_r: Var,
    g_l: Var,
    g_r: Var,
) -> Result<Var> {
    if g.shape(x_l) != g.shape(g_l) || g.shape(x_r) != g.shape(g_r) {
        return Err(Error::shape(
            "translated pair does not match the original pair",
        ));
    }
    let a = corr_volume(g, x_l, x_r)?;
    let b = corr_volume(g, g_l, g_r)?;
    g.l1(a, b)
}

/// `mean|src1 - src2| / (mean|fake1 - fake2| + 1e-5)`.
pub fn mode_seeking_loss<T: Real>(
    g: &mut Graph<T>,
    fake1: Var,
    fake2: Var,
    src1: Var,
    src2: Var,
) -> Result<Var> {
    let s = g.l1(src1, src2)?;
    let s = g.detach(s);
    let f = g.l1(fake1, fake2)?;
    let den = g.affine(f, 1.0, MS_EPS)?;
    g.div(s, den)
}

/// Stage-wise smooth-L1 against ground-truth disparity.
pub fn supervised_disp_loss<T: Real>(
    g: &mut Graph<T>,
    stages: &[Var],
    x_d: Var,
    gamma: f64,
) -> Result<Var> {
    stagewise_warp_loss(g, stages, x_d, gamma, None)
}

/// Stage-wise smooth-L1 against ground-truth flow, gated by the
/// occlusion mask when given.
pub fn supervised_flow_loss<T: Real>(
    g: &mut Graph<T>,
    stages: &[Var],
    x_f: Var,
    mask: Option<Var>,
    gamma: f64,
) -> Result<Var> {
    stagewise_warp_loss(g, stages, x_f, gamma, mask)
}

/// Generator taps of one image pair along the synthetic cycle:
/// `G_A2B` taps of the two synthetic frames and `G_B2A` taps of their
/// translations.
pub struct CycleTaps<'a> {
    pub a2b_ref: &'a [Var],
    pub a2b_other: &'a [Var],
    pub b2a_ref: &'a [Var],
    pub b2a_other: &'a [Var],
}

/// Synthetic feature warping: the ground-truth field warps taps of the second frame
/// (right view or frame t+1) onto the reference frame, for both
/// generators of the synthetic-real-synthetic cycle.
pub fn synthetic_warp_loss<T: Real>(
    g: &mut Graph<T>,
    taps: &CycleTaps,
    kind: FieldKind,
    field: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let a = multiscale_warp_loss(g, taps.a2b_other, taps.a2b_ref, kind, field, 1.0, mask)?;
    let b = multiscale_warp_loss(g, taps.b2a_other, taps.b2a_ref, kind, field, 1.0, mask)?;
    g.add(a, b)
}

/// Real feature warping: `G_B2A` taps of a real pair warped both ways by the
/// predicted field.
///
/// The first term moves reference-frame features forward along the field,
/// the second pulls second-frame features back onto the reference frame.
pub fn real_warp_loss<T: Real>(
    g: &mut Graph<T>,
    taps_ref: &[Var],
    taps_other: &[Var],
    kind: FieldKind,
    predicted: Var,
) -> Result<Var> {
    let fwd = multiscale_warp_loss(g, taps_ref, taps_other, kind, predicted, -1.0, None)?;
    let back = multiscale_warp_loss(g, taps_other, taps_ref, kind, predicted, 1.0, None)?;
    g.add(fwd, back)
}

/// Translation aggregate: adversarial, cycle, perceptual and cosine terms.
pub fn assemble_translation<T: Real>(
    g: &mut Graph<T>,
    parts: &Terms,
    w: &LossWeights,
) -> Result<Var> {
    g.weighted_sum(&[
        (1.0, parts.get(term::ADV_A2B)?),
        (1.0, parts.get(term::ADV_B2A)?),
        (w.lambda_cyc, parts.get(term::CYC)?),
        (w.lambda_perceptual, parts.get(term::PERCEPTUAL)?),
        (w.lambda_cosine, parts.get(term::COSINE)?),
    ])
}

/// Translation-module objective; the translation aggregate is scaled by
/// `lambda_translation`.
#[allow(non_snake_case)]
pub fn assemble_L_T<T: Real>(g: &mut Graph<T>, parts: &Terms, w: &LossWeights) -> Result<Var> {
    let translation = match parts.get(term::TRANSLATION) {
        Ok(v) => v,
        Err(_) => assemble_translation(g, parts, w)?,
    };
    g.weighted_sum(&[
        (w.lambda_translation, translation),
        (w.lambda_f_disp_warpx, parts.get(term::DISP_WARPX)?),
        (w.lambda_f_flow_warpx, parts.get(term::FLOW_WARPX)?),
        (w.lambda_corr, parts.get(term::CORR)?),
        (w.lambda_ms, parts.get(term::MS)?),
    ])
}

/// Stereo objective: supervised disparity plus real-pair disparity warping.
#[allow(non_snake_case)]
pub fn assemble_L_d<T: Real>(g: &mut Graph<T>, parts: &Terms, w: &LossWeights) -> Result<Var> {
    g.weighted_sum(&[
        (w.lambda_disp, parts.get(term::DISP)?),
        (w.lambda_f_disp_warpy, parts.get(term::DISP_WARPY)?),
    ])
}

/// Flow objective: supervised flow plus real-pair flow warping.
#[allow(non_snake_case)]
pub fn assemble_L_f<T: Real>(g: &mut Graph<T>, parts: &Terms, w: &LossWeights) -> Result<Var> {
    g.weighted_sum(&[
        (w.lambda_flow, parts.get(term::FLOW)?),
        (w.lambda_f_flow_warpy, parts.get(term::FLOW_WARPY)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{Shape, Tensor};

    #[test]
    fn weights_round_trip_by_name() {
        let mut w = LossWeights::default();
        for (name, v) in LossWeights::default().entries() {
            w.set(name, v + 1.0).unwrap();
            assert_eq!(w.get(name), Some(v + 1.0));
        }
        assert!(w.set("lambda_bogus", 1.0).is_err());
        assert!(w.set("lambda_ms", -1.0).is_err());
    }

    #[test]
    fn missing_part_is_usage_error() {
        let mut g = Graph::<f64>::new();
        let mut t = Terms::new();
        t.insert(term::DISP, g.scalar(1.0));
        assert!(matches!(
            assemble_L_d(&mut g, &t, &LossWeights::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn breakdown_display_is_tab_separated() {
        let mut b = LossBreakdown::default();
        b.push("a", 1.0);
        b.push("b", 0.5);
        b.push("a", 2.0);
        assert_eq!(b.to_string(), "a=2e0\tb=5e-1");
    }

    #[test]
    fn half_probabilities() {
        let mut g = Graph::<f64>::new();
        let half = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 0.5));
        let (gen, disc) = adversarial_loss(&mut g, half, half).unwrap();
        assert!((g.item(gen) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.item(disc) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }
}
