//! Evaluation metrics and report assembly. Nothing here records gradients.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gradcore::{ssim_map, Graph, Tensor};
use crate::losses::perceptual_loss;
use crate::netlib::NetworkHandle;
use crate::scenegen::SceneSample;
use crate::warp::{FieldKind, WarpField};

/// How the absolute and relative criteria of D1/F1 combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum D1Mode {
    /// Error above 3 px or above 5% of the ground truth.
    #[default]
    Or,
    /// Error above 3 px and above 5% (KITTI benchmark convention).
    And,
}

impl FromStr for D1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" => Ok(D1Mode::Or),
            "and" => Ok(D1Mode::And),
            _ => Err(Error::config(format!("d1_mode must be or|and, got {s}"))),
        }
    }
}

impl std::fmt::Display for D1Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            D1Mode::Or => "or",
            D1Mode::And => "and",
        })
    }
}

/// Which pixels count for flow metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlowValidity {
    /// Every pixel, occluded ones included.
    #[default]
    All,
    /// Only pixels visible in both frames.
    NonOccluded,
}

pub const D1_ABS: f64 = 3.0;
pub const D1_REL: f64 = 0.05;

fn check_pair(pred: &WarpField, gt: &WarpField, valid: Option<&Tensor>) -> Result<()> {
    if pred.kind != gt.kind || pred.values.shape() != gt.values.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} {} does not match ground truth {:?} {}",
            pred.kind,
            pred.values.shape(),
            gt.kind,
            gt.values.shape()
        )));
    }
    if let Some(m) = valid {
        let (s, ms) = (gt.values.shape(), m.shape());
        if ms.c() != 1 || ms.n() != s.n() || ms.h() != s.h() || ms.w() != s.w() {
            return Err(Error::shape(format!("mask {ms} does not match field {s}")));
        }
    }
    Ok(())
}

/// Per-pixel `(endpoint error, ground-truth magnitude)` over valid pixels.
fn pixel_errors(
    pred: &WarpField,
    gt: &WarpField,
    valid: Option<&Tensor>,
) -> Result<Vec<(f64, f64)>> {
    check_pair(pred, gt, valid)?;
    let s = gt.values.shape();
    let mut out = Vec::with_capacity(s.n() * s.h() * s.w());
    for n in 0..s.n() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                if let Some(m) = valid {
                    if m.at(n, 0, y, x) == 0.0 {
                        continue;
                    }
                }
                let (mut e2, mut g2) = (0.0f64, 0.0f64);
                for c in 0..s.c() {
                    let gv = gt.values.at(n, c, y, x) as f64;
                    let d = pred.values.at(n, c, y, x) as f64 - gv;
                    e2 += d * d;
                    g2 += gv * gv;
                }
                out.push((e2.sqrt(), g2.sqrt()));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::UndefinedMetric("no valid pixels".into()));
    }
    Ok(out)
}

/// Mean endpoint error over valid pixels: `|d - d*|` for disparity,
/// `||(u, v) - (u*, v*)||` for flow.
pub fn epe(pred: &WarpField, gt: &WarpField, valid: Option<&Tensor>) -> Result<f64> {
    let e = pixel_errors(pred, gt, valid)?;
    Ok(e.iter().map(|p| p.0).sum::<f64>() / e.len() as f64)
}

fn counted(err: f64, gt: f64, abs_thresh: f64, rel_thresh: Option<f64>, mode: D1Mode) -> bool {
    let over_abs = err > abs_thresh;
    match rel_thresh {
        None => over_abs,
        Some(r) => {
            let over_rel = err > r * gt;
            match mode {
                D1Mode::Or => over_abs || over_rel,
                D1Mode::And => over_abs && over_rel,
            }
        }
    }
}

/// Percentage of valid pixels whose error exceeds `abs_thresh` (combined
/// with `rel_thresh * |gt|` per `mode` when given).
pub fn threshold_error_rate(
    pred: &WarpField,
    gt: &WarpField,
    abs_thresh: f64,
    rel_thresh: Option<f64>,
    valid: Option<&Tensor>,
    mode: D1Mode,
) -> Result<f64> {
    let e = pixel_errors(pred, gt, valid)?;
    let bad = e
        .iter()
        .filter(|&&(err, g)| counted(err, g, abs_thresh, rel_thresh, mode))
        .count();
    Ok(100.0 * bad as f64 / e.len() as f64)
}

/// `10 log10(1 / MSE)`; `+inf` when the images are identical.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "psnr of {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean of the windowed SSIM map, evaluated in 64-bit arithmetic.
pub fn ssim_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = ssim_map::<f64>(&a.cast(), &b.cast())?;
    Ok(m.mean_f64())
}

/// Networks used by [`evaluate`].
#[derive(Clone, Copy)]
pub struct EvalModels<'a> {
    pub stereo: &'a NetworkHandle,
    pub flow: &'a NetworkHandle,
    pub g_a2b: &'a NetworkHandle,
    pub g_b2a: &'a NetworkHandle,
    pub extractor: &'a NetworkHandle,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub d1_mode: D1Mode,
    pub flow_validity: FlowValidity,
    /// Replace task-network predictions with the ground truth.
    pub oracle: bool,
}

/// Named scalar metrics of one evaluation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub epe_disp: f64,
    pub d1_all: f64,
    pub gt2px: f64,
    pub gt4px: f64,
    pub gt5px: f64,
    pub epe_flow: f64,
    pub f1_all: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual_dist: f64,
    pub sample_count: usize,
    pub config: Vec<(String, String)>,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 10] = [
        "epe_disp",
        "d1_all",
        "gt2px",
        "gt4px",
        "gt5px",
        "epe_flow",
        "f1_all",
        "psnr",
        "ssim",
        "perceptual_dist",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.epe_disp,
            self.d1_all,
            self.gt2px,
            self.gt4px,
            self.gt5px,
            self.epe_flow,
            self.f1_all,
            self.psnr,
            self.ssim,
            self.perceptual_dist,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::FIELDS
            .iter()
            .position(|&f| f == name)
            .map(|i| self.values()[i])
    }

    /// Flat `name=value` block: metrics, sample count, then config echo.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (n, v) in Self::FIELDS.iter().zip(self.values()) {
            let _ = writeln!(s, "{n}={}", fmt_value(v));
        }
        let _ = writeln!(s, "sample_count={}", self.sample_count);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        s
    }

    pub fn csv_header() -> String {
        let mut h = Self::FIELDS.join(",");
        h.push_str(",sample_count");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r: Vec<String> = self.values().iter().map(|&v| fmt_value(v)).collect();
        r.push(self.sample_count.to_string());
        r.join(",")
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

#[derive(Default)]
struct Tally {
    disp_pixels: usize,
    disp_err: f64,
    d1: usize,
    gt2: usize,
    gt4: usize,
    gt5: usize,
    flow_pixels: usize,
    flow_err: f64,
    f1: usize,
    psnr: f64,
    ssim: f64,
    perceptual: f64,
}

fn predict(net: &NetworkHandle, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::<f32>::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let (_, out) = net.run(&mut g, false, &[av, bv])?;
    Ok(g.value(out.output).clone())
}

fn evaluate_one(m: &EvalModels, s: &SceneSample, opts: &EvalOptions) -> Result<Tally> {
    let missing = |what: &str| Error::UndefinedMetric(format!("sample has no ground-truth {what}"));
    let gt_d = s.disparity.as_ref().ok_or_else(|| missing("disparity"))?;
    let gt_f = s.flow.as_ref().ok_or_else(|| missing("flow"))?;
    let (pd, pf) = if opts.oracle {
        (gt_d.clone(), gt_f.clone())
    } else {
        (
            WarpField::new(FieldKind::Disparity, predict(m.stereo, &s.left, &s.right)?)?,
            WarpField::new(FieldKind::Flow, predict(m.flow, &s.left, &s.next_left)?)?,
        )
    };
    let mut t = Tally::default();
    for (err, gt) in pixel_errors(&pd, gt_d, None)? {
        t.disp_pixels += 1;
        t.disp_err += err;
        t.d1 += counted(err, gt, D1_ABS, Some(D1_REL), opts.d1_mode) as usize;
        t.gt2 += (err > 2.0) as usize;
        t.gt4 += (err > 4.0) as usize;
        t.gt5 += (err > 5.0) as usize;
    }
    let mask = match opts.flow_validity {
        FlowValidity::All => None,
        FlowValidity::NonOccluded => {
            Some(s.occlusion.as_ref().ok_or_else(|| missing("occlusion"))?)
        }
    };
    for (err, gt) in pixel_errors(&pf, gt_f, mask)? {
        t.flow_pixels += 1;
        t.flow_err += err;
        t.f1 += counted(err, gt, D1_ABS, Some(D1_REL), opts.d1_mode) as usize;
    }

    let mut g = Graph::<f32>::new();
    let y = g.constant(s.left.clone());
    let (_, fake) = m.g_b2a.run(&mut g, false, &[y])?;
    let (_, rec) = m.g_a2b.run(&mut g, false, &[fake.output])?;
    let rec_t = g.value(rec.output).clone();
    t.psnr = psnr(&rec_t, &s.left)?;
    t.ssim = ssim_metric(&rec_t, &s.left)?;
    let p = perceptual_loss(&mut g, m.extractor, rec.output, y)?;
    t.perceptual = g.item(p) as f64;
    Ok(t)
}

/// Runs the task networks on each sample's real-domain views and the
/// real-synthetic-real cycle on its left image; pixel metrics are pooled
/// over all samples, image metrics averaged per sample.
pub fn evaluate(
    models: &EvalModels,
    samples: &[SceneSample],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("empty evaluation set".into()));
    }
    let tallies: Vec<Tally> = samples
        .par_iter()
        .map(|s| evaluate_one(models, s, opts))
        .collect::<Result<_>>()?;
    let mut sum = Tally::default();
    for t in &tallies {
        sum.disp_pixels += t.disp_pixels;
        sum.disp_err += t.disp_err;
        sum.d1 += t.d1;
        sum.gt2 += t.gt2;
        sum.gt4 += t.gt4;
        sum.gt5 += t.gt5;
        sum.flow_pixels += t.flow_pixels;
        sum.flow_err += t.flow_err;
        sum.f1 += t.f1;
        sum.psnr += t.psnr;
        sum.ssim += t.ssim;
        sum.perceptual += t.perceptual;
    }
    let n = samples.len() as f64;
    let dp = sum.disp_pixels as f64;
    let fp = sum.flow_pixels as f64;
    Ok(MetricsReport {
        epe_disp: sum.disp_err / dp,
        d1_all: 100.0 * sum.d1 as f64 / dp,
        gt2px: 100.0 * sum.gt2 as f64 / dp,
        gt4px: 100.0 * sum.gt4 as f64 / dp,
        gt5px: 100.0 * sum.gt5 as f64 / dp,
        epe_flow: sum.flow_err / fp,
        f1_all: 100.0 * sum.f1 as f64 / fp,
        psnr: sum.psnr / n,
        ssim: sum.ssim / n,
        perceptual_dist: sum.perceptual / n,
        sample_count: samples.len(),
        config: vec![
            ("d1_mode".into(), opts.d1_mode.to_string()),
            (
                "flow_validity".into(),
                match opts.flow_validity {
                    FlowValidity::All => "all".into(),
                    FlowValidity::NonOccluded => "noc".into(),
                },
            ),
            ("oracle".into(), opts.oracle.to_string()),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Shape;

    fn disp(v: &[f32]) -> WarpField {
        WarpField::disparity(Tensor::new(Shape::new(1, 1, 2, 2), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn hand_epe() {
        let gt = disp(&[1.0, 2.0, 3.0, 4.0]);
        let pred = disp(&[2.0, 2.0, 3.0, 4.0]);
        assert_eq!(epe(&pred, &gt, None).unwrap(), 0.25);
        assert_eq!(epe(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn d1_counting_rule() {
        let gt = disp(&[10.0; 4]);
        let far = disp(&[14.0, 10.0, 10.0, 10.0]);
        let near = disp(&[10.4, 10.0, 10.0, 10.0]);
        let rate = |p: &WarpField| {
            threshold_error_rate(p, &gt, 3.0, Some(0.05), None, D1Mode::Or).unwrap()
        };
        assert_eq!(rate(&far), 25.0);
        assert_eq!(rate(&near), 0.0);
    }

    #[test]
    fn empty_mask_is_undefined() {
        let gt = disp(&[1.0; 4]);
        let mask = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            epe(&gt, &gt, Some(&mask)),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn psnr_reference_values() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::full(Shape::new(1, 1, 2, 2), 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let one = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        assert_eq!(psnr(&a, &one).unwrap(), 0.0);
    }
}
