//! Differentiable warping by disparity and flow, and the multi-scale and
//! stage-wise warping losses built on it.
//!
//! Conventions: a disparity `d` at left-view pixel `x` means the matching
//! right-view pixel is `x - d`; a flow `(u, v)` at frame-t pixel `(x, y)`
//! means the matching frame-(t+1) pixel is `(x + u, y + v)`. Hence
//! `warp_by_disparity(right, d, +1)` and `warp_by_flow(next, f, +1)` both
//! reconstruct the reference frame.

use crate::error::{Error, Result};
use crate::gradcore::{Axes, Graph, Real, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Disparity,
    Flow,
}

impl FieldKind {
    pub fn channels(self) -> usize {
        match self {
            FieldKind::Disparity => 1,
            FieldKind::Flow => 2,
        }
    }
}

/// A displacement field in pixels of its own scale.
///
/// `scale` is the log2 downsampling factor relative to full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpField {
    pub kind: FieldKind,
    pub values: Tensor,
    pub scale: u32,
}

impl WarpField {
    pub fn new(kind: FieldKind, values: Tensor) -> Result<Self> {
        if values.shape().c() != kind.channels() {
            return Err(Error::shape(format!(
                "{kind:?} field needs {} channel(s), got shape {}",
                kind.channels(),
                values.shape()
            )));
        }
        Ok(WarpField {
            kind,
            values,
            scale: 0,
        })
    }

    pub fn disparity(values: Tensor) -> Result<Self> {
        Self::new(FieldKind::Disparity, values)
    }

    pub fn flow(values: Tensor) -> Result<Self> {
        Self::new(FieldKind::Flow, values)
    }

    /// Binds the field values as a graph constant.
    pub fn constant<T: Real>(&self, g: &mut Graph<T>) -> Var {
        g.constant(self.values.cast())
    }
}

/// Absolute pixel-coordinate grid `(n, 2, h, w)`: channel 0 holds x,
/// channel 1 holds y.
pub fn identity_grid<T: Real>(n: usize, h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::new(n, 2, h, w), |_, c, y, x| {
        T::of(if c == 0 { x as f64 } else { y as f64 })
    })
}

fn check_aligned<T: Real>(g: &Graph<T>, src: Var, field: Var, channels: usize) -> Result<()> {
    let (s, f) = (g.shape(src), g.shape(field));
    if f.c() != channels || s.n() != f.n() || s.h() != f.h() || s.w() != f.w() {
        return Err(Error::shape(format!(
            "cannot warp {s} by a {channels}-channel field of shape {f}"
        )));
    }
    Ok(())
}

/// Samples `src` at `(x - sign * d(x, y), y)`; out-of-bounds taps read zero.
pub fn warp_by_disparity<T: Real>(g: &mut Graph<T>, src: Var, disp: Var, sign: f64) -> Result<Var> {
    check_aligned(g, src, disp, 1)?;
    let s = g.shape(src);
    let base = identity_grid::<T>(s.n(), s.h(), s.w());
    let xs = g.constant(base.clone());
    let shift = g.scale(disp, -sign)?;
    let zero = g.constant(Tensor::zeros(Shape::new(s.n(), 1, s.h(), s.w())));
    let offset = g.concat(&[shift, zero], 1)?;
    let grid = g.add(xs, offset)?;
    g.grid_sample(src, grid)
}

/// Samples `src` at `(x + sign * u, y + sign * v)`; out-of-bounds taps read
/// zero.
pub fn warp_by_flow<T: Real>(g: &mut Graph<T>, src: Var, flow: Var, sign: f64) -> Result<Var> {
    check_aligned(g, src, flow, 2)?;
    let s = g.shape(src);
    let base = g.constant(identity_grid::<T>(s.n(), s.h(), s.w()));
    let offset = g.scale(flow, sign)?;
    let grid = g.add(base, offset)?;
    g.grid_sample(src, grid)
}

pub fn warp<T: Real>(
    g: &mut Graph<T>,
    kind: FieldKind,
    src: Var,
    field: Var,
    sign: f64,
) -> Result<Var> {
    match kind {
        FieldKind::Disparity => warp_by_disparity(g, src, field, sign),
        FieldKind::Flow => warp_by_flow(g, src, field, sign),
    }
}

/// Number of halvings from `from` to `to` extents, if it is a power of two
/// in both dimensions.
fn octaves(from: Shape, to: Shape) -> Result<u32> {
    let (h, w) = (from.h(), from.w());
    for k in 0..16u32 {
        if h == to.h() << k && w == to.w() << k {
            return Ok(k);
        }
    }
    Err(Error::shape(format!(
        "extent {}x{} is not a power-of-two reduction of {h}x{w}",
        to.h(),
        to.w()
    )))
}

/// Resizes a field by `2^-octaves` (downsampling) with values rescaled
/// by the same ratio.
pub fn shrink_field<T: Real>(g: &mut Graph<T>, field: Var, octaves: u32) -> Result<Var> {
    let mut f = field;
    for _ in 0..octaves {
        f = g.downsample2(f)?;
    }
    if octaves == 0 {
        Ok(f)
    } else {
        g.scale(f, 0.5f64.powi(octaves as i32))
    }
}

/// Resizes a field by `2^octaves` (upsampling) with values rescaled.
pub fn grow_field<T: Real>(g: &mut Graph<T>, field: Var, octaves: u32) -> Result<Var> {
    let mut f = field;
    for _ in 0..octaves {
        f = g.upsample2(f)?;
    }
    if octaves == 0 {
        Ok(f)
    } else {
        g.scale(f, 2f64.powi(octaves as i32))
    }
}

/// Mean of `map` over valid pixels: `mean(mask * map) / mean(mask)`.
///
/// The mask is a constant `(n, 1, h, w)` map broadcast over channels; an
/// all-zero mask yields 0.
pub fn masked_mean<T: Real>(g: &mut Graph<T>, map: Var, mask: Option<Var>) -> Result<Var> {
    let Some(m) = mask else {
        return g.mean(map);
    };
    let mass = g.value(m).mean_f64();
    let gated = g.mul(map, m)?;
    let mean = g.mean(gated)?;
    if mass > 0.0 {
        g.scale(mean, 1.0 / mass)
    } else {
        g.scale(mean, 0.0)
    }
}

/// `(1/T) * sum_i mean|W(taps_src[i], field_i) - taps_dst[i]|`, where
/// `field_i` is the full-resolution `field` resized to tap `i`.
///
/// With a mask, each L1 map is weighted by the mask resized to the tap and
/// normalized by the mask mean.
pub fn multiscale_warp_loss<T: Real>(
    g: &mut Graph<T>,
    taps_src: &[Var],
    taps_dst: &[Var],
    kind: FieldKind,
    field: Var,
    sign: f64,
    mask: Option<Var>,
) -> Result<Var> {
    if taps_src.len() != taps_dst.len() {
        return Err(Error::usage(format!(
            "{} source taps but {} destination taps",
            taps_src.len(),
            taps_dst.len()
        )));
    }
    if taps_src.is_empty() {
        return Err(Error::usage("multiscale warp loss needs at least one tap"));
    }
    let full = g.shape(field);
    let mut terms = Vec::with_capacity(taps_src.len());
    for (&src, &dst) in taps_src.iter().zip(taps_dst) {
        let k = octaves(full, g.shape(src))?;
        let f = shrink_field(g, field, k)?;
        let warped = warp(g, kind, src, f, sign)?;
        let diff = g.sub(warped, dst)?;
        let l1 = g.abs(diff)?;
        let m = match mask {
            Some(m) => {
                let mut m = m;
                for _ in 0..k {
                    m = g.downsample2(m)?;
                }
                Some(m)
            }
            None => None,
        };
        terms.push(masked_mean(g, l1, m)?);
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(f64, Var)> = terms.into_iter().map(|t| (w, t)).collect();
    g.weighted_sum(&weighted)
}

/// Transition point of the smooth-L1 distance.
pub const SMOOTH_L1_BETA: f64 = 1.0;
/// Decay of refinement-stage weights.
pub const STAGE_GAMMA: f64 = 0.9;

/// `sum_s gamma^(S-1-s) * smoothL1(up(stages[s]), target)` over stages
/// ordered coarse to fine; each stage is resized to the target's extent with
/// values rescaled, and the smooth-L1 map is averaged (over `mask` when
/// given).
pub fn stagewise_warp_loss<T: Real>(
    g: &mut Graph<T>,
    stages: &[Var],
    target: Var,
    gamma: f64,
    mask: Option<Var>,
) -> Result<Var> {
    if stages.is_empty() {
        return Err(Error::usage("stage-wise loss needs at least one stage"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::usage(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let full = g.shape(target);
    let count = stages.len();
    let mut terms = Vec::with_capacity(count);
    for (s, &stage) in stages.iter().enumerate() {
        let k = octaves(full, g.shape(stage))?;
        let up = grow_field(g, stage, k)?;
        let map = g.smooth_l1(up, target, SMOOTH_L1_BETA)?;
        let map = if g.shape(map).c() > 1 {
            // Sum the per-component distances of a flow vector.
            g.sum_axes(map, Axes::CHANNEL)?
        } else {
            map
        };
        let term = masked_mean(g, map, mask)?;
        terms.push((gamma.powi((count - 1 - s) as i32), term));
    }
    g.weighted_sum(&terms)
}
