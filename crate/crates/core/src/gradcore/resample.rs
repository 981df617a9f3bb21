//! Bilinear resizing by a factor of two, bilinear grid sampling and 1-D
//! correlation volumes.

use super::tensor::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Two source taps and weights per output index for 2x bilinear upsampling
/// with half-pixel centers and edge clamping.
fn up_taps(out_len: usize, in_len: usize) -> Vec<[(usize, f64); 2]> {
    (0..out_len)
        .map(|i| {
            let j = i / 2;
            if i % 2 == 0 {
                let lo = j.saturating_sub(1);
                [(lo, 0.25), (j, 0.75)]
            } else {
                let hi = (j + 1).min(in_len - 1);
                [(j, 0.75), (hi, 0.25)]
            }
        })
        .collect()
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let ty = up_taps(2 * h, h);
    let tx = up_taps(2 * w, w);
    let mut out = Tensor::zeros(Shape::new(n, c, 2 * h, 2 * w));
    let ow = 2 * w;
    let planes = x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(4 * h * w));
    for (src, dst) in planes {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut acc = T::zero();
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        acc += T::of(wy * wx) * src[sy * w + sx];
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(x_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = x_shape.0;
    let ty = up_taps(2 * h, h);
    let tx = up_taps(2 * w, w);
    let mut out = Tensor::zeros(x_shape);
    let ow = 2 * w;
    let planes = g
        .data()
        .chunks(4 * h * w)
        .zip(out.data_mut().chunks_mut(h * w));
    for (src, dst) in planes {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let gv = src[oy * ow + ox];
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        dst[sy * w + sx] += T::of(wy * wx) * gv;
                    }
                }
            }
        }
    }
    out
}

/// 2x downsampling; with half-pixel centers bilinear interpolation at factor
/// one half reduces exactly to 2x2 averaging.
pub fn downsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "downsample2 needs even extents, got {}",
            x.shape()
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let planes = x
        .data()
        .chunks(h * w)
        .zip(out.data_mut().chunks_mut(oh * ow));
    for (src, dst) in planes {
        for y in 0..oh {
            for xx in 0..ow {
                let a = src[2 * y * w + 2 * xx];
                let b = src[2 * y * w + 2 * xx + 1];
                let c2 = src[(2 * y + 1) * w + 2 * xx];
                let d = src[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b + c2 + d) * q;
            }
        }
    }
    Ok(out)
}

pub fn downsample2_backward<T: Real>(x_shape: Shape, g: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, w] = x_shape.0;
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = Tensor::zeros(x_shape);
    let planes = g
        .data()
        .chunks(oh * ow)
        .zip(out.data_mut().chunks_mut(h * w));
    for (src, dst) in planes {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * q;
            }
        }
    }
    out
}

/// Bilinear taps of one sampling position: `(flat index or None, weight)`.
#[derive(Clone, Copy)]
struct Taps<T> {
    idx: [Option<usize>; 4],
    fx: T,
    fy: T,
}

impl<T: Real> Taps<T> {
    fn new(gx: T, gy: T, h: usize, w: usize) -> Self {
        let x0f = gx.floor();
        let y0f = gy.floor();
        // Far out-of-range coordinates (or NaN) produce no taps at all.
        match (x0f.to_i64(), y0f.to_i64()) {
            (Some(x0), Some(y0)) => {
                let at = |x: i64, y: i64| {
                    (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h)
                        .then(|| y as usize * w + x as usize)
                };
                Taps {
                    idx: [
                        at(x0, y0),
                        at(x0 + 1, y0),
                        at(x0, y0 + 1),
                        at(x0 + 1, y0 + 1),
                    ],
                    fx: gx - x0f,
                    fy: gy - y0f,
                }
            }
            _ => Taps {
                idx: [None; 4],
                fx: T::zero(),
                fy: T::zero(),
            },
        }
    }

    fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    fn values(&self, plane: &[T]) -> [T; 4] {
        self.idx.map(|i| i.map_or(T::zero(), |i| plane[i]))
    }
}

fn check_grid(x: Shape, grid: Shape) -> Result<()> {
    if grid.c() != 2 || grid.n() != x.n() {
        return Err(Error::shape(format!(
            "grid_sample: grid {grid} must be (n,2,h,w) for input {x}"
        )));
    }
    Ok(())
}

/// Samples `x` at absolute pixel coordinates `grid[:, 0]` (x) and
/// `grid[:, 1]` (y). Taps outside the image read as zero.
pub fn grid_sample<T: Real>(x: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    check_grid(x.shape(), grid.shape())?;
    let [n, c, h, w] = x.shape().0;
    let [_, _, oh, ow] = grid.shape().0;
    let p = oh * ow;
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for i in 0..n {
        let gx = grid.plane(i, 0);
        let gy = grid.plane(i, 1);
        let taps: Vec<Taps<T>> = (0..p).map(|j| Taps::new(gx[j], gy[j], h, w)).collect();
        for ch in 0..c {
            let src = x.plane(i, ch);
            let base = (i * c + ch) * p;
            let dst = &mut out.data_mut()[base..base + p];
            for (d, t) in dst.iter_mut().zip(&taps) {
                let v = t.values(src);
                let wt = t.weights();
                *d = wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3];
            }
        }
    }
    Ok(out)
}

pub fn grid_sample_backward<T: Real>(
    x: &Tensor<T>,
    grid: &Tensor<T>,
    g: &Tensor<T>,
    needs: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let [n, c, h, w] = x.shape().0;
    let [_, _, oh, ow] = grid.shape().0;
    let p = oh * ow;
    let mut gx_in = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut g_grid = needs[1].then(|| Tensor::zeros(grid.shape()));
    let one = T::one();
    for i in 0..n {
        let gxs = grid.plane(i, 0);
        let gys = grid.plane(i, 1);
        let taps: Vec<Taps<T>> = (0..p).map(|j| Taps::new(gxs[j], gys[j], h, w)).collect();
        for ch in 0..c {
            let src = x.plane(i, ch);
            let gout = g.plane(i, ch);
            if let Some(gx_in) = gx_in.as_mut() {
                let dst = &mut gx_in.data_mut()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                for (t, &gv) in taps.iter().zip(gout) {
                    let wt = t.weights();
                    for (idx, wk) in t.idx.iter().zip(wt) {
                        if let Some(idx) = *idx {
                            dst[idx] += wk * gv;
                        }
                    }
                }
            }
            if let Some(g_grid) = g_grid.as_mut() {
                let d = g_grid.data_mut();
                for (j, (t, &gv)) in taps.iter().zip(gout).enumerate() {
                    let [v00, v10, v01, v11] = t.values(src);
                    let dx = (v10 - v00) * (one - t.fy) + (v11 - v01) * t.fy;
                    let dy = (v01 - v00) * (one - t.fx) + (v11 - v10) * t.fx;
                    d[(i * 2) * p + j] += gv * dx;
                    d[(i * 2 + 1) * p + j] += gv * dy;
                }
            }
        }
    }
    [gx_in, g_grid]
}

/// Axis along which a correlation volume shifts its second operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorrAxis {
    Horizontal,
    Vertical,
}

/// `out[d](y, x) = mean_c a(c, y, x) * b(c, y, x - d)` (horizontal) for
/// `d` in `min_disp..=max_disp`; vertical shifts `y` instead. Samples
/// falling outside `b` contribute zero.
pub fn correlation<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    axis: CorrAxis,
    min_disp: i32,
    max_disp: i32,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() || max_disp < min_disp {
        return Err(Error::shape(format!(
            "correlation: {} vs {}, range {min_disp}..={max_disp}",
            a.shape(),
            b.shape()
        )));
    }
    let [n, c, h, w] = a.shape().0;
    let nd = (max_disp - min_disp + 1) as usize;
    let inv_c = T::of(1.0 / c as f64);
    let mut out = Tensor::zeros(Shape::new(n, nd, h, w));
    for i in 0..n {
        for (k, d) in (min_disp..=max_disp).enumerate() {
            let base = (i * nd + k) * h * w;
            for ch in 0..c {
                let pa = a.plane(i, ch);
                let pb = b.plane(i, ch);
                let dst = &mut out.data_mut()[base..base + h * w];
                for_each_shift(h, w, axis, d, |p, q| dst[p] += pa[p] * pb[q]);
            }
            for v in &mut out.data_mut()[base..base + h * w] {
                *v *= inv_c;
            }
        }
    }
    Ok(out)
}

/// Calls `f(p, q)` for every pixel `p` whose shifted partner `q` is in range.
fn for_each_shift(h: usize, w: usize, axis: CorrAxis, d: i32, mut f: impl FnMut(usize, usize)) {
    let d = d as isize;
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match axis {
                CorrAxis::Horizontal => (y as isize, x as isize - d),
                CorrAxis::Vertical => (y as isize - d, x as isize),
            };
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                f(y * w + x, sy as usize * w + sx as usize);
            }
        }
    }
}

pub fn correlation_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    axis: CorrAxis,
    min_disp: i32,
    max_disp: i32,
    needs: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let [n, c, h, w] = a.shape().0;
    let inv_c = T::of(1.0 / c as f64);
    let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
    let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
    let plane = h * w;
    for i in 0..n {
        for (k, d) in (min_disp..=max_disp).enumerate() {
            let gp = g.plane(i, k);
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let pa = a.plane(i, ch);
                let pb = b.plane(i, ch);
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga.data_mut()[off..off + plane];
                    for_each_shift(h, w, axis, d, |p, q| dst[p] += gp[p] * pb[q] * inv_c);
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb.data_mut()[off..off + plane];
                    for_each_shift(h, w, axis, d, |p, q| dst[q] += gp[p] * pa[p] * inv_c);
                }
            }
        }
    }
    [ga, gb]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_grid_reproduces_input() {
        let x = Tensor::<f32>::from_fn(Shape::new(2, 3, 5, 7), |n, c, y, xx| {
            (n as f32 + 1.3) * (c as f32 - 0.7) * (y as f32 * 0.37 + xx as f32 * 1.1).sin()
        });
        let grid = Tensor::from_fn(Shape::new(2, 2, 5, 7), |_, c, y, xx| {
            if c == 0 {
                xx as f32
            } else {
                y as f32
            }
        });
        let out = grid_sample(&x, &grid).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn far_out_of_range_samples_are_zero() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 2.0);
        let grid = Tensor::from_fn(
            Shape::new(1, 2, 3, 3),
            |_, c, _, _| {
                if c == 0 {
                    1e30
                } else {
                    f64::NAN
                }
            },
        );
        let out = grid_sample(&x, &grid).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_pixel_sample_averages_neighbours() {
        let x = Tensor::<f64>::new(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let grid = Tensor::new(Shape::new(1, 2, 1, 1), vec![0.5, 0.0]).unwrap();
        assert_eq!(grid_sample(&x, &grid).unwrap().item(), 2.0);
    }

    #[test]
    fn upsample_of_constant_is_constant_and_down_inverts() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 4), 1.5);
        let up = upsample2(&x);
        assert_eq!(up.shape(), Shape::new(1, 2, 6, 8));
        assert!(up.data().iter().all(|&v| v == 1.5));
        assert_eq!(downsample2(&up).unwrap(), x);
    }

    #[test]
    fn correlation_channel_zero_is_mean_self_product() {
        let a = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 3), |_, c, y, x| {
            (c * 6 + y * 3 + x) as f64 * 0.1
        });
        let v = correlation(&a, &a, CorrAxis::Horizontal, 0, 2).unwrap();
        assert_eq!(v.shape(), Shape::new(1, 3, 2, 3));
        for y in 0..2 {
            for x in 0..3 {
                let want = (a.at(0, 0, y, x).powi(2) + a.at(0, 1, y, x).powi(2)) / 2.0;
                assert!((v.at(0, 0, y, x) - want).abs() < 1e-15);
            }
        }
        // x - 2 < 0 for x < 2: out of range reads zero.
        assert_eq!(v.at(0, 2, 0, 1), 0.0);
    }
}
