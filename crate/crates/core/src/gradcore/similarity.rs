//! Windowed SSIM and channelwise cosine similarity maps.

use super::elementwise::same_shape;
use super::tensor::{Real, Shape, Tensor};
use crate::error::Result;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Images live in [0, 1].
pub const SSIM_RANGE: f64 = 1.0;
pub const SSIM_C1: f64 = (0.01 * SSIM_RANGE) * (0.01 * SSIM_RANGE);
pub const SSIM_C2: f64 = (0.03 * SSIM_RANGE) * (0.03 * SSIM_RANGE);

/// Unnormalized 1-D Gaussian taps, indexed by offset + radius.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    g
}

/// Separable Gaussian window truncated at the image border. Each output
/// position is normalized by the weight mass that falls inside the image,
/// so the filter is a proper weighted mean everywhere.
struct Window<T> {
    taps: [T; SSIM_WINDOW],
    inv_mass_x: Vec<T>,
    inv_mass_y: Vec<T>,
}

impl<T: Real> Window<T> {
    fn new(h: usize, w: usize) -> Self {
        let g = gaussian_taps();
        let mass = |len: usize| -> Vec<T> {
            (0..len)
                .map(|p| {
                    let m: f64 = Self::range(p, len).map(|(_, k)| g[k]).sum();
                    T::of(1.0 / m)
                })
                .collect()
        };
        Window {
            taps: g.map(T::of),
            inv_mass_x: mass(w),
            inv_mass_y: mass(h),
        }
    }

    /// In-range neighbours `(q, tap index)` of position `p`.
    fn range(p: usize, len: usize) -> impl Iterator<Item = (usize, usize)> {
        let r = SSIM_WINDOW / 2;
        let lo = p.saturating_sub(r);
        let hi = (p + r).min(len - 1);
        (lo..=hi).map(move |q| (q, q + r - p))
    }

    /// Weighted local mean of `src` at every pixel.
    fn mean(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let mut tmp = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (q, k) in Self::range(x, w) {
                    acc += self.taps[k] * src[y * w + q];
                }
                tmp[y * w + x] = acc * self.inv_mass_x[x];
            }
        }
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (q, k) in Self::range(y, h) {
                    acc += self.taps[k] * tmp[q * w + x];
                }
                out[y * w + x] = acc * self.inv_mass_y[y];
            }
        }
        out
    }

    /// Adjoint of [`Window::mean`].
    fn mean_adjoint(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let mut tmp = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x] * self.inv_mass_y[y];
                for (q, k) in Self::range(y, h) {
                    tmp[q * w + x] += self.taps[k] * v;
                }
            }
        }
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x] * self.inv_mass_x[x];
                for (q, k) in Self::range(x, w) {
                    out[y * w + q] += self.taps[k] * v;
                }
            }
        }
        out
    }
}

struct Moments<T> {
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn moments<T: Real>(win: &Window<T>, a: &[T], b: &[T], h: usize, w: usize) -> Moments<T> {
    let sq = |p: &[T], q: &[T]| p.iter().zip(q).map(|(&u, &v)| u * v).collect::<Vec<T>>();
    Moments {
        mx: win.mean(a, h, w),
        my: win.mean(b, h, w),
        exx: win.mean(&sq(a, a), h, w),
        eyy: win.mean(&sq(b, b), h, w),
        exy: win.mean(&sq(a, b), h, w),
    }
}

/// Per-pixel SSIM terms: (numerator factors, denominator factors).
fn terms<T: Real>(m: &Moments<T>, i: usize) -> (T, T, T, T) {
    let (c1, c2) = (T::of(SSIM_C1), T::of(SSIM_C2));
    let two = T::of(2.0);
    let (mx, my) = (m.mx[i], m.my[i]);
    let sxx = m.exx[i] - mx * mx;
    let syy = m.eyy[i] - my * my;
    let sxy = m.exy[i] - mx * my;
    let a1 = two * (mx * my) + c1;
    let a2 = two * sxy + c2;
    let b1 = mx * mx + my * my + c1;
    let b2 = sxx + syy + c2;
    (a1, a2, b1, b2)
}

/// SSIM map, same shape as the inputs, computed per channel. Values are
/// clamped to [-1, 1] to absorb rounding in the variance estimates.
pub fn ssim_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "ssim")?;
    let [_, _, h, w] = a.shape().0;
    let win = Window::new(h, w);
    let p = h * w;
    let mut out = Tensor::zeros(a.shape());
    let planes = a
        .data()
        .chunks(p)
        .zip(b.data().chunks(p))
        .zip(out.data_mut().chunks_mut(p));
    for ((pa, pb), dst) in planes {
        let m = moments(&win, pa, pb, h, w);
        for (i, d) in dst.iter_mut().enumerate() {
            let (a1, a2, b1, b2) = terms(&m, i);
            let s = (a1 * a2) / (b1 * b2);
            *d = s.max(-T::one()).min(T::one());
        }
    }
    Ok(out)
}

pub fn ssim_map_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let [_, _, h, w] = a.shape().0;
    let win = Window::new(h, w);
    let p = h * w;
    let two = T::of(2.0);
    let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
    let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
    for (plane, (pa, pb)) in a.data().chunks(p).zip(b.data().chunks(p)).enumerate() {
        let gp = &g.data()[plane * p..(plane + 1) * p];
        let m = moments(&win, pa, pb, h, w);
        // Coefficients of dS/d(mx, my, exx, eyy, exy) scaled by upstream grad.
        let mut d_mx = vec![T::zero(); p];
        let mut d_my = vec![T::zero(); p];
        let mut d_exx = vec![T::zero(); p];
        let mut d_eyy = vec![T::zero(); p];
        let mut d_exy = vec![T::zero(); p];
        for i in 0..p {
            let (a1, a2, b1, b2) = terms(&m, i);
            let den = b1 * b2;
            let s = (a1 * a2) / den;
            if s.abs() > T::one() {
                continue;
            }
            let (mx, my) = (m.mx[i], m.my[i]);
            let gv = gp[i];
            // a1 = 2 mx my + c1, a2 = 2 (exy - mx my) + c2,
            // b1 = mx^2 + my^2 + c1, b2 = exx - mx^2 + eyy - my^2 + c2.
            d_mx[i] = gv
                * ((two * my * a2 - two * my * a1) / den
                    - s * (two * mx * b2 - two * mx * b1) / den);
            d_my[i] = gv
                * ((two * mx * a2 - two * mx * a1) / den
                    - s * (two * my * b2 - two * my * b1) / den);
            d_exx[i] = -gv * s / b2;
            d_eyy[i] = -gv * s / b2;
            d_exy[i] = gv * two * a1 / den;
        }
        let off = plane * p;
        if let Some(ga) = ga.as_mut() {
            let t_m = win.mean_adjoint(&d_mx, h, w);
            let t_xx = win.mean_adjoint(&d_exx, h, w);
            let t_xy = win.mean_adjoint(&d_exy, h, w);
            let dst = &mut ga.data_mut()[off..off + p];
            for i in 0..p {
                dst[i] = t_m[i] + two * pa[i] * t_xx[i] + pb[i] * t_xy[i];
            }
        }
        if let Some(gb) = gb.as_mut() {
            let t_m = win.mean_adjoint(&d_my, h, w);
            let t_yy = win.mean_adjoint(&d_eyy, h, w);
            let t_xy = win.mean_adjoint(&d_exy, h, w);
            let dst = &mut gb.data_mut()[off..off + p];
            for i in 0..p {
                dst[i] = t_m[i] + two * pb[i] * t_yy[i] + pa[i] * t_xy[i];
            }
        }
    }
    [ga, gb]
}

pub const COSINE_EPS: f64 = 1e-8;

/// Per-pixel cosine similarity across channels: `(n, 1, h, w)`.
pub fn cosine_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "cosine")?;
    let [n, c, h, w] = a.shape().0;
    let p = h * w;
    let eps2 = T::of(COSINE_EPS * COSINE_EPS);
    let mut out = Tensor::zeros(Shape::new(n, 1, h, w));
    for i in 0..n {
        for j in 0..p {
            let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let k = (i * c + ch) * p + j;
                let (u, v) = (a.data()[k], b.data()[k]);
                ab += u * v;
                aa += u * u;
                bb += v * v;
            }
            out.data_mut()[i * p + j] = ab / (aa * bb).max(eps2).sqrt();
        }
    }
    Ok(out)
}

pub fn cosine_map_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let [n, c, h, w] = a.shape().0;
    let p = h * w;
    let eps2 = T::of(COSINE_EPS * COSINE_EPS);
    let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
    let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
    for i in 0..n {
        for j in 0..p {
            let (mut ab, mut aa, mut bb) = (T::zero(), T::zero(), T::zero());
            for ch in 0..c {
                let k = (i * c + ch) * p + j;
                let (u, v) = (a.data()[k], b.data()[k]);
                ab += u * v;
                aa += u * u;
                bb += v * v;
            }
            let gv = g.data()[i * p + j];
            let prod = aa * bb;
            let clamped = prod <= eps2;
            let den = prod.max(eps2).sqrt();
            let cos = ab / den;
            for ch in 0..c {
                let k = (i * c + ch) * p + j;
                let (u, v) = (a.data()[k], b.data()[k]);
                if let Some(ga) = ga.as_mut() {
                    let d = if clamped {
                        v / den
                    } else {
                        v / den - cos * u / aa
                    };
                    ga.data_mut()[k] += gv * d;
                }
                if let Some(gb) = gb.as_mut() {
                    let d = if clamped {
                        u / den
                    } else {
                        u / den - cos * v / bb
                    };
                    gb.data_mut()[k] += gv * d;
                }
            }
        }
    }
    [ga, gb]
}
