//! 2-D convolution and stride-2 transposed convolution via im2col + gemm.
//!
//! Weights follow the usual layouts: `(c_out, c_in, k, k)` for convolution,
//! `(c_in, c_out, k, k)` for transposed convolution. Biases are `(1, c, 1, 1)`.

use super::tensor::{Real, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    /// Extents of the "image" side of im2col.
    h: usize,
    w: usize,
    /// Extents of the "patch grid" side of im2col.
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patches(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (extent + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds `src` (c planes of h*w) into a `(c*k*k, oh*ow)` matrix.
fn im2col<T: Real>(src: &[T], c: usize, g: Geometry, col: &mut [T]) {
    let p = g.patches();
    for ch in 0..c {
        let plane = &src[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ch * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let line = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into image planes.
fn col2im<T: Real>(col: &[T], c: usize, g: Geometry, dst: &mut [T]) {
    let p = g.patches();
    for ch in 0..c {
        let plane = &mut dst[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ch * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias(b: Shape, c_out: usize) -> Result<()> {
    if b != Shape::new(1, c_out, 1, 1) {
        return Err(Error::shape(format!(
            "bias {b} does not match {c_out} output channels"
        )));
    }
    Ok(())
}

fn conv_geometry(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, c_in, h, wd] = x.0;
    let [_, wc_in, kh, kw] = w.0;
    if wc_in != c_in || kh != kw || kh == 0 || !(stride == 1 || stride == 2) {
        return Err(Error::shape(format!(
            "conv2d: input {x}, weight {w}, stride {stride}"
        )));
    }
    let (oh, ow) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::shape(format!("conv2d: input {x} too small for {w}"))),
    };
    Ok(Geometry {
        k: kh,
        stride,
        pad,
        h,
        w: wd,
        oh,
        ow,
    })
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad)?;
    let (n, c_in, c_out) = (x.shape().n(), x.shape().c(), w.shape().n());
    check_bias(b.shape(), c_out)?;
    let ckk = c_in * g.k * g.k;
    let p = g.patches();
    let mut out = Tensor::zeros(Shape::new(n, c_out, g.oh, g.ow));
    let mut col = vec![T::zero(); ckk * p];
    let in_len = c_in * g.h * g.w;
    for i in 0..n {
        im2col(&x.data()[i * in_len..(i + 1) * in_len], c_in, g, &mut col);
        let dst = &mut out.data_mut()[i * c_out * p..(i + 1) * c_out * p];
        for (oc, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[oc]);
        }
        T::gemm(
            c_out,
            ckk,
            p,
            T::one(),
            w.data(),
            (ckk as isize, 1),
            &col,
            (p as isize, 1),
            T::one(),
            dst,
            (p as isize, 1),
        );
    }
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    needs: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let g = conv_geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let (n, c_in, c_out) = (x.shape().n(), x.shape().c(), w.shape().n());
    let ckk = c_in * g.k * g.k;
    let p = g.patches();
    let in_len = c_in * g.h * g.w;
    let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); ckk * p];
    for i in 0..n {
        let go = &gout.data()[i * c_out * p..(i + 1) * c_out * p];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[i * in_len..(i + 1) * in_len], c_in, g, &mut col);
            // gw += go (c_out x p) * col^T (p x ckk)
            T::gemm(
                c_out,
                p,
                ckk,
                T::one(),
                go,
                (p as isize, 1),
                &col,
                (1, p as isize),
                T::one(),
                gw.data_mut(),
                (ckk as isize, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            // col = w^T (ckk x c_out) * go (c_out x p)
            T::gemm(
                ckk,
                c_out,
                p,
                T::one(),
                w.data(),
                (1, ckk as isize),
                go,
                (p as isize, 1),
                T::zero(),
                &mut col,
                (p as isize, 1),
            );
            col2im(
                &col,
                c_in,
                g,
                &mut gx.data_mut()[i * in_len..(i + 1) * in_len],
            );
        }
    }
    let gb = needs[2].then(|| bias_grad(gout));
    [gx, gw, gb]
}

fn bias_grad<T: Real>(gout: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = gout.shape().0;
    let mut gb = Tensor::zeros(Shape::new(1, c, 1, 1));
    for i in 0..n {
        for ch in 0..c {
            let s: T = gout.plane(i, ch).iter().copied().sum();
            gb.data_mut()[ch] += s;
        }
    }
    gb
}

/// Geometry of the equivalent forward convolution that maps the transposed
/// output back to its input.
fn transpose_geometry(x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Geometry> {
    let [_, c_in, h, wd] = x.0;
    let [wc_in, _, kh, kw] = w.0;
    if wc_in != c_in || kh != kw || stride != 2 {
        return Err(Error::shape(format!(
            "conv_transpose2d: input {x}, weight {w}, stride {stride}"
        )));
    }
    let oh = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0);
    let ow = ((wd - 1) * stride + kw)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Geometry {
            k: kh,
            stride,
            pad,
            h: oh,
            w: ow,
            oh: h,
            ow: wd,
        }),
        _ => Err(Error::shape(format!(
            "conv_transpose2d: padding {pad} too large for {w}"
        ))),
    }
}

pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = transpose_geometry(x.shape(), w.shape(), stride, pad)?;
    let (n, c_in, c_out) = (x.shape().n(), x.shape().c(), w.shape().c());
    check_bias(b.shape(), c_out)?;
    let ckk = c_out * g.k * g.k;
    let p = g.patches();
    let out_len = c_out * g.h * g.w;
    let mut out = Tensor::zeros(Shape::new(n, c_out, g.h, g.w));
    let mut col = vec![T::zero(); ckk * p];
    for i in 0..n {
        let xs = &x.data()[i * c_in * p..(i + 1) * c_in * p];
        // col = w^T (ckk x c_in) * x (c_in x p)
        T::gemm(
            ckk,
            c_in,
            p,
            T::one(),
            w.data(),
            (1, ckk as isize),
            xs,
            (p as isize, 1),
            T::zero(),
            &mut col,
            (p as isize, 1),
        );
        let dst = &mut out.data_mut()[i * out_len..(i + 1) * out_len];
        for (oc, plane) in dst.chunks_mut(g.h * g.w).enumerate() {
            plane.fill(b.data()[oc]);
        }
        col2im(&col, c_out, g, dst);
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    needs: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let g = transpose_geometry(x.shape(), w.shape(), stride, pad).expect("validated in forward");
    let (n, c_in, c_out) = (x.shape().n(), x.shape().c(), w.shape().c());
    let ckk = c_out * g.k * g.k;
    let p = g.patches();
    let out_len = c_out * g.h * g.w;
    let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); ckk * p];
    for i in 0..n {
        if gx.is_none() && gw.is_none() {
            break;
        }
        im2col(
            &gout.data()[i * out_len..(i + 1) * out_len],
            c_out,
            g,
            &mut col,
        );
        if let Some(gx) = gx.as_mut() {
            // gx = w (c_in x ckk) * col (ckk x p)
            T::gemm(
                c_in,
                ckk,
                p,
                T::one(),
                w.data(),
                (ckk as isize, 1),
                &col,
                (p as isize, 1),
                T::zero(),
                &mut gx.data_mut()[i * c_in * p..(i + 1) * c_in * p],
                (p as isize, 1),
            );
        }
        if let Some(gw) = gw.as_mut() {
            // gw += x (c_in x p) * col^T (p x ckk)
            T::gemm(
                c_in,
                p,
                ckk,
                T::one(),
                &x.data()[i * c_in * p..(i + 1) * c_in * p],
                (p as isize, 1),
                &col,
                (1, p as isize),
                T::one(),
                gw.data_mut(),
                (ckk as isize, 1),
            );
        }
    }
    let gb = needs[2].then(|| bias_grad(gout));
    [gx, gw, gb]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let [n, ci, h, wd] = x.shape().0;
        let [co, _, k, _] = w.shape().0;
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        Tensor::from_fn(Shape::new(n, co, oh, ow), |i, o, y, xx| {
            let mut acc = b.data()[o];
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * s + ky) as isize - p as isize;
                        let ix = (xx * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(o, c, ky, kx) * x.at(i, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: Shape, k: f64) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            ((i * k).sin() * 10.0).round() / 10.0
        })
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(s, p) in &[(1, 1), (2, 1), (1, 0)] {
            let x = ramp(Shape::new(2, 3, 6, 7), 0.37);
            let w = ramp(Shape::new(4, 3, 3, 3), 0.91);
            let b = ramp(Shape::new(1, 4, 1, 1), 1.3);
            let got = conv2d(&x, &w, &b, s, p).unwrap();
            let want = naive_conv(&x, &w, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_doubles_extent_and_is_adjoint() {
        // <conv_t(x), y> == <x, conv(y)> with shared weights and zero bias.
        let x = ramp(Shape::new(1, 3, 4, 5), 0.23);
        let w = ramp(Shape::new(3, 2, 4, 4), 0.71);
        let zero2 = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let zero3 = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let up = conv_transpose2d(&x, &w, &zero2, 2, 1).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 2, 8, 10));
        let y = ramp(up.shape(), 0.53);
        // Forward conv uses weight (c_out=3, c_in=2, k, k) with identical storage.
        let wf = w.clone().reshape(Shape::new(3, 2, 4, 4)).unwrap();
        let down = conv2d(&y, &wf, &zero3, 2, 1).unwrap();
        let lhs: f64 = up.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(down.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        assert!(conv2d(&x, &w, &b, 1, 1).is_err());
    }
}
