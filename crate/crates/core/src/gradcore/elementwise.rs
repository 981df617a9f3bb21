//! Pointwise maps, broadcasting binary arithmetic, reductions and layout
//! kernels (concat / narrow).

use super::tensor::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Unary pointwise kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softplus,
    Clamp(f64, f64),
    Ln,
    Exp,
    Affine(f64, f64),
    Abs,
    Square,
}

impl Unary {
    pub fn forward<T: Real>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Unary::LeakyRelu(slope) => {
                let s = T::of(slope);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Softplus => x.map(softplus),
            Unary::Clamp(lo, hi) => {
                let (lo, hi) = (T::of(lo), T::of(hi));
                x.map(|v| v.max(lo).min(hi))
            }
            Unary::Ln => x.map(|v| v.ln()),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Affine(a, b) => {
                let (a, b) = (T::of(a), T::of(b));
                x.map(|v| v * a + b)
            }
            Unary::Abs => x.map(|v| v.abs()),
            Unary::Square => x.map(|v| v * v),
        }
    }

    /// Derivative evaluated from the input `x` and output `y` of one element.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::LeakyRelu(slope) => {
                if x > T::zero() {
                    one
                } else {
                    T::of(slope)
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Tanh => one - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Clamp(lo, hi) => {
                if x >= T::of(lo) && x <= T::of(hi) {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Ln => one / x,
            Unary::Exp => y,
            Unary::Affine(a, _) => T::of(a),
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
        }
    }

    pub fn backward<T: Real>(self, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .zip(g.data())
            .map(|((&xv, &yv), &gv)| gv * self.derivative(xv, yv))
            .collect();
        Tensor::new(x.shape(), data).expect("same shape")
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

pub(crate) fn softplus<T: Real>(v: T) -> T {
    // log(1 + e^v) = max(v, 0) + log(1 + e^{-|v|})
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

/// Binary kernels with numpy-style broadcasting over unit extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for (o, (&x, &y)) in out.iter_mut().zip(a.0.iter().zip(&b.0)) {
        *o = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return Err(Error::shape(format!("cannot broadcast {a} with {b}")));
        };
    }
    Ok(Shape(out))
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if s.0[i] == out.0[i] { st[i] } else { 0 };
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let ba = i * sa[0] + j * sa[1] + y * sa[2];
                let bb = i * sb[0] + j * sb[1] + y * sb[2];
                for x in 0..w {
                    f(o, ba + x * sa[3], bb + x * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

impl Binary {
    fn eval<T: Real>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    pub fn forward<T: Real>(self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| self.eval(x, y))
                .collect();
            return Tensor::new(out_shape, data);
        }
        let mut out = Tensor::zeros(out_shape);
        let (ad, bd) = (a.data(), b.data());
        let od = out.data_mut();
        for_each_broadcast(a.shape(), b.shape(), out_shape, |o, i, j| {
            od[o] = self.eval(ad[i], bd[j]);
        });
        Ok(out)
    }

    pub fn backward<T: Real>(
        self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        g: &Tensor<T>,
        needs: [bool; 2],
    ) -> [Option<Tensor<T>>; 2] {
        let mut ga = needs[0].then(|| Tensor::zeros(a.shape()));
        let mut gb = needs[1].then(|| Tensor::zeros(b.shape()));
        let (ad, bd, gd) = (a.data(), b.data(), g.data());
        for_each_broadcast(a.shape(), b.shape(), g.shape(), |o, i, j| {
            let gv = gd[o];
            let (da, db) = match self {
                Binary::Add => (gv, gv),
                Binary::Sub => (gv, -gv),
                Binary::Mul => (gv * bd[j], gv * ad[i]),
                Binary::Div => {
                    let inv = T::one() / bd[j];
                    (gv * inv, -gv * ad[i] * inv * inv)
                }
            };
            if let Some(t) = ga.as_mut() {
                t.data_mut()[i] += da;
            }
            if let Some(t) = gb.as_mut() {
                t.data_mut()[j] += db;
            }
        });
        [ga, gb]
    }
}

/// Set of reduced axes, stored as a bitmask over (n, c, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Axes(pub u8);

impl Axes {
    pub const ALL: Axes = Axes(0b1111);
    pub const SPATIAL: Axes = Axes(0b1100);
    pub const CHANNEL: Axes = Axes(0b0010);

    pub fn of(axes: &[usize]) -> Self {
        Axes(axes.iter().fold(0, |m, &a| m | (1 << a)))
    }

    pub fn contains(&self, axis: usize) -> bool {
        self.0 & (1 << axis) != 0
    }

    pub fn reduced(&self, s: Shape) -> Shape {
        let mut out = s.0;
        for (i, e) in out.iter_mut().enumerate() {
            if self.contains(i) {
                *e = 1;
            }
        }
        Shape(out)
    }
}

pub fn reduce_sum<T: Real>(x: &Tensor<T>, axes: Axes) -> Tensor<T> {
    let out_shape = axes.reduced(x.shape());
    if out_shape == Shape::SCALAR {
        // Sequential left-to-right accumulation keeps results independent of
        // thread count and tensor layout.
        let mut acc = T::zero();
        for &v in x.data() {
            acc += v;
        }
        return Tensor::scalar(acc);
    }
    let mut out = Tensor::zeros(out_shape);
    let xd = x.data();
    let od = out.data_mut();
    for_each_broadcast(x.shape(), out_shape, x.shape(), |i, _, o| {
        od[o] += xd[i];
    });
    out
}

pub fn reduce_count(s: Shape, axes: Axes) -> usize {
    (0..4)
        .filter(|&i| axes.contains(i))
        .map(|i| s.0[i])
        .product()
}

/// Broadcasts the reduced gradient back to the input shape, scaled.
pub fn reduce_backward<T: Real>(x_shape: Shape, g: &Tensor<T>, scale: T) -> Tensor<T> {
    let mut out = Tensor::zeros(x_shape);
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(x_shape, g.shape(), x_shape, |i, _, o| {
        od[i] = gd[o] * scale;
    });
    out
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::usage("concat needs at least one input"))?
        .shape();
    let mut extent = 0;
    for p in parts {
        let s = p.shape();
        for i in 0..4 {
            if i != axis && s.0[i] != first.0[i] {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s} incompatible with {first}"
                )));
            }
        }
        extent += s.0[axis];
    }
    let out_shape = first.with_axis(axis, extent);
    // Elements are laid out as `outer` blocks of `inner` contiguous values.
    let outer: usize = first.0[..axis].iter().product();
    let mut data = Vec::with_capacity(out_shape.numel());
    for o in 0..outer {
        for p in parts {
            let inner: usize = p.shape().0[axis..].iter().product();
            data.extend_from_slice(&p.data()[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(out_shape, data)
}

pub fn concat_backward<T: Real>(shapes: &[Shape], g: &Tensor<T>, axis: usize) -> Vec<Tensor<T>> {
    let outer: usize = g.shape().0[..axis].iter().product();
    let mut outs: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.numel()))
        .collect();
    let gd = g.data();
    let mut pos = 0;
    for _ in 0..outer {
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let inner: usize = s.0[axis..].iter().product();
            out.extend_from_slice(&gd[pos..pos + inner]);
            pos += inner;
        }
    }
    shapes
        .iter()
        .zip(outs)
        .map(|(s, d)| Tensor::new(*s, d).expect("sizes match"))
        .collect()
}

pub fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.0[axis] || len == 0 {
        return Err(Error::shape(format!(
            "narrow {start}..{} on axis {axis} of {s}",
            start + len
        )));
    }
    let outer: usize = s.0[..axis].iter().product();
    let inner: usize = s.0[axis + 1..].iter().product();
    let block = s.0[axis] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * block + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(s.with_axis(axis, len), data)
}

pub fn narrow_backward<T: Real>(
    x_shape: Shape,
    g: &Tensor<T>,
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let len = g.shape().0[axis];
    let outer: usize = x_shape.0[..axis].iter().product();
    let inner: usize = x_shape.0[axis + 1..].iter().product();
    let block = x_shape.0[axis] * inner;
    let mut out = Tensor::zeros(x_shape);
    let od = out.data_mut();
    for o in 0..outer {
        let base = o * block + start * inner;
        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
        od[base..base + len * inner].copy_from_slice(src);
    }
    out
}

/// Elementwise smooth-L1 (Huber) distance with transition point `beta`.
pub fn smooth_l1<T: Real>(a: &Tensor<T>, b: &Tensor<T>, beta: f64) -> Result<Tensor<T>> {
    same_shape(a, b, "smooth-l1")?;
    let beta = T::of(beta);
    let half = T::of(0.5);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            if d < beta {
                half * d * d / beta
            } else {
                d - half * beta
            }
        })
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn smooth_l1_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    beta: f64,
) -> Tensor<T> {
    let beta = T::of(beta);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(g.data())
        .map(|((&x, &y), &gv)| {
            let d = x - y;
            let slope = if d.abs() < beta {
                d / beta
            } else if d > T::zero() {
                T::one()
            } else {
                -T::one()
            };
            gv * slope
        })
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Per-(sample, channel) standardization over the spatial plane.
pub fn instance_norm<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = Tensor::zeros(s);
    for (src, dst) in x.data().chunks(p).zip(out.data_mut().chunks_mut(p)) {
        let (mean, inv) = plane_stats(src, eps);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * inv;
        }
    }
    out
}

fn plane_stats<T: Real>(src: &[T], eps: f64) -> (T, T) {
    let n = T::of(src.len() as f64);
    let mean = src.iter().copied().sum::<T>() / n;
    let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of(eps)).sqrt())
}

pub fn instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let p = x.shape().plane();
    let n = T::of(p as f64);
    let mut out = Tensor::zeros(x.shape());
    let chunks = x
        .data()
        .chunks(p)
        .zip(y.data().chunks(p))
        .zip(g.data().chunks(p))
        .zip(out.data_mut().chunks_mut(p));
    for (((xs, ys), gs), dst) in chunks {
        let (_, inv) = plane_stats(xs, eps);
        let gmean = gs.iter().copied().sum::<T>() / n;
        let gymean = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &gv), &yv) in dst.iter_mut().zip(gs).zip(ys) {
            *d = inv * (gv - gmean - yv * gymean);
        }
    }
    out
}

pub(crate) fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: operands {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape(shape), v.to_vec()).unwrap()
    }

    #[test]
    fn smooth_l1_quadratic_and_linear_branches() {
        let a = t([1, 1, 1, 3], &[0.5, 3.0, -2.0]);
        let b = t([1, 1, 1, 3], &[0.0, 0.0, 0.0]);
        let y = smooth_l1(&a, &b, 1.0).unwrap();
        assert_eq!(y.data(), &[0.125, 2.5, 1.5]);
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let a = t([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = t([1, 1, 1, 2], &[10.0, 100.0]);
        let y = Binary::Mul.forward(&a, &m).unwrap();
        assert_eq!(y.data(), &[10.0, 200.0, 30.0, 400.0]);
        let g = Tensor::full(y.shape(), 1.0);
        let [ga, gm] = Binary::Mul.backward(&a, &m, &g, [true, true]);
        assert_eq!(ga.unwrap().data(), &[10.0, 100.0, 10.0, 100.0]);
        assert_eq!(gm.unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let a = t([1, 2, 1, 1], &[1.0, 2.0]);
        let b = t([1, 3, 1, 1], &[1.0, 2.0, 3.0]);
        assert!(Binary::Add.forward(&a, &b).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let a = t([2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t([2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), Shape([2, 3, 1, 2]));
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        assert_eq!(narrow(&c, 1, 1, 2).unwrap(), b);
        assert_eq!(narrow(&c, 1, 0, 1).unwrap(), a);
    }

    #[test]
    fn per_axis_sum() {
        let x = t([1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            reduce_sum(&x, Axes::CHANNEL).data(),
            &[6.0, 8.0, 10.0, 12.0]
        );
        assert_eq!(reduce_sum(&x, Axes::SPATIAL).data(), &[10.0, 26.0]);
        assert_eq!(reduce_sum(&x, Axes::ALL).item(), 36.0);
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]);
        let y = instance_norm(&x, 0.0);
        let m = y.mean_f64();
        let v = y.data().iter().map(|a| a * a).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }
}
