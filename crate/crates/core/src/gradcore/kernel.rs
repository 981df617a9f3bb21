use std::fmt;
use std::str::FromStr;

use super::conv;
use super::elementwise::{self as ew, Axes, Binary, Unary};
use super::resample::{self, CorrAxis};
use super::similarity;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// The closed catalog of differentiable primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// Inputs: x, weight `(co, ci, k, k)`, bias `(1, co, 1, 1)`.
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// Inputs: x, weight `(ci, co, k, k)`, bias `(1, co, 1, 1)`. Stride 2 only.
    ConvTranspose2d {
        stride: usize,
        padding: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Tanh,
    Softplus,
    Clamp {
        lo: f64,
        hi: f64,
    },
    Ln,
    Exp,
    Add,
    Sub,
    Mul,
    Div,
    /// `scale * x + offset`.
    Affine {
        scale: f64,
        offset: f64,
    },
    Abs,
    Square,
    Sum {
        axes: Axes,
    },
    Mean {
        axes: Axes,
    },
    Concat {
        axis: usize,
    },
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    Upsample2,
    Downsample2,
    /// Inputs: image, absolute pixel-coordinate grid `(n, 2, h, w)`.
    GridSample,
    Correlation {
        axis: CorrAxis,
        min_disp: i32,
        max_disp: i32,
    },
    SmoothL1 {
        beta: f64,
    },
    Ssim,
    Cosine,
    InstanceNorm {
        eps: f64,
    },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Conv2d { .. } => "conv2d",
            Kernel::ConvTranspose2d { .. } => "conv_transpose2d",
            Kernel::LeakyRelu { .. } => "leaky_relu",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Tanh => "tanh",
            Kernel::Softplus => "softplus",
            Kernel::Clamp { .. } => "clamp",
            Kernel::Ln => "ln",
            Kernel::Exp => "exp",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Mul => "mul",
            Kernel::Div => "div",
            Kernel::Affine { .. } => "affine",
            Kernel::Abs => "abs",
            Kernel::Square => "square",
            Kernel::Sum { .. } => "sum",
            Kernel::Mean { .. } => "mean",
            Kernel::Concat { .. } => "concat",
            Kernel::Narrow { .. } => "narrow",
            Kernel::Upsample2 => "upsample2",
            Kernel::Downsample2 => "downsample2",
            Kernel::GridSample => "grid_sample",
            Kernel::Correlation { .. } => "correlation",
            Kernel::SmoothL1 { .. } => "smooth_l1",
            Kernel::Ssim => "ssim",
            Kernel::Cosine => "cosine",
            Kernel::InstanceNorm { .. } => "instance_norm",
        }
    }

    /// Every kernel with representative default parameters.
    pub fn catalog() -> Vec<Kernel> {
        use std::str::FromStr as _;
        NAMES
            .iter()
            .map(|n| Kernel::from_str(n).expect("known name"))
            .collect()
    }

    /// Number of inputs; `None` for variadic kernels.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Kernel::Conv2d { .. } | Kernel::ConvTranspose2d { .. } => Some(3),
            Kernel::Add
            | Kernel::Sub
            | Kernel::Mul
            | Kernel::Div
            | Kernel::GridSample
            | Kernel::Correlation { .. }
            | Kernel::SmoothL1 { .. }
            | Kernel::Ssim
            | Kernel::Cosine => Some(2),
            Kernel::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Whether the kernel is smooth everywhere (tighter gradient tolerance).
    pub fn is_smooth(&self) -> bool {
        !matches!(
            self,
            Kernel::LeakyRelu { .. }
                | Kernel::Clamp { .. }
                | Kernel::Abs
                | Kernel::GridSample
                | Kernel::SmoothL1 { .. }
        )
    }

    fn unary(&self) -> Option<Unary> {
        Some(match *self {
            Kernel::LeakyRelu { slope } => Unary::LeakyRelu(slope),
            Kernel::Sigmoid => Unary::Sigmoid,
            Kernel::Tanh => Unary::Tanh,
            Kernel::Softplus => Unary::Softplus,
            Kernel::Clamp { lo, hi } => Unary::Clamp(lo, hi),
            Kernel::Ln => Unary::Ln,
            Kernel::Exp => Unary::Exp,
            Kernel::Affine { scale, offset } => Unary::Affine(scale, offset),
            Kernel::Abs => Unary::Abs,
            Kernel::Square => Unary::Square,
            _ => return None,
        })
    }

    fn binary(&self) -> Option<Binary> {
        Some(match self {
            Kernel::Add => Binary::Add,
            Kernel::Sub => Binary::Sub,
            Kernel::Mul => Binary::Mul,
            Kernel::Div => Binary::Div,
            _ => return None,
        })
    }

    pub(crate) fn forward<T: Real>(&self, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
        match self.arity() {
            Some(n) if n != x.len() => {
                return Err(Error::usage(format!(
                    "{} takes {n} inputs, got {}",
                    self.name(),
                    x.len()
                )))
            }
            None if x.is_empty() => {
                return Err(Error::usage(format!("{} needs inputs", self.name())))
            }
            _ => {}
        }
        if let Some(u) = self.unary() {
            return Ok(u.forward(x[0]));
        }
        if let Some(b) = self.binary() {
            return b.forward(x[0], x[1]);
        }
        match *self {
            Kernel::Conv2d { stride, padding } => conv::conv2d(x[0], x[1], x[2], stride, padding),
            Kernel::ConvTranspose2d { stride, padding } => {
                conv::conv_transpose2d(x[0], x[1], x[2], stride, padding)
            }
            Kernel::Sum { axes } => Ok(ew::reduce_sum(x[0], axes)),
            Kernel::Mean { axes } => {
                let count = ew::reduce_count(x[0].shape(), axes);
                let inv = T::of(1.0 / count as f64);
                Ok(ew::reduce_sum(x[0], axes).map(|v| v * inv))
            }
            Kernel::Concat { axis } => ew::concat(x, axis),
            Kernel::Narrow { axis, start, len } => ew::narrow(x[0], axis, start, len),
            Kernel::Upsample2 => Ok(resample::upsample2(x[0])),
            Kernel::Downsample2 => resample::downsample2(x[0]),
            Kernel::GridSample => resample::grid_sample(x[0], x[1]),
            Kernel::Correlation {
                axis,
                min_disp,
                max_disp,
            } => resample::correlation(x[0], x[1], axis, min_disp, max_disp),
            Kernel::SmoothL1 { beta } => ew::smooth_l1(x[0], x[1], beta),
            Kernel::Ssim => similarity::ssim_map(x[0], x[1]),
            Kernel::Cosine => similarity::cosine_map(x[0], x[1]),
            Kernel::InstanceNorm { eps } => Ok(ew::instance_norm(x[0], eps)),
            _ => unreachable!("pointwise kernels handled above"),
        }
    }

    /// Input gradients given the forward inputs, output and output gradient.
    /// Entries are `None` where `needs` is false.
    pub(crate) fn backward<T: Real>(
        &self,
        x: &[&Tensor<T>],
        out: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        if let Some(u) = self.unary() {
            return vec![needs[0].then(|| u.backward(x[0], out, g))];
        }
        if let Some(b) = self.binary() {
            return b.backward(x[0], x[1], g, [needs[0], needs[1]]).into();
        }
        match *self {
            Kernel::Conv2d { stride, padding } => conv::conv2d_backward(
                x[0],
                x[1],
                g,
                stride,
                padding,
                [needs[0], needs[1], needs[2]],
            )
            .into(),
            Kernel::ConvTranspose2d { stride, padding } => conv::conv_transpose2d_backward(
                x[0],
                x[1],
                g,
                stride,
                padding,
                [needs[0], needs[1], needs[2]],
            )
            .into(),
            Kernel::Sum { .. } => vec![Some(ew::reduce_backward(x[0].shape(), g, T::one()))],
            Kernel::Mean { axes } => {
                let count = ew::reduce_count(x[0].shape(), axes);
                let inv = T::of(1.0 / count as f64);
                vec![Some(ew::reduce_backward(x[0].shape(), g, inv))]
            }
            Kernel::Concat { axis } => {
                let shapes: Vec<_> = x.iter().map(|t| t.shape()).collect();
                ew::concat_backward(&shapes, g, axis)
                    .into_iter()
                    .zip(needs)
                    .map(|(t, &n)| n.then_some(t))
                    .collect()
            }
            Kernel::Narrow { axis, start, .. } => {
                vec![Some(ew::narrow_backward(x[0].shape(), g, axis, start))]
            }
            Kernel::Upsample2 => vec![Some(resample::upsample2_backward(x[0].shape(), g))],
            Kernel::Downsample2 => vec![Some(resample::downsample2_backward(x[0].shape(), g))],
            Kernel::GridSample => {
                resample::grid_sample_backward(x[0], x[1], g, [needs[0], needs[1]]).into()
            }
            Kernel::Correlation {
                axis,
                min_disp,
                max_disp,
            } => resample::correlation_backward(
                x[0],
                x[1],
                g,
                axis,
                min_disp,
                max_disp,
                [needs[0], needs[1]],
            )
            .into(),
            Kernel::SmoothL1 { beta } => {
                let ga = ew::smooth_l1_backward(x[0], x[1], g, beta);
                let gb = needs[1].then(|| ga.map(|v| -v));
                vec![needs[0].then_some(ga), gb]
            }
            Kernel::Ssim => {
                similarity::ssim_map_backward(x[0], x[1], g, [needs[0], needs[1]]).into()
            }
            Kernel::Cosine => {
                similarity::cosine_map_backward(x[0], x[1], g, [needs[0], needs[1]]).into()
            }
            Kernel::InstanceNorm { eps } => {
                vec![Some(ew::instance_norm_backward(x[0], out, g, eps))]
            }
            _ => unreachable!("pointwise kernels handled above"),
        }
    }
}

const NAMES: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "softplus",
    "clamp",
    "ln",
    "exp",
    "add",
    "sub",
    "mul",
    "div",
    "affine",
    "abs",
    "square",
    "sum",
    "mean",
    "concat",
    "narrow",
    "upsample2",
    "downsample2",
    "grid_sample",
    "correlation",
    "smooth_l1",
    "ssim",
    "cosine",
    "instance_norm",
];

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    /// Parses a kernel name into the kernel with its default parameters.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv2d" => Kernel::Conv2d {
                stride: 1,
                padding: 1,
            },
            "conv_transpose2d" => Kernel::ConvTranspose2d {
                stride: 2,
                padding: 1,
            },
            "leaky_relu" => Kernel::LeakyRelu { slope: 0.2 },
            "sigmoid" => Kernel::Sigmoid,
            "tanh" => Kernel::Tanh,
            "softplus" => Kernel::Softplus,
            "clamp" => Kernel::Clamp { lo: -1.0, hi: 1.0 },
            "ln" => Kernel::Ln,
            "exp" => Kernel::Exp,
            "add" => Kernel::Add,
            "sub" => Kernel::Sub,
            "mul" => Kernel::Mul,
            "div" => Kernel::Div,
            "affine" => Kernel::Affine {
                scale: 1.0,
                offset: 0.0,
            },
            "abs" => Kernel::Abs,
            "square" => Kernel::Square,
            "sum" => Kernel::Sum { axes: Axes::ALL },
            "mean" => Kernel::Mean { axes: Axes::ALL },
            "concat" => Kernel::Concat { axis: 1 },
            "narrow" => Kernel::Narrow {
                axis: 1,
                start: 0,
                len: 1,
            },
            "upsample2" => Kernel::Upsample2,
            "downsample2" => Kernel::Downsample2,
            "grid_sample" => Kernel::GridSample,
            "correlation" => Kernel::Correlation {
                axis: CorrAxis::Horizontal,
                min_disp: 0,
                max_disp: 2,
            },
            "smooth_l1" => Kernel::SmoothL1 { beta: 1.0 },
            "ssim" => Kernel::Ssim,
            "cosine" => Kernel::Cosine,
            "instance_norm" => Kernel::InstanceNorm { eps: 1e-5 },
            other => return Err(Error::usage(format!("unknown kernel `{other}`"))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in Kernel::catalog() {
            assert_eq!(k.name().parse::<Kernel>().unwrap().name(), k.name());
        }
        assert_eq!(Kernel::catalog().len(), NAMES.len());
    }

    #[test]
    fn unknown_kernel_is_usage_error() {
        assert!(matches!("fft".parse::<Kernel>(), Err(Error::Usage(_))));
    }
}
