//! Dense rank-4 tensors with reverse-mode differentiation over a fixed
//! catalog of kernels. Every network, warp and loss in the crate is composed
//! from these kernels, so one gradient-check harness covers the whole system.

pub(crate) mod check;
mod conv;
mod elementwise;
mod graph;
mod kernel;
mod resample;
mod similarity;
mod tensor;

pub use check::{grad_check, grad_check_indices, grad_check_piecewise, kernel_suite, CheckOutcome};
pub use elementwise::Axes;
pub use graph::{Graph, Var};
pub use kernel::Kernel;
pub use resample::CorrAxis;
pub use similarity::{
    gaussian_taps, ssim_map, COSINE_EPS, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use tensor::{Real, Shape, Tensor};
