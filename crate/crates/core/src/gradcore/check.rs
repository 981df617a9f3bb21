//! Central-difference gradient checking in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::elementwise::Axes;
use super::graph::{Graph, Var};
use super::kernel::Kernel;
use super::resample::CorrAxis;
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-6;

/// Result of checking one differentiable construct.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

/// Max over elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`
/// for the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_indices(f, x, step, &all)
}

/// [`grad_check`] restricted to the listed flat element indices.
pub fn grad_check_indices<F>(f: F, x: &Tensor<f64>, step: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    check_elements(f, x, step, indices, None)
}

/// [`grad_check`] for functions with kinks. A kink between `x - step` and
/// `x + step` corrupts the central difference, so an element whose error
/// reaches a tenth of `threshold` is probed again at a tenth of the step; a
/// wrong analytic gradient fails at both.
pub fn grad_check_piecewise<F>(f: F, x: &Tensor<f64>, step: f64, threshold: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    check_elements(f, x, step, &all, Some(threshold))
}

fn check_elements<F>(
    f: F,
    x: &Tensor<f64>,
    step: f64,
    indices: &[usize],
    retry_above: Option<f64>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::usage("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut probe = x.clone();
    let mut central = |i: usize, h: f64| -> Result<f64> {
        let eval = |p: &Tensor<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let out = f(&mut g, v)?;
            Ok(g.item(out))
        };
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR);
    let mut worst = 0.0f64;
    for &i in indices {
        let a = analytic.data()[i];
        let mut err = rel(a, central(i, step)?);
        if retry_above.is_some_and(|t| err >= t / 10.0) {
            err = rel(a, central(i, step / 10.0)?);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Uniform values in `[lo, hi]` whose distance to every point of `avoid`
/// exceeds `margin`.
pub(crate) fn sample(
    rng: &mut Xoshiro256PlusPlus,
    shape: Shape,
    lo: f64,
    hi: f64,
    avoid: &[f64],
    margin: f64,
) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| loop {
        let v = rng.random_range(lo..hi);
        if avoid.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

/// Grid of absolute sample positions whose fractional parts stay away from
/// interpolation-cell boundaries; some positions fall outside the image.
pub(crate) fn sampling_grid(
    rng: &mut Xoshiro256PlusPlus,
    n: usize,
    h: usize,
    w: usize,
) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(n, 2, h, w), |_, c, _, _| {
        let extent = if c == 0 { w } else { h } as f64;
        let cell = rng.random_range(-2.0..extent + 1.0f64).floor();
        cell + rng.random_range(0.1..0.9)
    })
}

struct Case {
    name: String,
    kernel: Kernel,
    inputs: Vec<Tensor<f64>>,
    /// Which inputs are checked (others are held constant).
    check: Vec<usize>,
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let r = &mut rng;
    let s = Shape::new(2, 3, 6, 8);
    let u = |r: &mut Xoshiro256PlusPlus, sh: Shape| sample(r, sh, -2.0, 2.0, &[], 0.0);
    let kinked =
        |r: &mut Xoshiro256PlusPlus, sh: Shape, k: &[f64]| sample(r, sh, -2.0, 2.0, k, 0.05);
    let mut v = Vec::new();
    let mut push = |name: &str, kernel: Kernel, inputs: Vec<Tensor<f64>>, check: Vec<usize>| {
        v.push(Case {
            name: name.to_string(),
            kernel,
            inputs,
            check,
        })
    };
    for stride in [1, 2] {
        push(
            &format!("conv2d/stride{stride}"),
            Kernel::Conv2d { stride, padding: 1 },
            vec![
                u(r, s),
                u(r, Shape::new(4, 3, 3, 3)),
                u(r, Shape::new(1, 4, 1, 1)),
            ],
            vec![0, 1, 2],
        );
    }
    push(
        "conv_transpose2d",
        Kernel::ConvTranspose2d {
            stride: 2,
            padding: 1,
        },
        vec![
            u(r, Shape::new(2, 3, 3, 4)),
            u(r, Shape::new(3, 2, 4, 4)),
            u(r, Shape::new(1, 2, 1, 1)),
        ],
        vec![0, 1, 2],
    );
    push(
        "leaky_relu",
        Kernel::LeakyRelu { slope: 0.2 },
        vec![kinked(r, s, &[0.0])],
        vec![0],
    );
    push("sigmoid", Kernel::Sigmoid, vec![u(r, s)], vec![0]);
    push("tanh", Kernel::Tanh, vec![u(r, s)], vec![0]);
    push("softplus", Kernel::Softplus, vec![u(r, s)], vec![0]);
    push(
        "clamp",
        Kernel::Clamp { lo: -1.0, hi: 1.0 },
        vec![kinked(r, s, &[-1.0, 1.0])],
        vec![0],
    );
    push(
        "ln",
        Kernel::Ln,
        vec![sample(r, s, 0.2, 2.0, &[], 0.0)],
        vec![0],
    );
    push("exp", Kernel::Exp, vec![u(r, s)], vec![0]);
    for (name, k) in [
        ("add", Kernel::Add),
        ("sub", Kernel::Sub),
        ("mul", Kernel::Mul),
    ] {
        push(name, k, vec![u(r, s), u(r, s)], vec![0, 1]);
    }
    push(
        "mul/broadcast",
        Kernel::Mul,
        vec![u(r, s), u(r, Shape::new(2, 1, 6, 8))],
        vec![0, 1],
    );
    push(
        "div",
        Kernel::Div,
        vec![u(r, s), sample(r, s, -2.0, 2.0, &[0.0], 0.5)],
        vec![0, 1],
    );
    push(
        "affine",
        Kernel::Affine {
            scale: -1.7,
            offset: 0.3,
        },
        vec![u(r, s)],
        vec![0],
    );
    push("abs", Kernel::Abs, vec![kinked(r, s, &[0.0])], vec![0]);
    push("square", Kernel::Square, vec![u(r, s)], vec![0]);
    push(
        "sum",
        Kernel::Sum { axes: Axes::ALL },
        vec![u(r, s)],
        vec![0],
    );
    push(
        "mean",
        Kernel::Mean { axes: Axes::ALL },
        vec![u(r, s)],
        vec![0],
    );
    push(
        "mean/spatial",
        Kernel::Mean {
            axes: Axes::SPATIAL,
        },
        vec![u(r, s)],
        vec![0],
    );
    push(
        "sum/channel",
        Kernel::Sum {
            axes: Axes::CHANNEL,
        },
        vec![u(r, s)],
        vec![0],
    );
    push(
        "concat",
        Kernel::Concat { axis: 1 },
        vec![u(r, s), u(r, Shape::new(2, 2, 6, 8))],
        vec![0, 1],
    );
    push(
        "narrow",
        Kernel::Narrow {
            axis: 0,
            start: 1,
            len: 1,
        },
        vec![u(r, s)],
        vec![0],
    );
    push("upsample2", Kernel::Upsample2, vec![u(r, s)], vec![0]);
    push("downsample2", Kernel::Downsample2, vec![u(r, s)], vec![0]);
    let (gh, gw) = (5, 7);
    push(
        "grid_sample",
        Kernel::GridSample,
        vec![u(r, s), sampling_grid(r, 2, gh, gw)],
        vec![0, 1],
    );
    push(
        "correlation/horizontal",
        Kernel::Correlation {
            axis: CorrAxis::Horizontal,
            min_disp: 0,
            max_disp: 3,
        },
        vec![u(r, s), u(r, s)],
        vec![0, 1],
    );
    push(
        "correlation/vertical",
        Kernel::Correlation {
            axis: CorrAxis::Vertical,
            min_disp: -2,
            max_disp: 2,
        },
        vec![u(r, s), u(r, s)],
        vec![0, 1],
    );
    let a = u(r, s);
    let b = u(r, s);
    // Keep differences away from the smooth-L1 transition at |d| = 1.
    let b = Tensor::from_fn(s, |n, c, y, x| {
        let (av, bv) = (a.at(n, c, y, x), b.at(n, c, y, x));
        let d = av - bv;
        if (d.abs() - 1.0).abs() < 0.05 {
            bv + 0.2 * d.signum()
        } else {
            bv
        }
    });
    push(
        "smooth_l1",
        Kernel::SmoothL1 { beta: 1.0 },
        vec![a, b],
        vec![0, 1],
    );
    let img = Shape::new(1, 2, 12, 13);
    push(
        "ssim",
        Kernel::Ssim,
        vec![
            sample(r, img, 0.0, 1.0, &[], 0.0),
            sample(r, img, 0.0, 1.0, &[], 0.0),
        ],
        vec![0, 1],
    );
    // Channel norms away from zero, where central differences lose accuracy.
    let signed = |r: &mut Xoshiro256PlusPlus, sh: Shape| {
        let mag = sample(r, sh, 0.25, 2.0, &[], 0.0);
        Tensor::from_fn(sh, |n, c, y, x| {
            if r.random_bool(0.5) {
                mag.at(n, c, y, x)
            } else {
                -mag.at(n, c, y, x)
            }
        })
    };
    push(
        "cosine",
        Kernel::Cosine,
        vec![signed(r, s), signed(r, s)],
        vec![0, 1],
    );
    push(
        "instance_norm",
        Kernel::InstanceNorm { eps: 1e-5 },
        vec![u(r, s)],
        vec![0],
    );
    v
}

/// Checks every catalog kernel on random inputs drawn from `seed`.
///
/// Each kernel output is contracted with a fixed random tensor so that every
/// output element influences the scalar under test. Smooth kernels must
/// reach relative error `< 1e-4`, piecewise ones `< 1e-3`.
pub fn kernel_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut out = Vec::new();
    for case in cases(seed) {
        let smooth = case.kernel.is_smooth();
        let (threshold, step) = if smooth { (1e-4, 3e-5) } else { (1e-3, 1e-5) };
        let probe_shape = {
            let refs: Vec<&Tensor<f64>> = case.inputs.iter().collect();
            case.kernel.forward(&refs)?.shape()
        };
        let weights = sample(&mut rng, probe_shape, -1.0, 1.0, &[], 0.0);
        let mut worst = 0.0f64;
        for &which in &case.check {
            let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
                let vars: Vec<Var> = case
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { x } else { g.constant(t.clone()) })
                    .collect();
                let y = g.apply(case.kernel, &vars)?;
                let w = g.constant(weights.clone());
                let p = g.mul(y, w)?;
                g.sum(p)
            };
            worst = worst.max(grad_check(f, &case.inputs[which], step)?);
        }
        out.push(CheckOutcome {
            name: case.name,
            max_rel_error: worst,
            threshold,
        });
    }
    Ok(out)
}
