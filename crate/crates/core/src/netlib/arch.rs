//! Layer tables and forward passes.

use super::{Arch, ForwardResult, Layer};
use crate::error::Result;
use crate::gradcore::{Axes, CorrAxis, Graph, Real, Shape, Tensor, Var};
use crate::warp::{warp_by_disparity, warp_by_flow};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Log2 downsampling of the three generator taps.
pub const GENERATOR_TAP_SCALES: [u32; 3] = [1, 2, 2];
const LOGIT_EPS: f64 = 1e-3;
const FEAT_HALF: usize = 16;
const FEAT_QUARTER: usize = 32;
const NORM_EPS: f64 = 1e-5;
/// Sharpness of the correlation prior in the matching logits.
const CORR_TEMPERATURE: f64 = 8.0;

pub(super) fn layers(arch: Arch) -> Vec<(&'static str, Layer)> {
    use Layer::*;
    match arch {
        Arch::Generator { base: b } => vec![
            ("enc1", Conv { ci: 3, co: b, k: 3 }),
            (
                "enc2",
                Conv {
                    ci: b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "res1a",
                Conv {
                    ci: 2 * b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "res1b",
                Conv {
                    ci: 2 * b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "res2a",
                Conv {
                    ci: 2 * b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "res2b",
                Conv {
                    ci: 2 * b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "res3a",
                Conv {
                    ci: 2 * b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "res3b",
                Conv {
                    ci: 2 * b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "dec1",
                Deconv {
                    ci: 2 * b,
                    co: b,
                    k: 4,
                },
            ),
            ("dec2", ZeroDeconv { ci: b, co: 3, k: 4 }),
        ],
        Arch::IdentityGenerator => Vec::new(),
        Arch::Discriminator { base: b } => vec![
            ("conv1", Conv { ci: 3, co: b, k: 3 }),
            (
                "conv2",
                Conv {
                    ci: b,
                    co: 2 * b,
                    k: 3,
                },
            ),
            (
                "conv3",
                Conv {
                    ci: 2 * b,
                    co: 4 * b,
                    k: 3,
                },
            ),
            (
                "conv4",
                Conv {
                    ci: 4 * b,
                    co: 1,
                    k: 3,
                },
            ),
        ],
        Arch::Stereo { max_disp } => {
            let bins = max_disp / 4 + 1;
            let mut v = encoder_layers();
            v.extend([
                (
                    "cost1",
                    Conv {
                        ci: FEAT_QUARTER + bins,
                        co: 32,
                        k: 3,
                    },
                ),
                (
                    "cost2",
                    Conv {
                        ci: 32,
                        co: 32,
                        k: 3,
                    },
                ),
                (
                    "cost3",
                    Conv {
                        ci: 32,
                        co: bins,
                        k: 3,
                    },
                ),
                (
                    "refine_half1",
                    Conv {
                        ci: 2 * FEAT_HALF + 1,
                        co: 16,
                        k: 3,
                    },
                ),
                (
                    "refine_half2",
                    Conv {
                        ci: 16,
                        co: 1,
                        k: 3,
                    },
                ),
                (
                    "refine_full1",
                    Conv {
                        ci: 7,
                        co: 16,
                        k: 3,
                    },
                ),
                (
                    "refine_full2",
                    Conv {
                        ci: 16,
                        co: 1,
                        k: 3,
                    },
                ),
            ]);
            v
        }
        Arch::Flow { max_flow } => {
            let side = max_flow / 2 + 1;
            let bins = side * side;
            let mut v = encoder_layers();
            v.extend([
                (
                    "cost1",
                    Conv {
                        ci: FEAT_QUARTER + bins,
                        co: 32,
                        k: 3,
                    },
                ),
                (
                    "cost2",
                    Conv {
                        ci: 32,
                        co: 32,
                        k: 3,
                    },
                ),
                (
                    "cost3",
                    Conv {
                        ci: 32,
                        co: bins,
                        k: 3,
                    },
                ),
                (
                    "refine_half1",
                    Conv {
                        ci: 2 * FEAT_HALF + 2,
                        co: 16,
                        k: 3,
                    },
                ),
                (
                    "refine_half2",
                    Conv {
                        ci: 16,
                        co: 2,
                        k: 3,
                    },
                ),
                (
                    "refine_full1",
                    Conv {
                        ci: 8,
                        co: 16,
                        k: 3,
                    },
                ),
                (
                    "refine_full2",
                    Conv {
                        ci: 16,
                        co: 2,
                        k: 3,
                    },
                ),
            ]);
            v
        }
        Arch::Extractor => vec![
            ("conv1", Conv { ci: 3, co: 8, k: 3 }),
            (
                "conv2",
                Conv {
                    ci: 8,
                    co: 16,
                    k: 3,
                },
            ),
            (
                "conv3",
                Conv {
                    ci: 16,
                    co: 32,
                    k: 3,
                },
            ),
        ],
    }
}

fn encoder_layers() -> Vec<(&'static str, Layer)> {
    vec![
        (
            "feat_half",
            Layer::Conv {
                ci: 3,
                co: FEAT_HALF,
                k: 3,
            },
        ),
        (
            "feat_quarter",
            Layer::Conv {
                ci: FEAT_HALF,
                co: FEAT_QUARTER,
                k: 3,
            },
        ),
    ]
}

/// Sequential reader over bound (weight, bias) pairs.
struct Weights<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Weights<'a> {
    fn new(vars: &'a [Var]) -> Self {
        Weights { vars, pos: 0 }
    }

    fn next(&mut self) -> (Var, Var) {
        let out = (self.vars[self.pos], self.vars[self.pos + 1]);
        self.pos += 2;
        out
    }

    fn conv<T: Real>(&mut self, g: &mut Graph<T>, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = self.next();
        g.conv2d(x, w, b, stride, 1)
    }

    fn conv_act<T: Real>(&mut self, g: &mut Graph<T>, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(g, x, stride)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    fn deconv<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = self.next();
        g.conv_transpose2d(x, w, b, 1)
    }
}

pub(super) fn forward<T: Real>(
    arch: Arch,
    g: &mut Graph<T>,
    vars: &[Var],
    inputs: &[Var],
) -> Result<ForwardResult> {
    let mut p = Weights::new(vars);
    match arch {
        Arch::Generator { .. } => generator(g, &mut p, inputs[0]),
        Arch::IdentityGenerator => {
            let x = inputs[0];
            let half = g.downsample2(x)?;
            let quarter = g.downsample2(half)?;
            Ok(ForwardResult {
                output: x,
                taps: vec![half, quarter, quarter],
                stages: Vec::new(),
            })
        }
        Arch::Discriminator { .. } => {
            let mut h = inputs[0];
            for _ in 0..3 {
                h = p.conv_act(g, h, 2)?;
            }
            let logits = p.conv(g, h, 2)?;
            let output = g.sigmoid(logits)?;
            Ok(ForwardResult {
                output,
                taps: Vec::new(),
                stages: Vec::new(),
            })
        }
        Arch::Stereo { max_disp } => stereo(g, &mut p, inputs[0], inputs[1], max_disp / 4),
        Arch::Flow { max_flow } => flow(g, &mut p, inputs[0], inputs[1], max_flow / 4),
        Arch::Extractor => {
            let f1 = p.conv_act(g, inputs[0], 1)?;
            let f2 = p.conv_act(g, f1, 2)?;
            let f3 = p.conv_act(g, f2, 2)?;
            Ok(ForwardResult {
                output: f3,
                taps: vec![f1, f2, f3],
                stages: Vec::new(),
            })
        }
    }
}

fn generator<T: Real>(g: &mut Graph<T>, p: &mut Weights, x: Var) -> Result<ForwardResult> {
    let e1 = p.conv_act(g, x, 2)?;
    let e2 = p.conv_act(g, e1, 2)?;
    let mut h = e2;
    for _ in 0..3 {
        let r = p.conv_act(g, h, 1)?;
        let r = p.conv(g, r, 1)?;
        h = g.add(h, r)?;
    }
    let d1 = p.deconv(g, h)?;
    let d1 = g.leaky_relu(d1, LEAKY_SLOPE)?;
    let residual = p.deconv(g, d1)?;

    // out = clamp01(x + (tanh(a + residual) - tanh(a)) / 2), a = atanh(2x - 1):
    // the squashed logit-space update, written as an increment so that a
    // zero residual returns x exactly.
    let xc = g.clamp(x, LOGIT_EPS, 1.0 - LOGIT_EPS)?;
    let lp = g.ln(xc)?;
    let comp = g.affine(xc, -1.0, 1.0)?;
    let lq = g.ln(comp)?;
    let logit = g.sub(lp, lq)?;
    let half_logit = g.scale(logit, 0.5)?;
    let z = g.add(half_logit, residual)?;
    let t = g.tanh(z)?;
    let t0 = g.tanh(half_logit)?;
    let step = g.sub(t, t0)?;
    let step = g.scale(step, 0.5)?;
    let out = g.add(x, step)?;
    let output = g.clamp(out, 0.0, 1.0)?;
    Ok(ForwardResult {
        output,
        taps: vec![e1, e2, h],
        stages: Vec::new(),
    })
}

/// Softmax over the channel bins.
fn bin_probabilities<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let l = g.clamp(logits, -30.0, 30.0)?;
    let e = g.exp(l)?;
    let total = g.sum_axes(e, Axes::CHANNEL)?;
    g.div(e, total)
}

/// Expected bin value under `prob`, one channel.
fn expectation<T: Real>(g: &mut Graph<T>, prob: Var, values: &[f64]) -> Result<Var> {
    let centres = g.constant(Tensor::new(
        Shape::new(1, values.len(), 1, 1),
        values.iter().map(|&v| T::of(v)).collect(),
    )?);
    let weighted = g.mul(prob, centres)?;
    g.sum_axes(weighted, Axes::CHANNEL)
}

/// Matching logits: the scaled correlation plus a learned correction from
/// the volume and the reference features.
fn match_logits<T: Real>(g: &mut Graph<T>, p: &mut Weights, corr: Var, feat: Var) -> Result<Var> {
    let x = g.concat(&[corr, feat], 1)?;
    let h = p.conv_act(g, x, 1)?;
    let h = p.conv_act(g, h, 1)?;
    let correction = p.conv(g, h, 1)?;
    let prior = g.scale(corr, CORR_TEMPERATURE)?;
    g.add(prior, correction)
}

/// `x` moved up by `dy` rows (down when negative), zero filled.
fn shift_rows<T: Real>(g: &mut Graph<T>, x: Var, dy: i32) -> Result<Var> {
    if dy == 0 {
        return Ok(x);
    }
    let s = g.shape(x);
    let k = dy.unsigned_abs() as usize;
    let zeros = g.constant(Tensor::zeros(s.with_axis(2, k)));
    if dy > 0 {
        let body = g.narrow(x, 2, k, s.h() - k)?;
        g.concat(&[body, zeros], 2)
    } else {
        let body = g.narrow(x, 2, 0, s.h() - k)?;
        g.concat(&[zeros, body], 2)
    }
}

struct Pyramid {
    half: [Var; 2],
    quarter: [Var; 2],
}

fn encode<T: Real>(g: &mut Graph<T>, p: &mut Weights, a: Var, b: Var) -> Result<Pyramid> {
    let (w1, b1) = p.next();
    let (w2, b2) = p.next();
    let mut half = [a; 2];
    let mut quarter = [a; 2];
    for (i, x) in [a, b].into_iter().enumerate() {
        let h = g.conv2d(x, w1, b1, 2, 1)?;
        half[i] = g.leaky_relu(h, LEAKY_SLOPE)?;
        let q = g.conv2d(half[i], w2, b2, 2, 1)?;
        quarter[i] = g.leaky_relu(q, LEAKY_SLOPE)?;
    }
    Ok(Pyramid { half, quarter })
}

fn refine<T: Real>(g: &mut Graph<T>, p: &mut Weights, parts: &[Var]) -> Result<Var> {
    let x = g.concat(parts, 1)?;
    let h = p.conv_act(g, x, 1)?;
    p.conv(g, h, 1)
}

fn stereo<T: Real>(
    g: &mut Graph<T>,
    p: &mut Weights,
    left: Var,
    right: Var,
    bins_max: usize,
) -> Result<ForwardResult> {
    let f = encode(g, p, left, right)?;
    let a = g.instance_norm(f.quarter[0], NORM_EPS)?;
    let b = g.instance_norm(f.quarter[1], NORM_EPS)?;
    let corr = g.correlation(a, b, CorrAxis::Horizontal, 0, bins_max as i32)?;
    let logits = match_logits(g, p, corr, f.quarter[0])?;
    let prob = bin_probabilities(g, logits)?;
    let centres: Vec<f64> = (0..=bins_max).map(|d| d as f64).collect();
    let d4 = expectation(g, prob, &centres)?;

    let up = g.upsample2(d4)?;
    let up = g.scale(up, 2.0)?;
    let warped = warp_by_disparity(g, f.half[1], up, 1.0)?;
    let r = refine(g, p, &[f.half[0], warped, up])?;
    let z = g.add(up, r)?;
    let d2 = g.softplus(z)?;

    let up = g.upsample2(d2)?;
    let up = g.scale(up, 2.0)?;
    let warped = warp_by_disparity(g, right, up, 1.0)?;
    let r = refine(g, p, &[left, warped, up])?;
    let z = g.add(up, r)?;
    let d1 = g.softplus(z)?;
    Ok(ForwardResult {
        output: d1,
        taps: vec![f.half[0], f.quarter[0]],
        stages: vec![d4, d2, d1],
    })
}

fn flow<T: Real>(
    g: &mut Graph<T>,
    p: &mut Weights,
    first: Var,
    second: Var,
    reach: usize,
) -> Result<ForwardResult> {
    let f = encode(g, p, first, second)?;
    let r = reach as i32;
    let a = g.instance_norm(f.quarter[0], NORM_EPS)?;
    let b = g.instance_norm(f.quarter[1], NORM_EPS)?;
    // Bin (dy, d) compares a(y, x) with b(y + dy, x - d): motion (-d, dy).
    let mut slices = Vec::with_capacity(2 * reach + 1);
    let (mut cu, mut cv) = (Vec::new(), Vec::new());
    for dy in -r..=r {
        let shifted = shift_rows(g, b, dy)?;
        slices.push(g.correlation(a, shifted, CorrAxis::Horizontal, -r, r)?);
        for d in -r..=r {
            cu.push(-d as f64);
            cv.push(dy as f64);
        }
    }
    let corr = g.concat(&slices, 1)?;
    let logits = match_logits(g, p, corr, f.quarter[0])?;
    let prob = bin_probabilities(g, logits)?;
    let u = expectation(g, prob, &cu)?;
    let v = expectation(g, prob, &cv)?;
    let f4 = g.concat(&[u, v], 1)?;

    let up = g.upsample2(f4)?;
    let up = g.scale(up, 2.0)?;
    let warped = warp_by_flow(g, f.half[1], up, 1.0)?;
    let r = refine(g, p, &[f.half[0], warped, up])?;
    let f2 = g.add(up, r)?;

    let up = g.upsample2(f2)?;
    let up = g.scale(up, 2.0)?;
    let warped = warp_by_flow(g, second, up, 1.0)?;
    let r = refine(g, p, &[first, warped, up])?;
    let f1 = g.add(up, r)?;
    Ok(ForwardResult {
        output: f1,
        taps: vec![f.half[0], f.quarter[0]],
        stages: vec![f4, f2, f1],
    })
}
