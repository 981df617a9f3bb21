//! Photometric domain shift standing in for the synthetic-to-real gap.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::{Domain, SceneSample};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// `clamp01(color_matrix * image^gamma_curve + vignette + noise)`.
///
/// The vignette adds `-vignette_strength * r^2`, with `r` the distance from
/// the image centre normalized to 1 at the corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShift {
    pub gamma_curve: f64,
    pub color_matrix: [[f64; 3]; 3],
    pub noise_sigma: f64,
    pub vignette_strength: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            gamma_curve: 1.0,
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            noise_sigma: 0.0,
            vignette_strength: 0.0,
        }
    }

    /// Named presets: `identity`, `default`, `strong`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::identity()),
            "default" => Ok(DomainShift {
                gamma_curve: 0.7,
                color_matrix: [[0.75, 0.20, 0.05], [0.10, 0.70, 0.20], [0.25, 0.05, 0.65]],
                noise_sigma: 0.03,
                vignette_strength: 0.25,
            }),
            "strong" => Ok(DomainShift {
                gamma_curve: 0.5,
                color_matrix: [[0.55, 0.35, 0.10], [0.20, 0.50, 0.30], [0.35, 0.15, 0.45]],
                noise_sigma: 0.05,
                vignette_strength: 0.4,
            }),
            other => Err(Error::config(format!(
                "unknown shift preset {other} (expected identity, default or strong)"
            ))),
        }
    }

    /// Applies the pixel transform to one `(n, 3, h, w)` image.
    pub fn apply_to_image(&self, img: &Tensor, rng: &mut Xoshiro256PlusPlus) -> Tensor {
        let s = img.shape();
        let (h, w) = (s.h(), s.w());
        let noise = (self.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, self.noise_sigma).expect("finite sigma"));
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let mut out = Tensor::zeros(s);
        for n in 0..s.n() {
            for y in 0..h {
                for x in 0..w {
                    let rx = if cx > 0.0 { (x as f64 - cx) / cx } else { 0.0 };
                    let ry = if cy > 0.0 { (y as f64 - cy) / cy } else { 0.0 };
                    let vignette = -self.vignette_strength * (rx * rx + ry * ry) / 2.0;
                    let src = [0, 1, 2]
                        .map(|c| (img.at(n, c, y, x) as f64).max(0.0).powf(self.gamma_curve));
                    for c in 0..3 {
                        let m = &self.color_matrix[c];
                        let mut v = m[0] * src[0] + m[1] * src[1] + m[2] * src[2] + vignette;
                        if let Some(d) = &noise {
                            v += d.sample(rng);
                        }
                        out.set(n, c, y, x, v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
        }
        out
    }
}

/// Re-renders a synthetic sample in the real domain; ground truth is kept.
///
/// Left, right and next frames share the shift parameters and draw
/// independent noise from `seed`.
pub fn apply_domain_shift(sample: &SceneSample, shift: &DomainShift, seed: u64) -> SceneSample {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    SceneSample {
        left: shift.apply_to_image(&sample.left, &mut rng),
        right: shift.apply_to_image(&sample.right, &mut rng),
        next_left: shift.apply_to_image(&sample.next_left, &mut rng),
        domain: Domain::Real,
        ..sample.clone()
    }
}
