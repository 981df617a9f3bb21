//! Procedural paired domains with exact ground truth.
//!
//! A scene is a stack of textured layers (a background plane plus 5 to 10
//! rectangles and ellipses). Each layer carries one disparity and one 2-D
//! translation. The right view and the next frame are rendered by
//! re-compositing the layers at their displaced positions, so occlusions
//! are genuine. Textures are smooth sums of sinusoids evaluated at
//! continuous coordinates, which keeps bilinear resampling error below
//! `1e-2`.

pub(crate) mod io;
mod shift;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::gradcore::{Shape, Tensor};
use crate::warp::WarpField;

pub use io::{
    read_dataset, read_sample, read_tensor_file, write_dataset, write_ppm, write_sample,
    write_tensor_file, MANIFEST, SAMPLE_MAGIC, TENSOR_MAGIC,
};
pub use shift::{apply_domain_shift, DomainShift};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Synthetic,
    Real,
}

/// One stereo/temporal tuple. Real-domain samples keep their ground truth
/// for held-out evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub left: Tensor,
    pub right: Tensor,
    pub next_left: Tensor,
    pub disparity: Option<WarpField>,
    pub flow: Option<WarpField>,
    /// 1 where the left-view pixel is visible in both frames t and t+1.
    pub occlusion: Option<Tensor>,
    /// 1 where the left-view pixel is visible in the right view.
    pub stereo_mask: Option<Tensor>,
    pub domain: Domain,
}

/// Scene extents and layer counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub max_disp: f64,
    pub max_flow: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 128,
            height: 64,
            max_disp: 16.0,
            max_flow: 8.0,
            min_shapes: 5,
            max_shapes: 10,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width, self.height);
        if w < 8 || h < 8 || w % 4 != 0 || h % 4 != 0 {
            return Err(Error::config(format!(
                "scene extents must be multiples of 4 and at least 8, got {w}x{h}"
            )));
        }
        if !(self.max_disp >= 1.0 && self.max_disp < w as f64 / 2.0) {
            return Err(Error::config(format!(
                "max_disp must lie in [1, width/2), got {}",
                self.max_disp
            )));
        }
        if !(self.max_flow >= 1.0 && self.max_flow < h as f64 / 2.0) {
            return Err(Error::config(format!(
                "max_flow must lie in [1, height/2), got {}",
                self.max_flow
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        Ok(())
    }
}

const WAVES: usize = 3;
const TEXTURE_AMPLITUDE: f64 = 0.25;

#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    gain: [f64; 3],
    waves: [(f64, f64, f64, f64); WAVES],
}

impl Texture {
    fn random(rng: &mut Xoshiro256PlusPlus) -> Self {
        let mut waves = [(0.0, 0.0, 0.0, 0.0); WAVES];
        let weights: Vec<f64> = (0..WAVES).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        for (w, a) in waves.iter_mut().zip(&weights) {
            let freq = rng.random_range(0.2..0.5);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            *w = (
                TEXTURE_AMPLITUDE * a / total,
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Texture {
            base: [0; 3].map(|_| rng.random_range(0.3..0.7)),
            gain: [0; 3].map(|_| rng.random_range(0.6..1.0)),
            waves,
        }
    }

    fn colour(&self, x: f64, y: f64) -> [f64; 3] {
        let p: f64 = self
            .waves
            .iter()
            .map(|&(a, kx, ky, phase)| a * (kx * x + ky * y + phase).sin())
            .sum();
        [0, 1, 2].map(|c| self.base[c] + self.gain[c] * p)
    }
}

#[derive(Clone, Debug)]
enum Region {
    Everywhere,
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Region {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Everywhere => true,
            Region::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Region::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

/// A layer in left-view, frame-t coordinates.
#[derive(Clone, Debug)]
struct Layer {
    region: Region,
    texture: Texture,
    disparity: f64,
    flow: (f64, f64),
}

struct Scene {
    /// Back to front.
    layers: Vec<Layer>,
}

impl Scene {
    fn random(rng: &mut Xoshiro256PlusPlus, cfg: &SceneConfig) -> Self {
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let per_axis = cfg.max_flow / std::f64::consts::SQRT_2;
        let random_flow = |rng: &mut Xoshiro256PlusPlus, reach: f64| {
            (
                rng.random_range(-reach..=reach),
                rng.random_range(-reach..=reach),
            )
        };
        let bg_disp = rng.random_range(0.5..(0.25 * cfg.max_disp).max(0.75));
        let mut layers = vec![Layer {
            region: Region::Everywhere,
            texture: Texture::random(rng),
            disparity: bg_disp,
            flow: random_flow(rng, 0.25 * per_axis),
        }];
        let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
        let mut disparities: Vec<f64> = (0..count)
            .map(|_| rng.random_range(bg_disp + 0.5..=cfg.max_disp.max(bg_disp + 0.5)))
            .collect();
        disparities.sort_by(f64::total_cmp);
        for disparity in disparities {
            let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            let (a, b) = (
                rng.random_range(w / 16.0..w / 5.0),
                rng.random_range(h / 10.0..h / 4.0),
            );
            let region = if rng.random_bool(0.5) {
                Region::Rect {
                    cx,
                    cy,
                    hw: a,
                    hh: b,
                }
            } else {
                Region::Ellipse {
                    cx,
                    cy,
                    rx: a,
                    ry: b,
                }
            };
            layers.push(Layer {
                region,
                texture: Texture::random(rng),
                disparity,
                flow: random_flow(rng, per_axis),
            });
        }
        Scene { layers }
    }

    /// Topmost layer whose displaced region covers view point `(x, y)`;
    /// `shift` maps a layer to the offset of its content in the view.
    fn top(&self, x: f64, y: f64, shift: impl Fn(&Layer) -> (f64, f64)) -> usize {
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (dx, dy) = shift(l);
            if l.region.contains(x - dx, y - dy) {
                return i;
            }
        }
        0
    }

    /// Renders one view; returns the image and per-pixel layer ids.
    fn render(
        &self,
        w: usize,
        h: usize,
        shift: impl Fn(&Layer) -> (f64, f64),
    ) -> (Tensor, Vec<usize>) {
        let mut img = Tensor::zeros(Shape::new(1, 3, h, w));
        let mut ids = vec![0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let id = self.top(xf, yf, &shift);
                let l = &self.layers[id];
                let (dx, dy) = shift(l);
                let c = l.texture.colour(xf - dx, yf - dy);
                for (ch, v) in c.iter().enumerate() {
                    img.set(0, ch, y, x, *v as f32);
                }
                ids[y * w + x] = id;
            }
        }
        (img, ids)
    }
}

/// Whether every bilinear tap around `(x, y)` lies inside the view and
/// belongs to layer `id`.
fn taps_match(ids: &[usize], w: usize, h: usize, x: f64, y: f64, id: usize) -> bool {
    if !(x >= 0.0 && y >= 0.0) {
        return false;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as usize, y0 as usize);
    for (ox, oy, needed) in [
        (0, 0, true),
        (1, 0, fx > 0.0),
        (0, 1, fy > 0.0),
        (1, 1, fx > 0.0 && fy > 0.0),
    ] {
        if !needed {
            continue;
        }
        let (px, py) = (xi + ox, yi + oy);
        if px >= w || py >= h || ids[py * w + px] != id {
            return false;
        }
    }
    true
}

/// Deterministic per-sample seed derivation.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one synthetic sample with default layer counts.
pub fn generate_scene(
    seed: u64,
    width: usize,
    height: usize,
    max_disp: f64,
    max_flow: f64,
) -> Result<SceneSample> {
    generate_scene_with(
        seed,
        &SceneConfig {
            width,
            height,
            max_disp,
            max_flow,
            ..SceneConfig::default()
        },
    )
}

pub fn generate_scene_with(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let scene = Scene::random(&mut rng, cfg);

    let (left, left_ids) = scene.render(w, h, |_| (0.0, 0.0));
    // Right view: content at left x appears at x - d.
    let (right, right_ids) = scene.render(w, h, |l| (-l.disparity, 0.0));
    let (next_left, next_ids) = scene.render(w, h, |l| l.flow);

    let plane = Shape::new(1, 1, h, w);
    let mut disp = Tensor::zeros(plane);
    let mut flow = Tensor::zeros(Shape::new(1, 2, h, w));
    let mut occ = Tensor::zeros(plane);
    let mut stereo = Tensor::zeros(plane);
    for y in 0..h {
        for x in 0..w {
            let id = left_ids[y * w + x];
            let l = &scene.layers[id];
            disp.set(0, 0, y, x, l.disparity as f32);
            flow.set(0, 0, y, x, l.flow.0 as f32);
            flow.set(0, 1, y, x, l.flow.1 as f32);
            // Positions are taken from the stored f32 fields so that the
            // masks agree with what a warp of those fields samples.
            let d = l.disparity as f32 as f64;
            let (u, v) = (l.flow.0 as f32 as f64, l.flow.1 as f32 as f64);
            let (xf, yf) = (x as f64, y as f64);
            if taps_match(&right_ids, w, h, xf - d, yf, id) {
                stereo.set(0, 0, y, x, 1.0);
            }
            if taps_match(&next_ids, w, h, xf + u, yf + v, id) {
                occ.set(0, 0, y, x, 1.0);
            }
        }
    }
    Ok(SceneSample {
        left,
        right,
        next_left,
        disparity: Some(WarpField::disparity(disp)?),
        flow: Some(WarpField::flow(flow)?),
        occlusion: Some(occ),
        stereo_mask: Some(stereo),
        domain: Domain::Synthetic,
    })
}

/// Generates `count` synthetic samples and `count` shifted real-domain
/// samples from independent scenes, synthetic first.
pub fn generate_paired_domains(
    seed: u64,
    count: usize,
    cfg: &SceneConfig,
    shift: &DomainShift,
) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let make = |stream: u64, i: usize| -> Result<SceneSample> {
        let s = generate_scene_with(derive_seed(seed, stream, i as u64), cfg)?;
        if stream == 0 {
            Ok(s)
        } else {
            Ok(apply_domain_shift(
                &s,
                shift,
                derive_seed(seed, 2, i as u64),
            ))
        }
    };
    use rayon::prelude::*;
    let mut out: Vec<SceneSample> = (0..count)
        .into_par_iter()
        .map(|i| make(0, i))
        .collect::<Result<_>>()?;
    let real: Vec<SceneSample> = (0..count)
        .into_par_iter()
        .map(|i| make(1, i))
        .collect::<Result<_>>()?;
    out.extend(real);
    Ok(out)
}

/// Splits samples by domain, preserving order.
pub fn partition_by_domain(samples: Vec<SceneSample>) -> (Vec<SceneSample>, Vec<SceneSample>) {
    samples
        .into_iter()
        .partition(|s| s.domain == Domain::Synthetic)
}

/// First 80% of each list for training, the rest for validation.
pub fn train_val_split<T>(mut samples: Vec<T>) -> (Vec<T>, Vec<T>) {
    let n_train = samples.len() * 4 / 5;
    let val = samples.split_off(n_train);
    (samples, val)
}
