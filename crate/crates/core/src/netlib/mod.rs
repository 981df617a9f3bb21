//! Small fixed architectures for the five network roles: generators,
//! patch discriminators, stereo and flow networks, and the frozen feature
//! extractor used by the perceptual loss.
//!
//! Parameters live on the handle as `f32` tensors. A forward pass first
//! binds them into a [`Graph`] (as trainable leaves or as constants), then
//! composes gradcore kernels.

mod arch;

use std::fmt;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Real, Shape, Tensor, Var};

pub use arch::{GENERATOR_TAP_SCALES, LEAKY_SLOPE};

/// Seed of the perceptual extractor; fixed so every run sees the same Φ.
pub const EXTRACTOR_SEED: u64 = 0x0e7_7ac7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Generator,
    Discriminator,
    Stereo,
    Flow,
    Extractor,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
            Role::Stereo => "stereo",
            Role::Flow => "flow",
            Role::Extractor => "extractor",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Arch {
    Generator {
        base: usize,
    },
    /// Exact pass-through; taps are average-pooled copies of the input.
    IdentityGenerator,
    Discriminator {
        base: usize,
    },
    Stereo {
        max_disp: usize,
    },
    Flow {
        max_flow: usize,
    },
    Extractor,
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A parameterized differentiable function.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkHandle {
    role: Role,
    arch: Arch,
    params: Vec<Param>,
    tap_layers: Vec<usize>,
    frozen: bool,
}

/// Output of [`NetworkHandle::forward`].
///
/// `output` is the translated image, realness map, finest prediction or
/// last feature map; `taps` follow `tap_layers`; `stages` hold the
/// coarse-to-fine predictions of the stereo and flow networks.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub output: Var,
    pub taps: Vec<Var>,
    pub stages: Vec<Var>,
}

/// Parameters of one handle bound into a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl NetworkHandle {
    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Mutable parameter access; empty for frozen handles.
    pub fn params_mut(&mut self) -> &mut [Param] {
        if self.frozen {
            &mut []
        } else {
            &mut self.params
        }
    }

    pub fn tap_layers(&self) -> &[usize] {
        &self.tap_layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_identity(&self) -> bool {
        self.arch == Arch::IdentityGenerator
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Binds parameters into `g`. Frozen handles always bind as constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let trainable = trainable && !self.frozen;
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.cast(), trainable))
            .collect();
        Bound { vars }
    }

    /// Evaluates the network on `inputs` (one image, or a left/right or
    /// t/t+1 pair for the stereo and flow networks).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        inputs: &[Var],
    ) -> Result<ForwardResult> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::usage(format!(
                "{} network bound with {} parameters, expected {}",
                self.role,
                bound.vars.len(),
                self.params.len()
            )));
        }
        let want = match self.role {
            Role::Stereo | Role::Flow => 2,
            _ => 1,
        };
        if inputs.len() != want {
            return Err(Error::usage(format!(
                "{} network takes {want} input(s), got {}",
                self.role,
                inputs.len()
            )));
        }
        arch::forward(self.arch, g, &bound.vars, inputs)
    }

    /// [`bind`](Self::bind) followed by [`forward`](Self::forward).
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        trainable: bool,
        inputs: &[Var],
    ) -> Result<(Bound, ForwardResult)> {
        let bound = self.bind(g, trainable);
        let out = self.forward(g, &bound, inputs)?;
        Ok((bound, out))
    }

    /// Copies the parameter values of `other`, which must share the layout.
    pub fn load_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} network has {} parameters, got {}",
                self.role,
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {}, got {}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Sets every parameter to zero (test helper for closed-form outputs).
    pub fn zero_params(&mut self) {
        for p in &mut self.params {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
}

/// Declared layer of an architecture, used to create parameters in order.
#[derive(Clone, Copy)]
pub(crate) enum Layer {
    Conv {
        ci: usize,
        co: usize,
        k: usize,
    },
    Deconv {
        ci: usize,
        co: usize,
        k: usize,
    },
    /// Like `Deconv` but initialized to zero.
    ZeroDeconv {
        ci: usize,
        co: usize,
        k: usize,
    },
}

fn init_params(seed: u64, layers: &[(&str, Layer)]) -> Vec<Param> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut out = Vec::with_capacity(layers.len() * 2);
    for (name, layer) in layers {
        let (wshape, co, fan_in, zero) = match *layer {
            Layer::Conv { ci, co, k } => (Shape::new(co, ci, k, k), co, ci * k * k, false),
            Layer::Deconv { ci, co, k } => (Shape::new(ci, co, k, k), co, ci * k * k / 4, false),
            Layer::ZeroDeconv { ci, co, k } => (Shape::new(ci, co, k, k), co, ci * k * k / 4, true),
        };
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let mut draw = |shape: Shape| {
            if zero {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-bound..=bound))
            }
        };
        let w = draw(wshape);
        let b = draw(Shape::new(1, co, 1, 1));
        out.push(Param {
            name: format!("{name}.weight"),
            value: w,
        });
        out.push(Param {
            name: format!("{name}.bias"),
            value: b,
        });
    }
    out
}

fn handle(
    role: Role,
    arch: Arch,
    seed: u64,
    tap_layers: Vec<usize>,
    frozen: bool,
) -> NetworkHandle {
    NetworkHandle {
        role,
        arch,
        params: init_params(seed, &arch::layers(arch)),
        tap_layers,
        frozen,
    }
}

/// ResNet-style generator: two stride-2 encoder convs, three residual
/// blocks, two transposed convs, output squashed to `[0, 1]`.
///
/// The decoder predicts a residual in logit space on top of the input and
/// its last layer starts at zero, so a fresh generator returns its input
/// exactly. Taps: both encoder outputs and the last residual block.
pub fn build_generator(seed: u64, channels_base: usize) -> Result<NetworkHandle> {
    if channels_base < 4 {
        return Err(Error::config(format!(
            "generator channels_base must be >= 4, got {channels_base}"
        )));
    }
    Ok(handle(
        Role::Generator,
        Arch::Generator {
            base: channels_base,
        },
        seed,
        vec![0, 1, 4],
        false,
    ))
}

/// Generator that returns its input unchanged.
pub fn build_identity_generator() -> NetworkHandle {
    NetworkHandle {
        role: Role::Generator,
        arch: Arch::IdentityGenerator,
        params: Vec::new(),
        tap_layers: vec![0, 1, 4],
        frozen: true,
    }
}

/// Patch discriminator: four stride-2 convs, sigmoid realness map.
pub fn build_discriminator(seed: u64, channels_base: usize) -> Result<NetworkHandle> {
    if channels_base < 4 {
        return Err(Error::config(format!(
            "discriminator channels_base must be >= 4, got {channels_base}"
        )));
    }
    Ok(handle(
        Role::Discriminator,
        Arch::Discriminator {
            base: channels_base,
        },
        seed,
        Vec::new(),
        false,
    ))
}

/// Stereo network with a 3-stage disparity pyramid (1/4, 1/2, 1/1).
pub fn build_stereo_net(seed: u64, max_disp: usize) -> Result<NetworkHandle> {
    if max_disp < 4 || !max_disp.is_multiple_of(4) {
        return Err(Error::config(format!(
            "max_disp must be a positive multiple of 4, got {max_disp}"
        )));
    }
    Ok(handle(
        Role::Stereo,
        Arch::Stereo { max_disp },
        seed,
        vec![0, 1],
        false,
    ))
}

/// Flow network with a 3-stage two-channel flow pyramid.
pub fn build_flow_net(seed: u64, max_flow: usize) -> Result<NetworkHandle> {
    if max_flow < 4 || !max_flow.is_multiple_of(4) {
        return Err(Error::config(format!(
            "max_flow must be a positive multiple of 4, got {max_flow}"
        )));
    }
    Ok(handle(
        Role::Flow,
        Arch::Flow { max_flow },
        seed,
        vec![0, 1],
        false,
    ))
}

/// Frozen random-weight conv stack with 8/16/32 channels at 1/1, 1/2, 1/4.
pub fn build_extractor(seed: u64) -> NetworkHandle {
    handle(Role::Extractor, Arch::Extractor, seed, vec![0, 1, 2], true)
}

/// Extractor activations for `image`, finest first.
pub fn extractor_features<T: Real>(
    extractor: &NetworkHandle,
    g: &mut Graph<T>,
    image: Var,
) -> Result<Vec<Var>> {
    if extractor.role != Role::Extractor {
        return Err(Error::usage(format!(
            "expected an extractor, got a {} network",
            extractor.role
        )));
    }
    let (_, out) = extractor.run(g, false, &[image])?;
    Ok(out.taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_unique() {
        let g = build_generator(1, 8).unwrap();
        let mut names: Vec<_> = g.params().iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), g.params().len());
    }

    #[test]
    fn frozen_handle_exposes_no_mutable_params() {
        let mut e = build_extractor(EXTRACTOR_SEED);
        assert!(e.params_mut().is_empty());
        assert!(e.param_count() > 0);
    }

    #[test]
    fn invalid_sizes_are_config_errors() {
        assert!(matches!(build_generator(0, 3), Err(Error::Config(_))));
        assert!(matches!(build_stereo_net(0, 6), Err(Error::Config(_))));
        assert!(matches!(build_flow_net(0, 0), Err(Error::Config(_))));
    }
}
