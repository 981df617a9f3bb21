//! Alternating optimization of the translation module and the two task
//! networks, with Adam/AdamW, checkpoints and a plain-text log.

mod checkpoint;
mod step;

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::gradcore::{Graph, Tensor};
use crate::losses::{LossBreakdown, LossWeights};
use crate::metrics::{evaluate, EvalModels, EvalOptions, MetricsReport};
use crate::netlib::{
    build_discriminator, build_extractor, build_flow_net, build_generator, build_stereo_net, Bound,
    NetworkHandle, Param, EXTRACTOR_SEED,
};
use crate::scenegen::{
    derive_seed, partition_by_domain, read_dataset, train_val_split, SceneSample,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use step::train_step;

pub const ADAM_EPS: f64 = 1e-8;
/// Smoothing factor of the running loss averages.
pub const RUNNING_DECAY: f64 = 0.9;

/// What the task networks learn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainMode {
    /// Translation and task updates with every loss term.
    #[default]
    Full,
    /// Task networks only, supervised on raw synthetic pairs; the
    /// translation slots of the schedule are idle.
    SourceOnly,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "source_only" => Ok(TrainMode::SourceOnly),
            _ => Err(Error::config(format!(
                "mode must be full|source_only, got {s}"
            ))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Full => "full",
            TrainMode::SourceOnly => "source_only",
        })
    }
}

/// Network sizes; stored in checkpoints so they can be rebuilt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub gen_base: usize,
    pub disc_base: usize,
    pub max_disp: usize,
    pub max_flow: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            gen_base: 8,
            disc_base: 8,
            max_disp: 16,
            max_flow: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Iterations `i` with `i % k == 0` update the translation module, the
    /// others the task networks.
    pub k: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr_translation: f64,
    pub lr_disp: f64,
    pub lr_flow: f64,
    pub adam_betas: (f64, f64),
    /// Decoupled decay of the flow network's AdamW.
    pub weight_decay_flow: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_every: usize,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub gamma: f64,
    pub arch: ArchConfig,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 5,
            total_iters: 200,
            batch_size: 2,
            lr_translation: 2e-4,
            lr_disp: 1e-3,
            lr_flow: 1e-3,
            adam_betas: (0.9, 0.999),
            weight_decay_flow: 0.01,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            gamma: crate::warp::STAGE_GAMMA,
            arch: ArchConfig::default(),
            mode: TrainMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        for (name, lr) in [
            ("lr_translation", self.lr_translation),
            ("lr_disp", self.lr_disp),
            ("lr_flow", self.lr_flow),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {lr}")));
            }
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config(format!(
                "adam betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.weight_decay_flow >= 0.0 && self.weight_decay_flow.is_finite()) {
            return Err(Error::config("weight_decay_flow must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        self.weights.validate()?;
        if !self.total_iters.is_multiple_of(self.k) {
            log::warn!(
                "total_iters={} is not a multiple of k={}; the last cycle is partial",
                self.total_iters,
                self.k
            );
        }
        Ok(())
    }

    /// Flat `(key, value)` echo of every field, in a stable order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![
            ("k".into(), self.k.to_string()),
            ("total_iters".into(), self.total_iters.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr_translation".into(), self.lr_translation.to_string()),
            ("lr_disp".into(), self.lr_disp.to_string()),
            ("lr_flow".into(), self.lr_flow.to_string()),
            ("adam_beta1".into(), self.adam_betas.0.to_string()),
            ("adam_beta2".into(), self.adam_betas.1.to_string()),
            (
                "weight_decay_flow".into(),
                self.weight_decay_flow.to_string(),
            ),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("gen_base".into(), self.arch.gen_base.to_string()),
            ("disc_base".into(), self.arch.disc_base.to_string()),
            ("max_disp".into(), self.arch.max_disp.to_string()),
            ("max_flow".into(), self.arch.max_flow.to_string()),
            ("mode".into(), self.mode.to_string()),
        ];
        for (n, v) in self.weights.entries() {
            e.push((format!("weights.{n}"), v.to_string()));
        }
        e
    }
}

/// Every network of the framework; the extractor is frozen.
#[derive(Clone, Debug)]
pub struct Networks {
    pub g_a2b: NetworkHandle,
    pub g_b2a: NetworkHandle,
    pub d_a: NetworkHandle,
    pub d_b: NetworkHandle,
    pub stereo: NetworkHandle,
    pub flow: NetworkHandle,
    pub extractor: NetworkHandle,
}

/// Names of the trainable networks, in checkpoint order.
pub const TRAINABLE: [&str; 6] = ["g_a2b", "g_b2a", "d_a", "d_b", "stereo", "flow"];

impl Networks {
    /// Builds every network, drawing one seed per network from `rng`.
    pub fn build(arch: &ArchConfig, rng: &mut Xoshiro256PlusPlus) -> Result<Self> {
        Ok(Networks {
            g_a2b: build_generator(rng.next_u64(), arch.gen_base)?,
            g_b2a: build_generator(rng.next_u64(), arch.gen_base)?,
            d_a: build_discriminator(rng.next_u64(), arch.disc_base)?,
            d_b: build_discriminator(rng.next_u64(), arch.disc_base)?,
            stereo: build_stereo_net(rng.next_u64(), arch.max_disp)?,
            flow: build_flow_net(rng.next_u64(), arch.max_flow)?,
            extractor: build_extractor(EXTRACTOR_SEED),
        })
    }

    pub fn eval_models(&self) -> EvalModels<'_> {
        EvalModels {
            stereo: &self.stereo,
            flow: &self.flow,
            g_a2b: &self.g_a2b,
            g_b2a: &self.g_b2a,
            extractor: &self.extractor,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NetworkHandle> {
        Some(match name {
            "g_a2b" => &self.g_a2b,
            "g_b2a" => &self.g_b2a,
            "d_a" => &self.d_a,
            "d_b" => &self.d_b,
            "stereo" => &self.stereo,
            "flow" => &self.flow,
            "extractor" => &self.extractor,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NetworkHandle> {
        Some(match name {
            "g_a2b" => &mut self.g_a2b,
            "g_b2a" => &mut self.g_b2a,
            "d_a" => &mut self.d_a,
            "d_b" => &mut self.d_b,
            "stereo" => &mut self.stereo,
            "flow" => &mut self.flow,
            "extractor" => &mut self.extractor,
            _ => return None,
        })
    }

    /// Parameter fingerprints of the translation module (generators and
    /// discriminators) and of the task networks.
    pub fn fingerprints(&self) -> (u64, u64) {
        use std::hash::{Hash, Hasher};
        let mut t = std::collections::hash_map::DefaultHasher::new();
        for n in [&self.g_a2b, &self.g_b2a, &self.d_a, &self.d_b] {
            n.fingerprint().hash(&mut t);
        }
        let mut k = std::collections::hash_map::DefaultHasher::new();
        self.stereo.fingerprint().hash(&mut k);
        self.flow.fingerprint().hash(&mut k);
        (t.finish(), k.finish())
    }
}

/// First and second moment buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params(params: &[Param]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay
/// (`weight_decay = 0` gives plain Adam).
pub fn adam_update(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::shape(format!(
            "adam: {} parameters, {} gradients, {}/{} moment buffers",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let s = p.value.shape();
        if g.shape() != s || state.m[i].shape() != s || state.v[i].shape() != s {
            return Err(Error::shape(format!(
                "adam: parameter {} has shape {s}, gradient {}",
                p.name,
                g.shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mut wj = *w as f64;
            wj -= lr * weight_decay * wj;
            wj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
            *w = wj as f32;
        }
    }
    Ok(())
}

/// Gradients of the parameters bound in `g`, zeros where none arrived.
pub(crate) fn collect_grads(g: &Graph<f32>, net: &NetworkHandle, bound: &Bound) -> Vec<Tensor> {
    net.params()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect()
}

/// Optimizer state of each trainable network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub g_a2b: AdamState,
    pub g_b2a: AdamState,
    pub d_a: AdamState,
    pub d_b: AdamState,
    pub stereo: AdamState,
    pub flow: AdamState,
}

impl Optimizers {
    pub fn new(nets: &Networks) -> Self {
        Optimizers {
            g_a2b: AdamState::for_params(nets.g_a2b.params()),
            g_b2a: AdamState::for_params(nets.g_b2a.params()),
            d_a: AdamState::for_params(nets.d_a.params()),
            d_b: AdamState::for_params(nets.d_b.params()),
            stereo: AdamState::for_params(nets.stereo.params()),
            flow: AdamState::for_params(nets.flow.params()),
        }
    }

    pub fn get(&self, name: &str) -> Option<&AdamState> {
        Some(match name {
            "g_a2b" => &self.g_a2b,
            "g_b2a" => &self.g_b2a,
            "d_a" => &self.d_a,
            "d_b" => &self.d_b,
            "stereo" => &self.stereo,
            "flow" => &self.flow,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut AdamState> {
        Some(match name {
            "g_a2b" => &mut self.g_a2b,
            "g_b2a" => &mut self.g_b2a,
            "d_a" => &mut self.d_a,
            "d_b" => &mut self.d_b,
            "stereo" => &mut self.stereo,
            "flow" => &mut self.flow,
            _ => return None,
        })
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub arch: ArchConfig,
    pub nets: Networks,
    pub opt: Optimizers,
    pub rng: Xoshiro256PlusPlus,
    /// Exponential running averages of every logged loss.
    pub running: LossBreakdown,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
        let nets = Networks::build(&cfg.arch, &mut rng)?;
        let opt = Optimizers::new(&nets);
        Ok(TrainState {
            iteration: 0,
            arch: cfg.arch,
            nets,
            opt,
            rng,
            running: LossBreakdown::default(),
        })
    }

    pub(crate) fn update_running(&mut self, losses: &LossBreakdown) {
        let mut next = LossBreakdown::default();
        for (name, v) in self.running.entries() {
            if losses.get(name).is_none() {
                next.push(name, *v);
            }
        }
        for (name, v) in losses.entries() {
            let r = match self.running.get(name) {
                Some(old) => RUNNING_DECAY * old + (1.0 - RUNNING_DECAY) * v,
                None => *v,
            };
            next.push(name, r);
        }
        self.running = next;
    }
}

/// Stacked tensors of one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub left: Tensor,
    pub right: Tensor,
    pub next_left: Tensor,
    pub disparity: Option<Tensor>,
    pub flow: Option<Tensor>,
    pub occlusion: Option<Tensor>,
}

impl Batch {
    pub fn from_samples(samples: &[&SceneSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let stack = |f: &dyn Fn(&SceneSample) -> &Tensor| {
            Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        let stack_opt = |f: &dyn Fn(&SceneSample) -> Option<&Tensor>| -> Result<Option<Tensor>> {
            let parts: Option<Vec<&Tensor>> = samples.iter().map(|s| f(s)).collect();
            parts.map(|p| Tensor::stack(&p)).transpose()
        };
        Ok(Batch {
            left: stack(&|s| &s.left)?,
            right: stack(&|s| &s.right)?,
            next_left: stack(&|s| &s.next_left)?,
            disparity: stack_opt(&|s| s.disparity.as_ref().map(|d| &d.values))?,
            flow: stack_opt(&|s| s.flow.as_ref().map(|f| &f.values))?,
            occlusion: stack_opt(&|s| s.occlusion.as_ref())?,
        })
    }

    pub fn len(&self) -> usize {
        self.left.shape().n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training and validation splits of both domains.
#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub syn_train: Vec<SceneSample>,
    pub syn_val: Vec<SceneSample>,
    pub real_train: Vec<SceneSample>,
    pub real_val: Vec<SceneSample>,
}

impl Datasets {
    /// Splits each domain into its first 80% and last 20%.
    pub fn from_samples(samples: Vec<SceneSample>) -> Self {
        let (syn, real) = partition_by_domain(samples);
        let (syn_train, syn_val) = train_val_split(syn);
        let (real_train, real_val) = train_val_split(real);
        Datasets {
            syn_train,
            syn_val,
            real_train,
            real_val,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self::from_samples(read_dataset(dir)?))
    }
}

const SYN_STREAM: u64 = 0x5e;
const REAL_STREAM: u64 = 0x7e;

/// Sample indices of the batch at `iteration`: the data is walked in a
/// fresh seeded permutation per epoch, so batching needs no state.
pub fn batch_indices(
    seed: u64,
    stream: u64,
    iteration: u64,
    batch_size: usize,
    n: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = iteration * batch_size as u64 + j;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(derive_seed(
                seed, stream, epoch,
            )));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[(pos % n as u64) as usize]);
    }
    out
}

fn batch_at(
    samples: &[SceneSample],
    seed: u64,
    stream: u64,
    iteration: u64,
    bs: usize,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    let idx = batch_indices(seed, stream, iteration, bs, samples.len());
    Batch::from_samples(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>())
}

/// Log and final report of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<String>,
    pub report: MetricsReport,
}

/// Log line of one training iteration: `iter<TAB>name=value...`.
pub fn format_log_line(iteration: u64, losses: &LossBreakdown) -> String {
    let mut s = iteration.to_string();
    for (n, v) in losses.entries() {
        s.push_str(&format!("\t{n}={v:e}"));
    }
    s
}

fn format_eval_line(iteration: u64, report: &MetricsReport) -> String {
    let mut s = iteration.to_string();
    for (n, v) in MetricsReport::FIELDS.iter().zip(report.values()) {
        s.push_str(&format!("\teval.{n}={v:e}"));
    }
    s
}

struct LogSink {
    lines: Vec<String>,
    file: Option<fs::File>,
    path: PathBuf,
}

impl LogSink {
    fn new(out_dir: Option<&Path>) -> Result<Self> {
        let (file, path) = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join("train.log");
                (Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?), p)
            }
            None => (None, PathBuf::new()),
        };
        Ok(LogSink {
            lines: Vec::new(),
            file,
            path,
        })
    }

    fn line(&mut self, s: String) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{s}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.lines.push(s);
        Ok(())
    }
}

/// Trains a fresh state for `cfg.total_iters` iterations.
pub fn run_training(
    cfg: &TrainConfig,
    data: &Datasets,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    run_training_from(TrainState::new(cfg)?, cfg, data, out_dir)
}

/// Continues `state` up to `cfg.total_iters`, evaluating on the real
/// validation split and writing `train.log` plus checkpoints to `out_dir`.
pub fn run_training_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    data: &Datasets,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if state.arch != cfg.arch {
        return Err(Error::config(format!(
            "state architecture {:?} differs from config {:?}",
            state.arch, cfg.arch
        )));
    }
    let mut sink = LogSink::new(out_dir)?;
    for (k, v) in cfg.entries() {
        sink.line(format!("# {k}={v}"))?;
    }
    let eval_opts = EvalOptions::default();
    let total = cfg.total_iters as u64;
    while state.iteration < total {
        let it = state.iteration;
        if cfg.eval_every > 0 && it.is_multiple_of(cfg.eval_every as u64) && !data.real_val.is_empty() {
            let r = evaluate(&state.nets.eval_models(), &data.real_val, &eval_opts)?;
            sink.line(format_eval_line(it, &r))?;
        }
        let sb = batch_at(&data.syn_train, cfg.seed, SYN_STREAM, it, cfg.batch_size)?;
        let losses = match cfg.mode {
            TrainMode::Full => {
                let rb = batch_at(&data.real_train, cfg.seed, REAL_STREAM, it, cfg.batch_size)?;
                train_step(&mut state, cfg, &sb, &rb)?
            }
            // the real batch is unused without translation
            TrainMode::SourceOnly => train_step(&mut state, cfg, &sb, &sb)?,
        };
        sink.line(format_log_line(it, &losses))?;
        if let Some(d) = out_dir {
            if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every as u64) {
                save_checkpoint(&state, &d.join(format!("ckpt_{:06}.wck", state.iteration)))?;
            }
        }
    }
    let report = if data.real_val.is_empty() {
        MetricsReport::default()
    } else {
        let r = evaluate(&state.nets.eval_models(), &data.real_val, &eval_opts)?;
        sink.line(format_eval_line(state.iteration, &r))?;
        r
    };
    if let Some(d) = out_dir {
        save_checkpoint(&state, &d.join("final.wck"))?;
    }
    Ok(TrainOutcome {
        state,
        log: sink.lines,
        report,
    })
}
