//! Flat `key = value` run configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Keys are set independently, so the order of lines does not
//! matter except that a repeated key keeps its last value. Command-line
//! overrides are applied through the same [`CliConfig::set`] path after the
//! file. Unknown keys are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::scenegen::{DomainShift, SceneConfig};
use crate::trainer::TrainConfig;

/// Training, data-generation and loss-weight settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub scene: SceneConfig,
    /// Samples per domain written by `generate`.
    pub count: usize,
    pub shift_preset: String,
    pub data_seed: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            count: 200,
            shift_preset: "default".into(),
            data_seed: 0,
        }
    }
}

/// Every key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    (
        "k",
        "alternation period; iterations i with i % k == 0 update the translation module",
    ),
    ("total_iters", "number of training iterations"),
    ("batch_size", "samples per batch and domain"),
    (
        "lr_translation",
        "learning rate of generators and discriminators",
    ),
    ("lr_disp", "learning rate of the stereo network"),
    ("lr_flow", "learning rate of the flow network"),
    ("adam_beta1", "first-moment decay"),
    ("adam_beta2", "second-moment decay"),
    (
        "weight_decay_flow",
        "decoupled weight decay of the flow network",
    ),
    ("seed", "training seed"),
    (
        "eval_every",
        "validation interval in iterations (0: end only)",
    ),
    (
        "checkpoint_every",
        "checkpoint interval in iterations (0: final only)",
    ),
    ("gamma", "decay of refinement-stage weights"),
    ("gen_base", "generator base width"),
    ("disc_base", "discriminator base width"),
    ("max_disp", "stereo search range in pixels (multiple of 4)"),
    ("max_flow", "flow search range in pixels (multiple of 4)"),
    ("mode", "full | source_only"),
    ("scene.width", "image width"),
    ("scene.height", "image height"),
    ("scene.max_disp", "largest generated disparity"),
    ("scene.max_flow", "largest generated motion component"),
    ("scene.min_shapes", "fewest foreground shapes per scene"),
    ("scene.max_shapes", "most foreground shapes per scene"),
    ("scene.count", "samples per domain"),
    ("scene.shift_preset", "identity | default | strong"),
    ("scene.seed", "data generation seed"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

impl CliConfig {
    /// Sets one key; `weights.<name>` addresses a loss weight.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "k" => t.k = parse(key, value)?,
            "total_iters" => t.total_iters = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_translation" => t.lr_translation = parse(key, value)?,
            "lr_disp" => t.lr_disp = parse(key, value)?,
            "lr_flow" => t.lr_flow = parse(key, value)?,
            "adam_beta1" => t.adam_betas.0 = parse(key, value)?,
            "adam_beta2" => t.adam_betas.1 = parse(key, value)?,
            "weight_decay_flow" => t.weight_decay_flow = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "gen_base" => t.arch.gen_base = parse(key, value)?,
            "disc_base" => t.arch.disc_base = parse(key, value)?,
            "max_disp" => t.arch.max_disp = parse(key, value)?,
            "max_flow" => t.arch.max_flow = parse(key, value)?,
            "mode" => t.mode = value.parse()?,
            "scene.width" => self.scene.width = parse(key, value)?,
            "scene.height" => self.scene.height = parse(key, value)?,
            "scene.max_disp" => self.scene.max_disp = parse(key, value)?,
            "scene.max_flow" => self.scene.max_flow = parse(key, value)?,
            "scene.min_shapes" => self.scene.min_shapes = parse(key, value)?,
            "scene.max_shapes" => self.scene.max_shapes = parse(key, value)?,
            "scene.count" => self.count = parse(key, value)?,
            "scene.shift_preset" => self.shift_preset = value.to_string(),
            "scene.seed" => self.data_seed = parse(key, value)?,
            _ => match key.strip_prefix("weights.") {
                Some(name) if LossWeights::NAMES.contains(&name) => {
                    t.weights.set(name, parse(key, value)?)?
                }
                _ => return Err(Error::config(format!("unknown config key {key}"))),
            },
        }
        Ok(())
    }

    /// Applies every assignment of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{origin}:{}: expected key = value, got {line:?}",
                    i + 1
                ))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::config(format!("{origin}:{}: {}", i + 1, strip(e))))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "<config>")?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// Checks every section; call after all assignments.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scene.validate()?;
        DomainShift::preset(&self.shift_preset)?;
        Ok(())
    }

    pub fn shift(&self) -> Result<DomainShift> {
        DomainShift::preset(&self.shift_preset)
    }

    /// Every key with its current value, in [`KEYS`] order followed by the
    /// loss weights; feeding the result back through [`CliConfig::set`]
    /// reproduces `self`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.scene;
        let mut e = self.train.entries();
        let weights = e.split_off(e.len() - LossWeights::NAMES.len());
        e.extend([
            ("scene.width".into(), s.width.to_string()),
            ("scene.height".into(), s.height.to_string()),
            ("scene.max_disp".into(), s.max_disp.to_string()),
            ("scene.max_flow".into(), s.max_flow.to_string()),
            ("scene.min_shapes".into(), s.min_shapes.to_string()),
            ("scene.max_shapes".into(), s.max_shapes.to_string()),
            ("scene.count".into(), self.count.to_string()),
            ("scene.shift_preset".into(), self.shift_preset.clone()),
            ("scene.seed".into(), self.data_seed.to_string()),
        ]);
        e.extend(weights);
        e
    }

    /// The configuration as file text.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
