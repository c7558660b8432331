//! Run configuration: `key = value` lines with `#` comments.
//!
//! Defaults are the full-scale hyper-parameters (batch 16, learning rate
//! 0.001, scheduled-sampling k = 900, 10 masks, 50k/50k/100k phase
//! iterations, final β 0.001, one latent channel, σ floor e^-5).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// One draw per video.
    TimeInvariant,
    /// One draw per predicted frame.
    TimeVariant,
}

impl LatentMode {
    pub fn name(self) -> &'static str {
        match self {
            LatentMode::TimeInvariant => "time_invariant",
            LatentMode::TimeVariant => "time_variant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "time_invariant" => Ok(LatentMode::TimeInvariant),
            "time_variant" => Ok(LatentMode::TimeVariant),
            _ => Err(Error::Config(format!(
                "latent_mode must be time_invariant or time_variant, got `{s}`"
            ))),
        }
    }
}

/// Everything that determines parameter shapes and forward semantics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Frames per training video, context included.
    pub frames: usize,
    pub context: usize,
    pub enc_channels: Vec<usize>,
    pub inf_channels: Vec<usize>,
    pub masks: usize,
    pub kernel_size: usize,
    pub latent_channels: usize,
    pub latent_mode: LatentMode,
    pub actions: bool,
    pub skip_connections: bool,
    pub instance_norm: bool,
    pub min_log_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            frames: 4,
            context: 1,
            enc_channels: vec![16, 32],
            inf_channels: vec![32, 64, 128],
            masks: 10,
            kernel_size: 5,
            latent_channels: 1,
            latent_mode: LatentMode::TimeInvariant,
            actions: false,
            skip_connections: true,
            instance_norm: false,
            min_log_sigma: -5.0,
        }
    }
}

pub const LATENT_SIZE: usize = 8;

impl ModelConfig {
    /// Stride-2 stages taking the inference input down to 8×8.
    pub fn inference_stages(&self) -> usize {
        (self.resolution / LATENT_SIZE).trailing_zeros() as usize
    }

    pub fn bottleneck_size(&self) -> usize {
        self.resolution >> self.enc_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.resolution.is_power_of_two() || self.resolution < LATENT_SIZE {
            return fail(format!("resolution must be a power of two ≥ 8, got {}", self.resolution));
        }
        if self.context == 0 || self.context >= self.frames {
            return fail(format!(
                "need 1 ≤ context < frames, got context {} with {} frames",
                self.context, self.frames
            ));
        }
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return fail(format!("enc_channels must be nonempty and positive, got {:?}", self.enc_channels));
        }
        if self.bottleneck_size() == 0 || self.resolution % (1 << self.enc_channels.len()) != 0 {
            return fail(format!(
                "{} encoder levels do not fit a {1}x{1} frame",
                self.enc_channels.len(),
                self.resolution
            ));
        }
        if self.inf_channels.len() < self.inference_stages() || self.inf_channels.contains(&0) {
            return fail(format!(
                "a {}x{0} input needs {} inference stages, inf_channels has {:?}",
                self.resolution,
                self.inference_stages(),
                self.inf_channels
            ));
        }
        if self.masks == 0 || self.kernel_size % 2 == 0 || self.latent_channels == 0 {
            return fail("masks and latent_channels must be positive and kernel_size odd".into());
        }
        if !self.min_log_sigma.is_finite() {
            return fail("min_log_sigma must be finite".into());
        }
        Ok(())
    }

    /// Digest of [`ModelConfig::to_text`]; checkpoints refuse to load into a different one.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in MODEL_KEYS {
            writeln!(s, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        s
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "resolution" => self.resolution.to_string(),
            "frames" => self.frames.to_string(),
            "context" => self.context.to_string(),
            "enc_channels" => join(&self.enc_channels),
            "inf_channels" => join(&self.inf_channels),
            "masks" => self.masks.to_string(),
            "kernel_size" => self.kernel_size.to_string(),
            "latent_channels" => self.latent_channels.to_string(),
            "latent_mode" => self.latent_mode.name().to_string(),
            "actions" => self.actions.to_string(),
            "skip_connections" => self.skip_connections.to_string(),
            "instance_norm" => self.instance_norm.to_string(),
            "min_log_sigma" => fmt_f64(self.min_log_sigma),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "resolution" => self.resolution = num(key, v)?,
            "frames" => self.frames = num(key, v)?,
            "context" => self.context = num(key, v)?,
            "enc_channels" => self.enc_channels = list(key, v)?,
            "inf_channels" => self.inf_channels = list(key, v)?,
            "masks" => self.masks = num(key, v)?,
            "kernel_size" => self.kernel_size = num(key, v)?,
            "latent_channels" => self.latent_channels = num(key, v)?,
            "latent_mode" => self.latent_mode = LatentMode::parse(v)?,
            "actions" => self.actions = num(key, v)?,
            "skip_connections" => self.skip_connections = num(key, v)?,
            "instance_norm" => self.instance_norm = num(key, v)?,
            "min_log_sigma" => self.min_log_sigma = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (line, key, value) in entries(text)? {
            if !cfg.set(key, value)? {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub learning_rate: f64,
    /// Scheduled-sampling decay constant k.
    pub ss_k: f64,
    pub seed: u64,
    pub phase1: u64,
    pub phase2: u64,
    pub phase3: u64,
    pub beta_start: f64,
    pub beta_final: f64,
    /// Posterior latents and β at its final value from the first step.
    pub naive: bool,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            learning_rate: 1e-3,
            ss_k: 900.0,
            seed: 0,
            phase1: 50_000,
            phase2: 50_000,
            phase3: 100_000,
            beta_start: 0.0,
            beta_final: 1e-3,
            naive: false,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self) -> u64 {
        self.phase1 + self.phase2 + self.phase3
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 {
            return fail("batch must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.ss_k > 0.0) {
            return fail("ss_k must be positive");
        }
        if !(self.beta_start >= 0.0 && self.beta_final >= self.beta_start) {
            return fail("need 0 ≤ beta_start ≤ beta_final");
        }
        if self.total_iterations() == 0 {
            return fail("at least one training iteration is required");
        }
        if self.log_every == 0 {
            return fail("log_every must be positive");
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "batch" => self.batch.to_string(),
            "learning_rate" => fmt_f64(self.learning_rate),
            "ss_k" => fmt_f64(self.ss_k),
            "seed" => self.seed.to_string(),
            "phase1" => self.phase1.to_string(),
            "phase2" => self.phase2.to_string(),
            "phase3" => self.phase3.to_string(),
            "beta_start" => fmt_f64(self.beta_start),
            "beta_final" => fmt_f64(self.beta_final),
            "naive" => self.naive.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "batch" => self.batch = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "ss_k" => self.ss_k = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "phase1" => self.phase1 = num(key, v)?,
            "phase2" => self.phase2 = num(key, v)?,
            "phase3" => self.phase3 = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_final" => self.beta_final = num(key, v)?,
            "naive" => self.naive = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in TRAIN_KEYS {
            writeln!(s, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        s
    }
}

/// A full run: model, optimization and file locations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub curves: Option<PathBuf>,
}

pub const MODEL_KEYS: [&str; 13] = [
    "resolution",
    "frames",
    "context",
    "enc_channels",
    "inf_channels",
    "masks",
    "kernel_size",
    "latent_channels",
    "latent_mode",
    "actions",
    "skip_connections",
    "instance_norm",
    "min_log_sigma",
];

pub const TRAIN_KEYS: [&str; 12] = [
    "batch",
    "learning_rate",
    "ss_k",
    "seed",
    "phase1",
    "phase2",
    "phase3",
    "beta_start",
    "beta_final",
    "naive",
    "log_every",
    "checkpoint_every",
];

pub const PATH_KEYS: [&str; 3] = ["dataset", "checkpoint", "curves"];

/// One-line description of every key, in file order.
pub const KEY_DOCS: [(&str, &str); 28] = [
    ("resolution", "frame height and width in pixels (power of two)"),
    ("frames", "frames per training video, context included"),
    ("context", "ground-truth frames given before prediction starts"),
    ("enc_channels", "conv-LSTM widths of the generator encoder, comma-separated"),
    ("inf_channels", "widths of the stride-2 inference stages, comma-separated"),
    ("masks", "number of motion kernels"),
    ("kernel_size", "motion kernel extent (odd)"),
    ("latent_channels", "channels of the 8x8 latent map"),
    ("latent_mode", "time_invariant or time_variant"),
    ("actions", "condition the generator on per-frame actions"),
    ("skip_connections", "decoder skip connections from the encoder"),
    ("instance_norm", "instance normalization after stride and decoder convolutions"),
    ("min_log_sigma", "floor applied to the posterior log standard deviation"),
    ("batch", "videos per training step"),
    ("learning_rate", "Adam step size"),
    ("ss_k", "scheduled-sampling decay constant k"),
    ("seed", "training seed (initialization, batches, latents)"),
    ("phase1", "iterations with prior latents, generator only"),
    ("phase2", "iterations with posterior latents and no KL term"),
    ("phase3", "iterations with the KL weight ramped linearly"),
    ("beta_start", "KL weight at the start of phase 3"),
    ("beta_final", "KL weight at the end of phase 3"),
    ("naive", "skip the phases: posterior latents and final KL weight throughout"),
    ("log_every", "iterations per loss-curve row"),
    ("checkpoint_every", "iterations between periodic checkpoints (0 = off)"),
    ("dataset", "training dataset file"),
    ("checkpoint", "checkpoint output path"),
    ("curves", "loss-curve CSV output path"),
];

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in entries(text)? {
            let known = match key {
                "dataset" => {
                    cfg.dataset = Some(value.into());
                    true
                }
                "checkpoint" => {
                    cfg.checkpoint = Some(value.into());
                    true
                }
                "curves" => {
                    cfg.curves = Some(value.into());
                    true
                }
                _ => cfg.model.set(key, value)? || cfg.train.set(key, value)?,
            };
            if !known {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key with its value; unset paths are omitted.
    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        s.push_str(&self.train.to_text());
        for (key, p) in PATH_KEYS.iter().zip([&self.dataset, &self.checkpoint, &self.curves]) {
            if let Some(p) = p {
                writeln!(s, "{key} = {}", p.display()).unwrap();
            }
        }
        s
    }
}

fn entries(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
        };
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(key, x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Shortest text that parses back to the same value.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
