//! Run configuration: strict `key = value` lines with `#` comments.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::SgdConfig;
use crate::cast_loss::{AlphaMode, LossConfig, StepConfig, SupervisionMode};
use crate::crop::{ColorJitter, CropConstraint, ViewConfig};
use crate::encoder::EncoderConfig;
use crate::error::{CastError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub phi: f64,
    pub lambda: f32,
    pub tau: f32,
    /// Key-encoder momentum.
    pub m: f32,
    /// Negative queue capacity.
    pub queue_size: usize,
    pub lr: f32,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    pub batch: usize,
    pub epochs: usize,
    /// Total optimizer steps; 0 derives the count from `epochs`.
    pub steps: usize,
    pub supervision_mode: SupervisionMode,
    pub alpha_mode: AlphaMode,
    pub eps: f32,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub max_attempts: usize,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let enc = EncoderConfig::default();
        let views = ViewConfig::default();
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            phi: views.constraint.phi,
            lambda: loss.lambda,
            tau: loss.tau,
            m: 0.99,
            queue_size: 512,
            lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            batch: 32,
            epochs: 1,
            steps: 0,
            supervision_mode: loss.supervision,
            alpha_mode: loss.alpha_mode,
            eps: loss.eps,
            input_size: enc.input_size,
            channels: enc.channels,
            embedding_dim: enc.embedding_dim,
            scale_min: views.constraint.scale_range.0,
            scale_max: views.constraint.scale_range.1,
            brightness: views.jitter.brightness,
            contrast: views.jitter.contrast,
            max_attempts: views.max_attempts,
            checkpoint_every: 500,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CastError::config(key, format!("cannot parse `{value}`")))
}

fn supervision_name(mode: SupervisionMode) -> &'static str {
    match mode {
        SupervisionMode::FullQuery => "full",
        SupervisionMode::Intersection => "intersection",
    }
}

fn alpha_name(mode: AlphaMode) -> &'static str {
    match mode {
        AlphaMode::SecondOrder => "second",
        AlphaMode::FirstOrder => "first",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "phi" => self.phi = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "K" => self.queue_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "sgd_momentum" => self.sgd_momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "supervision_mode" => {
                self.supervision_mode = match value {
                    "full" => SupervisionMode::FullQuery,
                    "intersection" => SupervisionMode::Intersection,
                    _ => return Err(CastError::config(key, format!("`{value}` is not `full` or `intersection`"))),
                }
            }
            "alpha_mode" => {
                self.alpha_mode = match value {
                    "second" => AlphaMode::SecondOrder,
                    "first" => AlphaMode::FirstOrder,
                    _ => return Err(CastError::config(key, format!("`{value}` is not `second` or `first`"))),
                }
            }
            "eps" => self.eps = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "scale_min" => self.scale_min = parse(key, value)?,
            "scale_max" => self.scale_max = parse(key, value)?,
            "brightness" => self.brightness = parse(key, value)?,
            "contrast" => self.contrast = parse(key, value)?,
            "max_attempts" => self.max_attempts = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => return Err(CastError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses config text over the defaults; unknown or repeated keys fail.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CastError::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CastError::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Every key with its effective value; parses back to an equal config.
    pub fn render(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("phi", self.phi.to_string());
        kv("lambda", self.lambda.to_string());
        kv("tau", self.tau.to_string());
        kv("m", self.m.to_string());
        kv("K", self.queue_size.to_string());
        kv("lr", self.lr.to_string());
        kv("sgd_momentum", self.sgd_momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch", self.batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps", self.steps.to_string());
        kv("supervision_mode", supervision_name(self.supervision_mode).into());
        kv("alpha_mode", alpha_name(self.alpha_mode).into());
        kv("eps", self.eps.to_string());
        kv("input_size", self.input_size.to_string());
        kv("channels", channels.join(","));
        kv("embedding_dim", self.embedding_dim.to_string());
        kv("scale_min", self.scale_min.to_string());
        kv("scale_max", self.scale_max.to_string());
        kv("brightness", self.brightness.to_string());
        kv("contrast", self.contrast.to_string());
        kv("max_attempts", self.max_attempts.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input_size: self.input_size,
            channels: self.channels.clone(),
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn views(&self) -> ViewConfig {
        ViewConfig {
            constraint: CropConstraint {
                phi: self.phi,
                scale_range: (self.scale_min, self.scale_max),
                ..CropConstraint::default()
            },
            jitter: ColorJitter {
                brightness: self.brightness,
                contrast: self.contrast,
            },
            out_size: self.input_size,
            max_attempts: self.max_attempts,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            encoder: self.encoder(),
            views: self.views(),
            loss: LossConfig {
                lambda: self.lambda,
                tau: self.tau,
                supervision: self.supervision_mode,
                eps: self.eps,
                alpha_mode: self.alpha_mode,
            },
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.sgd_momentum,
                weight_decay: self.weight_decay,
            },
            momentum: self.m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step = self.step_config();
        step.encoder.validate()?;
        step.views.constraint.validate()?;
        step.loss.validate()?;
        if !(0.0..=1.0).contains(&self.m) {
            return Err(CastError::config("m", format!("{} is outside [0, 1]", self.m)));
        }
        if self.queue_size == 0 {
            return Err(CastError::config("K", "queue capacity must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CastError::config("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(CastError::config("sgd_momentum", format!("{} is outside [0, 1)", self.sgd_momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CastError::config("weight_decay", "must be >= 0"));
        }
        if self.batch == 0 {
            return Err(CastError::config("batch", "must be positive"));
        }
        if self.steps == 0 && self.epochs == 0 {
            return Err(CastError::config("epochs", "either epochs or steps must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(CastError::config("max_attempts", "must be positive"));
        }
        if self.brightness < 0.0 || self.contrast < 0.0 {
            return Err(CastError::config("brightness", "jitter strengths must be >= 0"));
        }
        Ok(())
    }

    /// Optimizer steps for a dataset of `n` scenes (incomplete batches are dropped).
    pub fn total_steps(&self, n: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * (n / self.batch)
        }
    }
}
