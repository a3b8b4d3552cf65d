//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::decode::BeamConfig;
use crate::error::{Error, Result};
use crate::model::{LossWeights, Mode, ModelConfig, TaskFlags};
use crate::optim::AdamConfig;
use crate::text::END;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub tokenizer_layers: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub max_summary_tokens: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub beam_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub k_select: usize,
    pub mode: Mode,
    pub tasks: TaskFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 64,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            tokenizer_layers: 2,
            patch_size: 8,
            image_size: 32,
            vocab_size: 512,
            max_tokens: 128,
            max_summary_tokens: 48,
            lr: 3e-4,
            warmup_steps: 1000,
            batch_size: 64,
            epochs: 10,
            seed: 1,
            beam_size: 3,
            min_len: 5,
            max_len: 40,
            k_select: 3,
            mode: Mode::Joint,
            tasks: TaskFlags::ALL,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "d_model",
    "n_heads",
    "enc_layers",
    "dec_layers",
    "tokenizer_layers",
    "patch_size",
    "image_size",
    "vocab_size",
    "max_tokens",
    "max_summary_tokens",
    "lr",
    "warmup_steps",
    "batch_size",
    "epochs",
    "seed",
    "beam_size",
    "min_len",
    "max_len",
    "k_select",
    "mode",
    "tasks",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "d_model" => self.d_model.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "enc_layers" => self.enc_layers.to_string(),
            "dec_layers" => self.dec_layers.to_string(),
            "tokenizer_layers" => self.tokenizer_layers.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "image_size" => self.image_size.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "max_tokens" => self.max_tokens.to_string(),
            "max_summary_tokens" => self.max_summary_tokens.to_string(),
            "lr" => format!("{:?}", self.lr),
            "warmup_steps" => self.warmup_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "beam_size" => self.beam_size.to_string(),
            "min_len" => self.min_len.to_string(),
            "max_len" => self.max_len.to_string(),
            "k_select" => self.k_select.to_string(),
            "mode" => self.mode.to_string(),
            "tasks" => self.tasks.to_string(),
            _ => return None,
        })
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "dec_layers" => self.dec_layers = parse(key, v)?,
            "tokenizer_layers" => self.tokenizer_layers = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "max_tokens" => self.max_tokens = parse(key, v)?,
            "max_summary_tokens" => self.max_summary_tokens = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "beam_size" => self.beam_size = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "k_select" => self.k_select = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "tasks" => self.tasks = v.parse()?,
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let record = |message: String| Error::Record { line: n + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| record(format!("expected key=value, found {line:?}")))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(record(format!("duplicate key {k}")));
            }
            cfg.set(k, v).map_err(|e| record(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(self.vocab_size).validate()?;
        self.beam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.k_select == 0 {
            return Err(Error::Config("k_select must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.max_len + 1 > self.max_summary_tokens {
            return Err(Error::Config(format!(
                "max_len {} needs max_summary_tokens of at least {}",
                self.max_len,
                self.max_len + 1
            )));
        }
        Ok(())
    }

    /// Keys whose values differ from `other`.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.into_iter().filter(|k| self.get(k) != other.get(k)).collect()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            vocab_size,
            max_tokens: self.max_tokens,
            max_summary_tokens: self.max_summary_tokens,
            patch_size: self.patch_size,
            image_size: self.image_size,
            tokenizer_layers: self.tokenizer_layers,
            mode: self.mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            flags: self.tasks,
            weights: LossWeights::default(),
            adam: AdamConfig {
                base_lr: self.lr,
                warmup_steps: self.warmup_steps,
                ..AdamConfig::default()
            },
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            beam: self.beam_size,
            min_len: self.min_len,
            max_len: self.max_len,
            end: END,
        }
    }
}
