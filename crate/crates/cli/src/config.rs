//! `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use wildground_core::losses::LossWeights;
use wildground_core::model::{Fusion, ModelConfig, Temporal};
use wildground_core::pointnet::{PointEncoderConfig, StageConfig};

/// Architecture size presets; individual keys override them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Small,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "small" => Ok(Self::Small),
            "tiny" => Ok(Self::Tiny),
            _ => bail!("unknown preset {s:?}"),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Small => "small",
            Self::Tiny => "tiny",
        })
    }
}

fn small(vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(vocab);
    c.dim = 96;
    c.heads = 4;
    c.ffn_dim = 128;
    c.tfi_layers = 1;
    c.decoder_layers = 2;
    c.encoder_layers = 1;
    c.queries = 8;
    c.proj_dim = 32;
    c.point = PointEncoderConfig {
        stages: vec![
            StageConfig {
                seeds: 128,
                radius: 0.8,
                neighbors: 16,
                mlp: vec![32, 64],
            },
            StageConfig {
                seeds: 32,
                radius: 1.6,
                neighbors: 16,
                mlp: vec![64, 96],
            },
        ],
        in_channels: 1,
    };
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub preset: Preset,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub point_lr: f64,
    pub weight_decay: f64,
    /// Fraction of the epochs after which rates are multiplied by `lr_decay`.
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Share of the training split held out for checkpoint selection.
    pub val_fraction: f64,
    /// Caps the training scenes used (0 = all).
    pub max_train_scenes: usize,
    /// Caps the held-out scenes evaluated per epoch (0 = all).
    pub max_val_scenes: usize,
    /// Fault injection: poisons the loss at this optimizer step.
    pub inject_nan_at: Option<u64>,
}

impl RunConfig {
    pub fn new(dataset: PathBuf, preset: Preset, vocab: usize) -> Self {
        let model = match preset {
            Preset::Desk => ModelConfig::desk(vocab),
            Preset::Small => small(vocab),
            Preset::Tiny => ModelConfig::tiny(vocab),
        };
        Self {
            dataset,
            preset,
            model,
            weights: LossWeights::default(),
            epochs: 40,
            batch_size: 8,
            lr: 1e-4,
            point_lr: 1e-3,
            weight_decay: 5e-4,
            lr_decay_at: 0.75,
            lr_decay: 0.1,
            seed: 0,
            checkpoint_every: 5,
            val_fraction: 0.1,
            max_train_scenes: 0,
            max_val_scenes: 0,
            inject_nan_at: None,
        }
    }

    /// Parses a config file; relative dataset paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let get = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let dataset = get("dataset").ok_or_else(|| anyhow!("config needs a dataset path"))?;
        let dataset = base.join(dataset);
        let dataset = std::fs::canonicalize(&dataset).unwrap_or(dataset);
        let preset: Preset = get("preset").unwrap_or("desk").parse()?;
        let vocab = match get("vocab") {
            Some(v) => v.parse().context("vocab")?,
            None => wildground_scenes::DatasetManifest::load(&dataset)
                .and_then(|m| m.vocab())
                .map(|v| v.len())
                .with_context(|| format!("reading the dataset vocabulary under {}", dataset.display()))?,
        };
        let mut cfg = Self::new(dataset, preset, vocab);
        for (k, v) in &pairs {
            if !matches!(k.as_str(), "dataset" | "preset" | "vocab") {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| anyhow!("bad value {v:?} for {key}"))
        }
        let m = &mut self.model;
        match key {
            "dim" => m.dim = p(key, value)?,
            "heads" => m.heads = p(key, value)?,
            "ffn_dim" => m.ffn_dim = p(key, value)?,
            "dropout" => m.dropout = p(key, value)?,
            "dve_layers" => m.dve_layers = p(key, value)?,
            "tfi_layers" => m.tfi_layers = p(key, value)?,
            "decoder_layers" => m.decoder_layers = p(key, value)?,
            "encoder_layers" => m.encoder_layers = p(key, value)?,
            "frames" => m.frames = p(key, value)?,
            "queries" => m.queries = p(key, value)?,
            "proj_dim" => m.proj_dim = p(key, value)?,
            "temperature" => m.temperature = p(key, value)?,
            "use_dve" => m.use_dve = p(key, value)?,
            "use_tfi" => m.use_tfi = p(key, value)?,
            "share_dve" => m.share_dve = p(key, value)?,
            "language_first" => m.language_first = p(key, value)?,
            "fusion" => m.fusion = value.parse::<Fusion>()?,
            "temporal" => m.temporal = value.parse::<Temporal>()?,
            "alpha" => self.weights.alpha = p(key, value)?,
            "beta" => self.weights.beta = p(key, value)?,
            "gamma" => self.weights.gamma = p(key, value)?,
            "lambda" => self.weights.lambda = p(key, value)?,
            "mu" => self.weights.mu = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "point_lr" => self.point_lr = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "lr_decay_at" => self.lr_decay_at = p(key, value)?,
            "lr_decay" => self.lr_decay = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "val_fraction" => self.val_fraction = p(key, value)?,
            "max_train_scenes" => self.max_train_scenes = p(key, value)?,
            "max_val_scenes" => self.max_val_scenes = p(key, value)?,
            "inject_nan_at" => self.inject_nan_at = Some(p(key, value)?),
            "dataset" => self.dataset = PathBuf::from(value),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            bail!("epochs, batch_size and checkpoint_every must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bail!("val_fraction must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.point_lr > 0.0 && self.lr_decay > 0.0) {
            bail!("learning rates and decay factor must be positive");
        }
        Ok(())
    }

    /// Epoch index from which the decayed rates apply.
    pub fn decay_epoch(&self) -> usize {
        (self.epochs as f64 * self.lr_decay_at).floor() as usize
    }

    /// Canonical text form; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("dataset", self.dataset.display().to_string());
        kv("preset", self.preset.to_string());
        kv("vocab", m.vocab.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("dropout", m.dropout.to_string());
        kv("dve_layers", m.dve_layers.to_string());
        kv("tfi_layers", m.tfi_layers.to_string());
        kv("decoder_layers", m.decoder_layers.to_string());
        kv("encoder_layers", m.encoder_layers.to_string());
        kv("frames", m.frames.to_string());
        kv("queries", m.queries.to_string());
        kv("proj_dim", m.proj_dim.to_string());
        kv("temperature", m.temperature.to_string());
        kv("use_dve", m.use_dve.to_string());
        kv("use_tfi", m.use_tfi.to_string());
        kv("share_dve", m.share_dve.to_string());
        kv("language_first", m.language_first.to_string());
        kv("fusion", m.fusion.to_string());
        kv("temporal", m.temporal.to_string());
        kv("alpha", w.alpha.to_string());
        kv("beta", w.beta.to_string());
        kv("gamma", w.gamma.to_string());
        kv("lambda", w.lambda.to_string());
        kv("mu", w.mu.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("point_lr", self.point_lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("lr_decay_at", self.lr_decay_at.to_string());
        kv("lr_decay", self.lr_decay.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("max_train_scenes", self.max_train_scenes.to_string());
        kv("max_val_scenes", self.max_val_scenes.to_string());
        if let Some(n) = self.inject_nan_at {
            kv("inject_nan_at", n.to_string());
        }
        s
    }
}

/// Splits `key = value` lines, dropping blank lines and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
