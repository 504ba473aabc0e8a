//! Flat key=value run configuration. Unknown keys are rejected so typos in
//! config files or `--set` overrides fail loudly.

use crate::episodes::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::vit::ViTConfig;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Backbone dimensions.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub upsampler_hidden: usize,
    // Prompting.
    pub bg_regions: usize,
    pub prompt_tokens: usize,
    pub pool_size: usize,
    pub shots: usize,
    // Losses.
    pub tau: f64,
    pub lambda: f64,
    pub pair_limit: usize,
    // Optimizer.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    // Schedule.
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    // Run identity and paths.
    pub seed: u64,
    pub data_dir: String,
    pub out_dir: String,
    pub checkpoint: String,
    pub extractor_checkpoint: String,
    // Dataset generation.
    pub base_classes: usize,
    pub novel_classes: usize,
    pub images_per_base: usize,
    pub images_per_novel: usize,
    pub fg_min: f64,
    pub fg_max: f64,
    // Mechanism toggles and ablation.
    pub sync: bool,
    pub variants: String,
    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 64,
            patch_size: 8,
            channels: 32,
            blocks: 2,
            heads: 4,
            mlp_hidden: 128,
            key_dim: 32,
            value_dim: 32,
            upsampler_hidden: 64,
            bg_regions: 3,
            prompt_tokens: 4,
            pool_size: 16,
            shots: 1,
            tau: 0.1,
            lambda: 2e-2,
            pair_limit: 65_536,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-5,
            epochs: 10,
            episodes_per_epoch: 500,
            eval_episodes: 200,
            seed: 0,
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
            checkpoint: String::new(),
            extractor_checkpoint: String::new(),
            base_classes: 3,
            novel_classes: 2,
            images_per_base: 200,
            images_per_novel: 50,
            fg_min: 0.05,
            fg_max: 0.60,
            sync: true,
            variants: String::new(),
            ablate_seeds: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config {
        reason: format!("cannot parse {key} = {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config {
            reason: format!("cannot parse {key} = {other:?} as bool"),
        }),
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "key_dim" => self.key_dim = parse(key, value)?,
            "value_dim" => self.value_dim = parse(key, value)?,
            "upsampler_hidden" => self.upsampler_hidden = parse(key, value)?,
            "bg_regions" => self.bg_regions = parse(key, value)?,
            "prompt_tokens" => self.prompt_tokens = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "pair_limit" => self.pair_limit = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data_dir" => self.data_dir = value.trim().to_string(),
            "out_dir" => self.out_dir = value.trim().to_string(),
            "checkpoint" => self.checkpoint = value.trim().to_string(),
            "extractor_checkpoint" => self.extractor_checkpoint = value.trim().to_string(),
            "base_classes" => self.base_classes = parse(key, value)?,
            "novel_classes" => self.novel_classes = parse(key, value)?,
            "images_per_base" => self.images_per_base = parse(key, value)?,
            "images_per_novel" => self.images_per_novel = parse(key, value)?,
            "fg_min" => self.fg_min = parse(key, value)?,
            "fg_max" => self.fg_max = parse(key, value)?,
            "sync" => self.sync = parse_bool(key, value)?,
            "variants" => self.variants = value.trim().to_string(),
            "ablate_seeds" => self.ablate_seeds = parse(key, value)?,
            other => {
                return Err(Error::Config {
                    reason: format!("unknown config key {other:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                reason: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Canonical key = value listing; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", self.image_size.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("channels", self.channels.to_string());
        kv("blocks", self.blocks.to_string());
        kv("heads", self.heads.to_string());
        kv("mlp_hidden", self.mlp_hidden.to_string());
        kv("key_dim", self.key_dim.to_string());
        kv("value_dim", self.value_dim.to_string());
        kv("upsampler_hidden", self.upsampler_hidden.to_string());
        kv("bg_regions", self.bg_regions.to_string());
        kv("prompt_tokens", self.prompt_tokens.to_string());
        kv("pool_size", self.pool_size.to_string());
        kv("shots", self.shots.to_string());
        kv("tau", self.tau.to_string());
        kv("lambda", self.lambda.to_string());
        kv("pair_limit", self.pair_limit.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("episodes_per_epoch", self.episodes_per_epoch.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.clone());
        kv("out_dir", self.out_dir.clone());
        kv("checkpoint", self.checkpoint.clone());
        kv("extractor_checkpoint", self.extractor_checkpoint.clone());
        kv("base_classes", self.base_classes.to_string());
        kv("novel_classes", self.novel_classes.to_string());
        kv("images_per_base", self.images_per_base.to_string());
        kv("images_per_novel", self.images_per_novel.to_string());
        kv("fg_min", self.fg_min.to_string());
        kv("fg_max", self.fg_max.to_string());
        kv("sync", self.sync.to_string());
        kv("variants", self.variants.clone());
        kv("ablate_seeds", self.ablate_seeds.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            blocks: self.blocks,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vit: self.vit_config(),
            upsampler_hidden: self.upsampler_hidden,
            prompt_tokens: self.prompt_tokens,
            pool_size: self.pool_size,
            bg_regions: self.bg_regions,
            shots: self.shots,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
            pair_subsample_limit: self.pair_limit,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            image_size: self.image_size,
            base_classes: self.base_classes,
            novel_classes: self.novel_classes,
            images_per_base: self.images_per_base,
            images_per_novel: self.images_per_novel,
            fg_min: self.fg_min,
            fg_max: self.fg_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        if self.fg_min < 0.0 || self.fg_max > 1.0 || self.fg_min >= self.fg_max {
            return Err(Error::Config {
                reason: format!("bad foreground band [{}, {}]", self.fg_min, self.fg_max),
            });
        }
        Ok(())
    }
}
