//! Flat `key=value` configuration covering the model, training, data and
//! adaptation knobs. Blank lines and `#` comments are ignored; later
//! assignments override earlier ones.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainConfig};
use crate::tta::{OptimizerKind, TtaConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    /// Root seed; data, initialization, training and views derive from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub tta: TtaConfig,
    /// Backbone training.
    pub pretrain: PretrainConfig,
    /// Source prompt fitting on the frozen backbone.
    pub prompt_train: PretrainConfig,
    pub synth: SynthConfig,
    pub stats_batch_size: usize,
    /// Highest central moment stored in source statistics.
    pub stats_max_order: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            tta: TtaConfig::default(),
            pretrain: PretrainConfig::default(),
            prompt_train: PretrainConfig {
                epochs: 2,
                lr: 1e-2,
                ..PretrainConfig::default()
            },
            synth: SynthConfig::default(),
            stats_batch_size: 32,
            stats_max_order: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

/// Layer sets are written `1,2,3` or `1+2+3`; an empty value is the empty set.
pub fn parse_layers(value: &str) -> Result<Vec<usize>> {
    value
        .split([',', '+'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse("align_layers", s))
        .collect()
}

fn layers_text(layers: &[usize]) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::AdamW => "adamw",
        OptimizerKind::Sgd => "sgd",
    }
}

fn set_pretrain(cfg: &mut PretrainConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "epochs" => cfg.epochs = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "augment" => cfg.augment = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl Settings {
    /// Assigns one key. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        let t = &mut self.tta;
        let m = &mut self.model;
        let s = &mut self.synth;
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
            }
            "beta" => t.beta = parse(key, value)?,
            "n_views" => t.n_views = parse(key, value)?,
            "filter_ratio" => t.filter_ratio = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "n_steps" => t.n_steps = parse(key, value)?,
            "align_layers" => t.align_layers = parse_layers(value)?,
            "align_loss" => t.align_loss = value.parse()?,
            "mode" => t.mode = value.parse()?,
            "prompt_reg_lambda" => t.prompt_reg_lambda = parse(key, value)?,
            "optimizer" => {
                t.optimizer = match value.to_ascii_lowercase().as_str() {
                    "adamw" => OptimizerKind::AdamW,
                    "sgd" => OptimizerKind::Sgd,
                    _ => {
                        return Err(Error::config(format!(
                            "optimizer: expected adamw or sgd, got {value:?}"
                        )))
                    }
                }
            }
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "include_cls" => t.include_cls = parse_bool(key, value)?,
            "freeze_coupling" => t.freeze_coupling = parse_bool(key, value)?,
            "bag_size" => t.bag_size = parse(key, value)?,
            "crop_scale_min" => t.augment.scale_min = parse(key, value)?,
            "crop_scale_max" => t.augment.scale_max = parse(key, value)?,
            "crop_ratio_min" => t.augment.ratio_min = parse(key, value)?,
            "crop_ratio_max" => t.augment.ratio_max = parse(key, value)?,
            "flip_prob" => t.augment.flip_prob = parse(key, value)?,
            "image_size" => {
                m.image_size = parse(key, value)?;
                s.image_size = m.image_size;
            }
            "channels" => {
                m.channels = parse(key, value)?;
                s.channels = m.channels;
            }
            "n_classes" => {
                m.n_classes = parse(key, value)?;
                s.n_classes = m.n_classes;
            }
            "patch_size" => m.patch_size = parse(key, value)?,
            "d_vision" => m.d_vision = parse(key, value)?,
            "d_text" => m.d_text = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "vision_layers" => m.vision_layers = parse(key, value)?,
            "text_layers" => m.text_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "n_prompt_tokens" => m.n_prompt_tokens = parse(key, value)?,
            "prompt_depth" => m.prompt_depth = parse(key, value)?,
            "tau" => m.tau = parse(key, value)?,
            "ln_eps" => m.ln_eps = parse(key, value)?,
            "n_train" => s.n_train = parse(key, value)?,
            "n_val" => s.n_val = parse(key, value)?,
            "n_test" => s.n_test = parse(key, value)?,
            "freq_min" => s.freq_min = parse(key, value)?,
            "freq_max" => s.freq_max = parse(key, value)?,
            "noise_std" => s.noise_std = parse(key, value)?,
            "shift" => s.shift.kind = value.parse()?,
            "shift_magnitude" => s.shift.magnitude = parse(key, value)?,
            "shift_seed" => s.shift.seed = parse(key, value)?,
            "stats_batch_size" => self.stats_batch_size = parse(key, value)?,
            "stats_max_order" => self.stats_max_order = parse(key, value)?,
            _ => {
                let handled = if let Some(f) = key.strip_prefix("pretrain_") {
                    set_pretrain(&mut self.pretrain, f, key, value)?
                } else if let Some(f) = key.strip_prefix("prompt_") {
                    set_pretrain(&mut self.prompt_train, f, key, value)?
                } else {
                    false
                };
                if !handled {
                    return Err(Error::config(format!("unknown setting {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value`.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Applies every assignment of a settings file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line)
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    /// Every key with its current value; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (t, m, s) = (&self.tta, &self.model, &self.synth);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("beta", t.beta.to_string());
        kv("n_views", t.n_views.to_string());
        kv("filter_ratio", t.filter_ratio.to_string());
        kv("lr", t.lr.to_string());
        kv("n_steps", t.n_steps.to_string());
        kv("align_layers", layers_text(&t.align_layers));
        kv("align_loss", t.align_loss.to_string());
        kv("mode", t.mode.to_string());
        kv("prompt_reg_lambda", t.prompt_reg_lambda.to_string());
        kv("optimizer", optimizer_name(t.optimizer).into());
        kv("weight_decay", t.weight_decay.to_string());
        kv("include_cls", t.include_cls.to_string());
        kv("freeze_coupling", t.freeze_coupling.to_string());
        kv("bag_size", t.bag_size.to_string());
        kv("crop_scale_min", t.augment.scale_min.to_string());
        kv("crop_scale_max", t.augment.scale_max.to_string());
        kv("crop_ratio_min", t.augment.ratio_min.to_string());
        kv("crop_ratio_max", t.augment.ratio_max.to_string());
        kv("flip_prob", t.augment.flip_prob.to_string());
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("n_classes", m.n_classes.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("d_vision", m.d_vision.to_string());
        kv("d_text", m.d_text.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("vision_layers", m.vision_layers.to_string());
        kv("text_layers", m.text_layers.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("n_prompt_tokens", m.n_prompt_tokens.to_string());
        kv("prompt_depth", m.prompt_depth.to_string());
        kv("tau", m.tau.to_string());
        kv("ln_eps", m.ln_eps.to_string());
        for (prefix, p) in [("pretrain", &self.pretrain), ("prompt", &self.prompt_train)] {
            kv(&format!("{prefix}_epochs"), p.epochs.to_string());
            kv(&format!("{prefix}_batch_size"), p.batch_size.to_string());
            kv(&format!("{prefix}_lr"), p.lr.to_string());
            kv(
                &format!("{prefix}_weight_decay"),
                p.weight_decay.to_string(),
            );
            kv(&format!("{prefix}_augment"), p.augment.to_string());
        }
        kv("n_train", s.n_train.to_string());
        kv("n_val", s.n_val.to_string());
        kv("n_test", s.n_test.to_string());
        kv("freq_min", s.freq_min.to_string());
        kv("freq_max", s.freq_max.to_string());
        kv("noise_std", s.noise_std.to_string());
        kv("shift", s.shift.kind.to_string());
        kv("shift_magnitude", s.shift.magnitude.to_string());
        kv("shift_seed", s.shift.seed.to_string());
        kv("stats_batch_size", self.stats_batch_size.to_string());
        kv("stats_max_order", self.stats_max_order.to_string());
        out
    }

    /// Adaptation config with the view seed taken from the root seed.
    pub fn tta_config(&self) -> TtaConfig {
        TtaConfig {
            seed: self.seed,
            ..self.tta.clone()
        }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, 0x100)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, 0x101),
            ..self.pretrain.clone()
        }
    }

    pub fn prompt_seed(&self) -> u64 {
        derive_seed(self.seed, 0x102)
    }

    pub fn prompt_train_config(&self) -> PretrainConfig {
        PretrainConfig {
            seed: derive_seed(self.seed, 0x103),
            ..self.prompt_train.clone()
        }
    }

    /// Checks the model and data blocks.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.tta.validate(self.model.vision_layers)
    }
}
