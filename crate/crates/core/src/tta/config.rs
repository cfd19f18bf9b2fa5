use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::{OptimizerConfig, OptimizerKind};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};

/// Distance between test-time and source token statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignLoss {
    /// `‖μ − μ̂‖₁ + ‖σ² − σ̂²‖₁`.
    L1,
    /// `‖μ − μ̂‖₂² + ‖σ² − σ̂²‖₂²`.
    L2,
    /// Channel-mean of `KL(N(μ, σ²) ‖ N(μ̂, σ̂²))`, test against source.
    Kl,
    /// Channel-mean of `KL(N(μ̂, σ̂²) ‖ N(μ, σ²))`, source against test.
    KlReverse,
    /// L1 plus `‖m_k − m̂_k‖₁` for central moments `k = 3..=K`.
    Cmd(usize),
}

impl AlignLoss {
    /// Highest central-moment order the variant needs from the source.
    pub fn max_order(&self) -> usize {
        match self {
            AlignLoss::Cmd(k) => *k,
            _ => 2,
        }
    }
}

impl fmt::Display for AlignLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignLoss::L1 => f.write_str("l1"),
            AlignLoss::L2 => f.write_str("l2"),
            AlignLoss::Kl => f.write_str("kl"),
            AlignLoss::KlReverse => f.write_str("kl-reverse"),
            AlignLoss::Cmd(k) => write!(f, "cmd{k}"),
        }
    }
}

impl FromStr for AlignLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "l1" => Ok(AlignLoss::L1),
            "l2" => Ok(AlignLoss::L2),
            "kl" => Ok(AlignLoss::Kl),
            "kl-reverse" => Ok(AlignLoss::KlReverse),
            _ => lower
                .strip_prefix("cmd")
                .map(|k| k.trim_start_matches('-'))
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 2)
                .map(AlignLoss::Cmd)
                .ok_or_else(|| {
                    Error::config(format!(
                        "unknown alignment loss {s:?} (l1, l2, kl, kl-reverse, cmdK)"
                    ))
                }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Prompts and optimizer state reset before every sample.
    Episodic,
    /// Prompts persist across samples.
    Continuous,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Episodic => "episodic",
            Mode::Continuous => "continuous",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "episodic" => Ok(Mode::Episodic),
            "continuous" => Ok(Mode::Continuous),
            _ => Err(Error::config(format!(
                "unknown mode {s:?} (episodic, continuous)"
            ))),
        }
    }
}

/// Every test-time adaptation hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    /// Weight of the alignment term.
    pub beta: f64,
    /// Views per sample, the original included.
    pub n_views: usize,
    /// Fraction of lowest-entropy views kept for the entropy term.
    pub filter_ratio: f64,
    pub lr: f64,
    pub n_steps: usize,
    /// 1-based vision layers whose statistics are aligned.
    pub align_layers: Vec<usize>,
    pub align_loss: AlignLoss,
    pub mode: Mode,
    /// Weight of `‖p − p_prev‖²` in continuous mode.
    pub prompt_reg_lambda: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Pool CLS tokens into the statistics as well as patches.
    pub include_cls: bool,
    /// Keep the coupling maps fixed and adapt text prompts only.
    pub freeze_coupling: bool,
    /// Test samples (the current one included) whose views feed the statistics.
    pub bag_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            beta: 100.0,
            n_views: 64,
            filter_ratio: 0.1,
            lr: 5e-4,
            n_steps: 1,
            align_layers: vec![1, 2, 3],
            align_loss: AlignLoss::L1,
            mode: Mode::Episodic,
            prompt_reg_lambda: 0.0,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.0,
            include_cls: false,
            freeze_coupling: false,
            bag_size: 1,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TtaConfig {
    /// Learning rate used outside the fine-grained setting.
    pub const COARSE_LR: f64 = 0.04;

    /// Checks ranges; `n_layers` is the vision encoder depth.
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.filter_ratio > 0.0 && self.filter_ratio <= 1.0) {
            return fail(format!(
                "filter_ratio must lie in (0, 1], got {}",
                self.filter_ratio
            ));
        }
        if self.n_views == 0 {
            return fail("n_views must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return fail("lr and weight_decay must be non-negative".into());
        }
        if !(self.prompt_reg_lambda >= 0.0) {
            return fail("prompt_reg_lambda must be non-negative".into());
        }
        if self.bag_size == 0 {
            return fail("bag_size must be at least 1".into());
        }
        if let Some(&l) = self.align_layers.iter().find(|&&l| l == 0 || l > n_layers) {
            return fail(format!("align layer {l} outside 1..={n_layers}"));
        }
        if let AlignLoss::Cmd(k) = self.align_loss {
            if k < 2 {
                return fail("CMD order must be at least 2".into());
            }
        }
        self.augment.validate()
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::AdamW => OptimizerConfig::adamw(self.lr, self.weight_decay),
            OptimizerKind::Sgd => OptimizerConfig {
                weight_decay: self.weight_decay,
                ..OptimizerConfig::sgd(self.lr)
            },
        }
    }

    /// Number of views the confidence filter keeps.
    pub fn kept_views(&self) -> usize {
        filter_count(self.filter_ratio, self.n_views)
    }
}

/// `max(1, ⌊ρ·n⌋)`, with a 1e-9 guard so products such as `0.29 · 100`
/// that land just below an integer in floating point still round down to it.
pub fn filter_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}
