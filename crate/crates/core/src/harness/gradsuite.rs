//! Finite-difference checks of every objective term on random toy episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::derive_seed;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::image::Image;
use crate::model::{Model, ModelConfig, PromptState};
use crate::stats::source_stats;
use crate::tta::{objective_grad_check, AlignLoss, ObjectiveTerm, TtaConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Smallest architecture that still has attention, depth-2 prompts and
/// several classes.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        d_vision: 8,
        d_text: 8,
        embed_dim: 8,
        vision_layers: 3,
        text_layers: 2,
        n_heads: 2,
        mlp_ratio: 2,
        n_classes: 3,
        n_prompt_tokens: 2,
        prompt_depth: 2,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub episode: usize,
    /// `entropy`, `align-<variant>` or `final-<variant>`.
    pub term: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub checks: Vec<TermCheck>,
    pub max_rel_error: f64,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn random_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Image {
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    Image::new(cfg.channels, cfg.image_size, cfg.image_size, data).expect("sized")
}

fn random_prompts(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<PromptState> {
    let mut m =
        |r, c, s: f64| Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-s..s)).collect());
    let text = (0..cfg.prompt_depth)
        .map(|_| m(cfg.n_prompt_tokens, cfg.d_text, 1.0))
        .collect();
    let coupling = (0..cfg.prompt_depth)
        .map(|_| m(cfg.d_text, cfg.d_vision, 0.6))
        .collect();
    PromptState::new(text, coupling)
}

/// Each episode draws a fresh model, prompts, test image, source images and
/// view seed, then checks the entropy term, the alignment term of every
/// variant and the combined objective of every variant.
pub fn run_grad_suite(episodes: usize, seed: u64) -> Result<GradSuiteReport> {
    let cfg = toy_config();
    let variants = [
        AlignLoss::L1,
        AlignLoss::L2,
        AlignLoss::Kl,
        AlignLoss::KlReverse,
        AlignLoss::Cmd(5),
    ];
    let mut checks = Vec::new();
    for e in 0..episodes {
        let es = derive_seed(seed, e as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(es);
        let model = Model::new(cfg.clone(), derive_seed(es, 1))?;
        let prompts = random_prompts(&cfg, &mut rng)?;
        let image = random_image(&cfg, &mut rng);
        let source: Vec<Image> = (0..3).map(|_| random_image(&cfg, &mut rng)).collect();
        let stats = source_stats(&model, &source, 3, false, 5, "grad-suite")?;
        let base = TtaConfig {
            n_views: 4,
            filter_ratio: 0.5,
            beta: rng.random_range(0.5..100.0),
            align_layers: vec![1, 2, 3],
            seed: es,
            ..TtaConfig::default()
        };
        let mut run = |term: ObjectiveTerm, loss: AlignLoss, name: String| -> Result<()> {
            let c = TtaConfig {
                align_loss: loss,
                ..base.clone()
            };
            let r =
                objective_grad_check(&image, &model, &prompts, Some(&stats), &c, term, FD_STEP)?;
            checks.push(TermCheck {
                episode: e,
                term: name,
                max_rel_error: r.max_rel_error,
                coordinates: r.coordinates,
            });
            Ok(())
        };
        run(ObjectiveTerm::Entropy, AlignLoss::L1, "entropy".into())?;
        for v in variants {
            run(ObjectiveTerm::Align, v, format!("align-{v}"))?;
            run(ObjectiveTerm::Final, v, format!("final-{v}"))?;
        }
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradSuiteReport {
        checks,
        max_rel_error,
    })
}
