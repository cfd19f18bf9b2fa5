use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the dual encoder and its prompt slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side length `H = W`.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub d_text: usize,
    /// Width of the joint image/text feature space.
    pub embed_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    /// Prompt tokens per prompted layer (`T` text, `V` vision; equal here).
    pub n_prompt_tokens: usize,
    /// Prompts are injected at blocks `1..=prompt_depth`.
    pub prompt_depth: usize,
    /// Inverse temperature applied to cosine similarities.
    pub tau: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            patch_size: 8,
            d_vision: 64,
            d_text: 64,
            embed_dim: 64,
            vision_layers: 6,
            text_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            n_classes: 8,
            n_prompt_tokens: 2,
            prompt_depth: 3,
            tau: 100.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Number of patch tokens `M`.
    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Tokens per vision layer when prompted: CLS + prompts + patches.
    pub fn vision_tokens(&self, prompted: bool) -> usize {
        1 + if prompted { self.n_prompt_tokens } else { 0 } + self.n_patches()
    }

    /// Length of a tokenized class prompt: SOS, prompt slots, the four template
    /// words, the class word, EOS.
    pub fn text_len(&self) -> usize {
        self.n_prompt_tokens + 7
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.n_heads == 0 || self.mlp_ratio == 0 {
            return fail("channels, n_heads and mlp_ratio must be positive".into());
        }
        for (name, d) in [("d_vision", self.d_vision), ("d_text", self.d_text)] {
            if d < 2 || d % self.n_heads != 0 {
                return fail(format!(
                    "{name}={d} must be >= 2 and divisible by n_heads={}",
                    self.n_heads
                ));
            }
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.vision_layers == 0 || self.text_layers == 0 {
            return fail("encoders need at least one layer".into());
        }
        if self.prompt_depth > self.vision_layers || self.prompt_depth > self.text_layers {
            return fail(format!(
                "prompt_depth {} exceeds encoder depth (vision {}, text {})",
                self.prompt_depth, self.vision_layers, self.text_layers
            ));
        }
        if self.n_classes < 2 {
            return fail("need at least two classes".into());
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) || self.ln_eps <= 0.0 {
            return fail("tau must be finite and non-negative, ln_eps positive".into());
        }
        Ok(())
    }
}
