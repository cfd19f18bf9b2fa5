//! Desk-scale frozen dual encoder with deep multi-modal prompts.
//!
//! The vision transformer sees `[CLS, vision prompts.., patches..]`; the text
//! transformer sees `SOS, text prompts.., a photo of a <cls>, EOS` under a causal
//! mask. At blocks `1..=prompt_depth` the prompt rows are overwritten with that
//! layer's prompts; deeper blocks carry them forward unchanged. Vision prompts
//! are the text prompts pushed through a per-layer linear coupling.

mod checkpoint;
mod config;
mod params;
mod pretrain;
mod prompts;
mod text;
mod vision;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::sync::OnceLock;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::ModelConfig;
pub use params::{Bound, ParamSet};
pub(crate) use pretrain::argmax;
pub use pretrain::{pretrain_backbone, train_prompts, PretrainConfig, PretrainLog};
pub use prompts::{couple, BoundPrompts, PromptState};
pub use text::{class_names, Vocab, PROMPT_SLOT, TEMPLATE};
pub use vision::{patchify, ImageEncoding, TokenMask};

use crate::autodiff::{softmax_in_place, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use params::Init;
use text::TextLayout;
use vision::VisionLayout;

/// SHA-256 of the serialized backbone (config block and frozen weights).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelHash(#[serde(with = "hex_bytes")] pub [u8; 32]);

impl fmt::Display for ModelHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ModelHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelHash({})", &hex::encode(self.0)[..16])
    }
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(D::Error::custom)?;
        v.try_into()
            .map_err(|_| D::Error::custom("hash must be 32 bytes"))
    }
}

/// Frozen backbone weights plus the architecture that interprets them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
    vision: VisionLayout,
    text: TextLayout,
    hash: OnceLock<ModelHash>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Randomly initialized (untrained) model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(config.n_classes);
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
        };
        let vision = VisionLayout::init(&mut init, &config);
        let text = TextLayout::init(&mut init, &config, &vocab);
        Ok(Self {
            config,
            vocab,
            params,
            vision,
            text,
            hash: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.hash = OnceLock::new();
        &mut self.params
    }

    /// Binds the backbone into `g`; `trainable = false` is the frozen setting.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn patch_embed(&self, g: &mut Graph, b: &Bound, image: &Image) -> Result<NodeId> {
        self.vision.patch_embed(g, b, &self.config, image)
    }

    pub fn encode_image(
        &self,
        g: &mut Graph,
        b: &Bound,
        image: &Image,
        prompts: Option<&BoundPrompts>,
    ) -> Result<ImageEncoding> {
        self.vision.forward(
            g,
            b,
            &self.config,
            image,
            prompts.map(|p| p.vision.as_slice()),
        )
    }

    pub fn encode_text(
        &self,
        g: &mut Graph,
        b: &Bound,
        class_id: usize,
        prompts: Option<&BoundPrompts>,
    ) -> Result<NodeId> {
        let (f, _) = self.text.forward(
            g,
            b,
            &self.config,
            &self.vocab,
            class_id,
            prompts.map(|p| p.text.as_slice()),
        )?;
        Ok(f)
    }

    /// Features of every class prompt stacked into `C × embed_dim`.
    pub fn encode_texts(
        &self,
        g: &mut Graph,
        b: &Bound,
        prompts: Option<&BoundPrompts>,
    ) -> Result<NodeId> {
        let feats = (0..self.config.n_classes)
            .map(|k| self.encode_text(g, b, k, prompts))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&feats)
    }

    /// `τ ·` cosine similarities between `N × e` image and `C × e` text features.
    pub fn logits(
        &self,
        g: &mut Graph,
        image_features: NodeId,
        text_features: NodeId,
    ) -> Result<NodeId> {
        let sim = g.matmul_nt(image_features, text_features)?;
        Ok(g.scale(sim, self.config.tau))
    }

    /// Class probabilities `softmax(τ · sim)`, one row per image feature.
    pub fn class_probs(
        &self,
        g: &mut Graph,
        image_features: NodeId,
        text_features: NodeId,
    ) -> Result<NodeId> {
        let logits = self.logits(g, image_features, text_features)?;
        Ok(g.softmax_rows(logits))
    }

    /// Non-differentiable prediction for one image.
    pub fn predict(&self, image: &Image, prompts: Option<&PromptState>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let bp = prompts.map(|p| p.bind(&mut g, false, false)).transpose()?;
        let text = self.encode_texts(&mut g, &b, bp.as_ref())?;
        let enc = self.encode_image(&mut g, &b, image, bp.as_ref())?;
        let probs = self.class_probs(&mut g, enc.feature, text)?;
        Ok(g.value(probs).data().to_vec())
    }

    /// Per-layer output tokens of a non-differentiable image forward pass.
    pub fn layer_tokens(
        &self,
        image: &Image,
        prompts: Option<&PromptState>,
    ) -> Result<(Vec<Tensor>, ImageEncoding)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let bp = prompts.map(|p| p.bind(&mut g, false, false)).transpose()?;
        let enc = self.encode_image(&mut g, &b, image, bp.as_ref())?;
        let tokens = enc
            .layer_tokens
            .iter()
            .map(|&id| g.value(id).clone())
            .collect();
        Ok((tokens, enc))
    }

    /// Computed once and cached; any mutable access to the weights clears it.
    pub fn backbone_hash(&self) -> ModelHash {
        *self.hash.get_or_init(|| {
            let bytes = checkpoint::backbone_bytes(self);
            ModelHash(Sha256::digest(&bytes).into())
        })
    }

    /// Prompt initialization that leaves the text branch exactly as
    /// pre-trained: layer-1 prompts are the slot-word embedding and deeper
    /// prompts are the hidden states the slots would carry anyway (they are
    /// class-independent under the causal mask). Coupling maps start random.
    pub fn default_prompts(&self, seed: u64) -> Result<PromptState> {
        let cfg = &self.config;
        let t = cfg.n_prompt_tokens;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let (_, layers) = self.text.forward(&mut g, &b, cfg, &self.vocab, 0, None)?;
        let emb = self.params.get(self.text.token_embedding_index());
        let slot = self.vocab.id(PROMPT_SLOT)?;
        let mut state = PromptState::random(cfg, seed);
        for l in 0..cfg.prompt_depth {
            let rows = if l == 0 {
                (0..t).flat_map(|_| emb.row_slice(slot).to_vec()).collect()
            } else {
                let h = g.value(layers[l - 1]);
                (1..1 + t).flat_map(|r| h.row_slice(r).to_vec()).collect()
            };
            state.set_text(l, Tensor::matrix(t, cfg.d_text, rows));
        }
        state.commit_snapshot();
        Ok(state)
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.len() {
            return Err(Error::format(format!(
                "expected {} weight arrays, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in self.params.iter().zip(other.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::format(format!(
                    "weight {n2:?} {:?} does not match expected {n1:?} {:?}",
                    t2.shape(),
                    t1.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.check_layout(&params)?;
        *model.params_mut() = params;
        Ok(model)
    }
}

/// `softmax(τ · cos(image, text_k))` over classes for L2-normalized inputs.
pub fn classify(image_feature: &[f64], text_features: &Tensor, tau: f64) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..text_features.rows())
        .map(|k| {
            tau * text_features
                .row_slice(k)
                .iter()
                .zip(image_feature)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect();
    softmax_in_place(&mut logits);
    logits
}
