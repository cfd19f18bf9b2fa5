use rand::Rng;

use super::config::ModelConfig;
use super::params::{BlockLayout, Bound, Init};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;

/// Weight layout of the patch-based vision transformer.
#[derive(Clone, Debug)]
pub(crate) struct VisionLayout {
    patch_w: usize,
    patch_b: usize,
    cls: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    ln_post: (usize, usize),
    proj: usize,
}

/// Output of one image forward pass.
#[derive(Clone, Debug)]
pub struct ImageEncoding {
    /// `1 × embed_dim`, L2-normalized.
    pub feature: NodeId,
    /// Output tokens of every block, in order; each `tokens × d_vision`.
    pub layer_tokens: Vec<NodeId>,
    /// Prompt tokens present in each layer's token matrix (0 when prompt-free).
    pub n_prompt_tokens: usize,
    pub n_patches: usize,
}

/// Which token positions contribute to layer statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct TokenMask {
    pub include_cls: bool,
    pub include_prompts: bool,
}

impl TokenMask {
    pub const PATCHES: TokenMask = TokenMask {
        include_cls: false,
        include_prompts: false,
    };

    /// Row indices selected in a layout of `[CLS, prompts.., patches..]`.
    pub fn rows(&self, n_prompts: usize, n_patches: usize) -> Vec<usize> {
        let mut rows = Vec::with_capacity(1 + n_prompts + n_patches);
        if self.include_cls {
            rows.push(0);
        }
        if self.include_prompts {
            rows.extend(1..1 + n_prompts);
        }
        rows.extend(1 + n_prompts..1 + n_prompts + n_patches);
        rows
    }
}

impl ImageEncoding {
    pub fn mask_rows(&self, mask: TokenMask) -> Vec<usize> {
        mask.rows(self.n_prompt_tokens, self.n_patches)
    }
}

/// Splits an image into flattened `patch × patch` tiles in raster order,
/// each laid out channel-major.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        data.push(image.at(ch, py * patch + dy, px * patch + dx));
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, dim, data))
}

impl VisionLayout {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_vision;
        let pd = cfg.patch_dim();
        Self {
            patch_w: init.normal("vision.patch.w".into(), pd, d, (1.0 / pd as f64).sqrt()),
            patch_b: init.constant("vision.patch.b".into(), 1, d, 0.0),
            cls: init.normal("vision.cls".into(), 1, d, 0.1),
            pos: init.normal("vision.pos".into(), 1 + cfg.n_patches(), d, 0.1),
            blocks: (0..cfg.vision_layers)
                .map(|l| {
                    BlockLayout::init(
                        init,
                        &format!("vision.blocks.{l}"),
                        d,
                        cfg.mlp_ratio,
                        cfg.vision_layers,
                    )
                })
                .collect(),
            ln_post: init.layernorm("vision.ln_post", d),
            proj: init.normal(
                "vision.proj".into(),
                d,
                cfg.embed_dim,
                (1.0 / d as f64).sqrt(),
            ),
        }
    }

    /// Patch embedding plus positional embeddings: `M × d_vision`.
    pub fn patch_embed(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &ModelConfig,
        image: &Image,
    ) -> Result<NodeId> {
        self.check_image(cfg, image)?;
        let patches = g.constant(patchify(image, cfg.patch_size)?);
        let e = g.linear(patches, b.at(self.patch_w), Some(b.at(self.patch_b)))?;
        let pos = g.slice_rows(b.at(self.pos), 1, 1 + cfg.n_patches())?;
        g.add(e, pos)
    }

    fn check_image(&self, cfg: &ModelConfig, image: &Image) -> Result<()> {
        if image.channels() != cfg.channels
            || image.height() != cfg.image_size
            || image.width() != cfg.image_size
        {
            return Err(Error::config(format!(
                "image {}x{}x{} does not match model input {}x{}x{}",
                image.channels(),
                image.height(),
                image.width(),
                cfg.channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        Ok(())
    }

    /// Runs the encoder. `prompts`, when given, holds one `V × d_vision`
    /// node per prompted layer; layer `l` replaces the previous prompt tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &ModelConfig,
        image: &Image,
        prompts: Option<&[NodeId]>,
    ) -> Result<ImageEncoding> {
        let prompts = prompts.filter(|p| !p.is_empty());
        let m = cfg.n_patches();
        let v = if prompts.is_some() {
            cfg.n_prompt_tokens
        } else {
            0
        };
        if let Some(p) = prompts {
            if p.len() > cfg.vision_layers {
                return Err(Error::config(format!(
                    "prompt depth {} exceeds {} vision layers",
                    p.len(),
                    cfg.vision_layers
                )));
            }
            check_prompt_rows(g, p, cfg.n_prompt_tokens)?;
        }
        let patches = self.patch_embed(g, b, cfg, image)?;
        let cls_pos = g.slice_rows(b.at(self.pos), 0, 1)?;
        let cls = g.add(b.at(self.cls), cls_pos)?;
        let mut x = match prompts.and_then(|p| p.first()) {
            Some(&p0) => g.concat_rows(&[cls, p0, patches])?,
            None => g.concat_rows(&[cls, patches])?,
        };
        let mut layer_tokens = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                if let Some(&pl) = prompts.and_then(|p| p.get(l)) {
                    let head = g.slice_rows(x, 0, 1)?;
                    let tail = g.slice_rows(x, 1 + v, 1 + v + m)?;
                    x = g.concat_rows(&[head, pl, tail])?;
                }
            }
            x = block.forward(g, b, x, cfg.n_heads, false, cfg.ln_eps)?;
            layer_tokens.push(x);
        }
        let cls_out = g.slice_rows(x, 0, 1)?;
        let h = g.layernorm(
            cls_out,
            b.at(self.ln_post.0),
            b.at(self.ln_post.1),
            cfg.ln_eps,
        )?;
        let f = g.matmul(h, b.at(self.proj))?;
        let feature = g.normalize_rows(f);
        Ok(ImageEncoding {
            feature,
            layer_tokens,
            n_prompt_tokens: v,
            n_patches: m,
        })
    }
}

pub(crate) fn check_prompt_rows(g: &Graph, prompts: &[NodeId], expected: usize) -> Result<()> {
    for &p in prompts {
        let rows = g.value(p).rows();
        if rows != expected {
            return Err(Error::config(format!(
                "prompt matrix has {rows} tokens, model expects {expected}"
            )));
        }
    }
    Ok(())
}
