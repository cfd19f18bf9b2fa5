use rand::Rng;

use super::config::ModelConfig;
use super::params::{BlockLayout, Bound, Init};
use super::vision::check_prompt_rows;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Class-name words available to the synthetic vocabulary.
const CLASS_WORDS: [&str; 16] = [
    "ripple", "stripe", "wave", "lattice", "braid", "comb", "grate", "fringe", "ridge", "furrow",
    "weave", "zigzag", "slat", "fiber", "plank", "crease",
];

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
/// Placeholder word occupying the prompt slots of the template.
pub const PROMPT_SLOT: &str = "X";
pub const TEMPLATE: &str = "a photo of a";

/// Closed whitespace-tokenized vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    n_classes: usize,
}

const FIXED_WORDS: [&str; 6] = [SOS, EOS, PROMPT_SLOT, "a", "photo", "of"];

impl Vocab {
    pub fn new(n_classes: usize) -> Self {
        let mut words: Vec<String> = FIXED_WORDS.iter().map(|w| w.to_string()).collect();
        words.extend(class_names(n_classes));
        Self { words, n_classes }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Lookup(format!("word {word:?} not in vocabulary")))
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn class_name(&self, class_id: usize) -> Result<&str> {
        if class_id >= self.n_classes {
            return Err(Error::Lookup(format!(
                "class id {class_id} out of range for {} classes",
                self.n_classes
            )));
        }
        Ok(&self.words[FIXED_WORDS.len() + class_id])
    }

    /// Token ids of `SOS, X × n_slots, a photo of a <cls>, EOS`.
    pub fn class_sequence(&self, class_id: usize, n_slots: usize) -> Result<Vec<usize>> {
        let name = self.class_name(class_id)?;
        let mut ids = vec![self.id(SOS)?];
        ids.extend(std::iter::repeat_n(self.id(PROMPT_SLOT)?, n_slots));
        ids.extend(self.tokenize(&format!("{TEMPLATE} {name}"))?);
        ids.push(self.id(EOS)?);
        Ok(ids)
    }
}

pub fn class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes)
        .map(|k| match CLASS_WORDS.get(k) {
            Some(w) => w.to_string(),
            None => format!("class{k}"),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct TextLayout {
    tok_emb: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    ln_final: (usize, usize),
    proj: usize,
}

impl TextLayout {
    pub fn init<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, vocab: &Vocab) -> Self {
        let d = cfg.d_text;
        Self {
            tok_emb: init.normal("text.token_embedding".into(), vocab.len(), d, 0.5),
            pos: init.normal("text.pos".into(), cfg.text_len(), d, 0.1),
            blocks: (0..cfg.text_layers)
                .map(|l| {
                    BlockLayout::init(
                        init,
                        &format!("text.blocks.{l}"),
                        d,
                        cfg.mlp_ratio,
                        cfg.text_layers,
                    )
                })
                .collect(),
            ln_final: init.layernorm("text.ln_final", d),
            proj: init.normal(
                "text.proj".into(),
                d,
                cfg.embed_dim,
                (1.0 / d as f64).sqrt(),
            ),
        }
    }

    pub fn token_embedding_index(&self) -> usize {
        self.tok_emb
    }

    /// Encodes one class prompt; returns the `1 × embed_dim` normalized EOS
    /// feature together with every block's output tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        cfg: &ModelConfig,
        vocab: &Vocab,
        class_id: usize,
        prompts: Option<&[NodeId]>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let prompts = prompts.filter(|p| !p.is_empty());
        let t = cfg.n_prompt_tokens;
        if let Some(p) = prompts {
            if p.len() > cfg.text_layers {
                return Err(Error::config(format!(
                    "prompt depth {} exceeds {} text layers",
                    p.len(),
                    cfg.text_layers
                )));
            }
            check_prompt_rows(g, p, t)?;
        }
        let ids = vocab.class_sequence(class_id, t)?;
        let len = ids.len();
        let mut x = g.select_rows(b.at(self.tok_emb), &ids)?;
        if let Some(&p0) = prompts.and_then(|p| p.first()) {
            x = self.replace_slots(g, x, p0, t, len)?;
        }
        x = g.add(x, b.at(self.pos))?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                if let Some(&pl) = prompts.and_then(|p| p.get(l)) {
                    x = self.replace_slots(g, x, pl, t, len)?;
                }
            }
            x = block.forward(g, b, x, cfg.n_heads, true, cfg.ln_eps)?;
            layers.push(x);
        }
        let eos = g.slice_rows(x, len - 1, len)?;
        let h = g.layernorm(
            eos,
            b.at(self.ln_final.0),
            b.at(self.ln_final.1),
            cfg.ln_eps,
        )?;
        let f = g.matmul(h, b.at(self.proj))?;
        Ok((g.normalize_rows(f), layers))
    }

    fn replace_slots(
        &self,
        g: &mut Graph,
        x: NodeId,
        prompt: NodeId,
        t: usize,
        len: usize,
    ) -> Result<NodeId> {
        let head = g.slice_rows(x, 0, 1)?;
        let tail = g.slice_rows(x, 1 + t, len)?;
        g.concat_rows(&[head, prompt, tail])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_sequence_layout() {
        let v = Vocab::new(8);
        let ids = v.class_sequence(2, 2).unwrap();
        let words: Vec<&str> = ids.iter().map(|&i| v.words[i].as_str()).collect();
        assert_eq!(
            words,
            ["<sos>", "X", "X", "a", "photo", "of", "a", "wave", "<eos>"]
        );
    }

    #[test]
    fn unknown_class_is_lookup_error() {
        let v = Vocab::new(4);
        assert!(matches!(v.class_sequence(4, 2), Err(Error::Lookup(_))));
        assert!(matches!(
            v.tokenize("a photo of a unicorn"),
            Err(Error::Lookup(_))
        ));
    }
}
