use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Learnable multi-modal prompts: one `T × d_text` text prompt and one
/// `d_text × d_vision` coupling map per prompted layer. Vision prompts are
/// always derived as `text · coupling` and never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    text: Vec<Tensor>,
    coupling: Vec<Tensor>,
    init_text: Vec<Tensor>,
    init_coupling: Vec<Tensor>,
}

/// Prompt parameters bound into a graph.
#[derive(Clone, Debug)]
pub struct BoundPrompts {
    pub text: Vec<NodeId>,
    pub coupling: Vec<NodeId>,
    /// Derived `V × d_vision` vision prompts, one per prompted layer.
    pub vision: Vec<NodeId>,
}

impl BoundPrompts {
    /// Leaf ids in the same order as [`PromptState::tensors`].
    pub fn leaves(&self) -> Vec<NodeId> {
        self.text.iter().chain(&self.coupling).copied().collect()
    }

    /// Derives the vision prompts from already-bound text and coupling nodes.
    pub fn from_nodes(g: &mut Graph, text: Vec<NodeId>, coupling: Vec<NodeId>) -> Result<Self> {
        if text.len() != coupling.len() {
            return Err(Error::config(format!(
                "{} text prompts but {} coupling maps",
                text.len(),
                coupling.len()
            )));
        }
        let vision = text
            .iter()
            .zip(&coupling)
            .map(|(&t, &w)| couple(g, t, w))
            .collect::<Result<_>>()?;
        Ok(Self {
            text,
            coupling,
            vision,
        })
    }
}

/// Linear coupling `p_v = p_t · W`.
pub fn couple(g: &mut Graph, text_prompt: NodeId, coupling: NodeId) -> Result<NodeId> {
    g.matmul(text_prompt, coupling).map_err(|e| match e {
        Error::Dimension { lhs, rhs, .. } => Error::config(format!(
            "coupling expects d_text rows: prompt {lhs:?} vs coupling {rhs:?}"
        )),
        other => other,
    })
}

impl PromptState {
    pub fn new(text: Vec<Tensor>, coupling: Vec<Tensor>) -> Result<Self> {
        if text.len() != coupling.len() {
            return Err(Error::config(format!(
                "{} text prompts but {} coupling maps",
                text.len(),
                coupling.len()
            )));
        }
        for (t, w) in text.iter().zip(&coupling) {
            if t.cols() != w.rows() {
                return Err(Error::config(format!(
                    "text prompt {:?} incompatible with coupling {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        Ok(Self {
            init_text: text.clone(),
            init_coupling: coupling.clone(),
            text,
            coupling,
        })
    }

    /// Random initialization: small Gaussian text prompts and coupling maps
    /// with `1/sqrt(d_text)` scale.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pt = Normal::new(0.0, 0.5).expect("std");
        let pw = Normal::new(0.0, (1.0 / cfg.d_text as f64).sqrt()).expect("std");
        let text = (0..cfg.prompt_depth)
            .map(|_| {
                let data = (0..cfg.n_prompt_tokens * cfg.d_text)
                    .map(|_| pt.sample(&mut rng))
                    .collect();
                Tensor::matrix(cfg.n_prompt_tokens, cfg.d_text, data)
            })
            .collect();
        let coupling = (0..cfg.prompt_depth)
            .map(|_| {
                let data = (0..cfg.d_text * cfg.d_vision)
                    .map(|_| pw.sample(&mut rng))
                    .collect();
                Tensor::matrix(cfg.d_text, cfg.d_vision, data)
            })
            .collect();
        Self::new(text, coupling).expect("consistent shapes")
    }

    pub fn depth(&self) -> usize {
        self.text.len()
    }

    pub fn text(&self) -> &[Tensor] {
        &self.text
    }

    pub fn coupling(&self) -> &[Tensor] {
        &self.coupling
    }

    /// All learnable tensors: text prompts first, then coupling maps.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.text.iter().chain(&self.coupling).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.text
            .iter_mut()
            .chain(self.coupling.iter_mut())
            .collect()
    }

    pub fn set_text(&mut self, layer: usize, t: Tensor) {
        self.text[layer] = t;
    }

    pub fn set_coupling(&mut self, layer: usize, w: Tensor) {
        self.coupling[layer] = w;
    }

    /// Restores the initial snapshot bit-exactly.
    pub fn reset(&mut self) {
        self.text.clone_from(&self.init_text);
        self.coupling.clone_from(&self.init_coupling);
    }

    /// Makes the current values the new reset point.
    pub fn commit_snapshot(&mut self) {
        self.init_text.clone_from(&self.text);
        self.init_coupling.clone_from(&self.coupling);
    }

    pub fn is_at_snapshot(&self) -> bool {
        self.text == self.init_text && self.coupling == self.init_coupling
    }

    pub fn snapshot(&self) -> PromptState {
        let mut s = self.clone();
        s.reset();
        s.commit_snapshot();
        s
    }

    /// Max-norm distance between the current values and `other`'s.
    pub fn max_abs_diff(&self, other: &PromptState) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Euclidean distance from the initial snapshot.
    pub fn distance_from_init(&self) -> f64 {
        let cur = self.text.iter().chain(&self.coupling);
        let init = self.init_text.iter().chain(&self.init_coupling);
        cur.zip(init)
            .flat_map(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Binds the prompts as leaves and derives the vision prompts.
    /// With `train_coupling = false` the coupling maps enter as constants.
    pub fn bind(
        &self,
        g: &mut Graph,
        train_text: bool,
        train_coupling: bool,
    ) -> Result<BoundPrompts> {
        let leaf = |g: &mut Graph, t: &Tensor, train: bool| {
            if train {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let text: Vec<NodeId> = self.text.iter().map(|t| leaf(g, t, train_text)).collect();
        let coupling: Vec<NodeId> = self
            .coupling
            .iter()
            .map(|w| leaf(g, w, train_coupling))
            .collect();
        BoundPrompts::from_nodes(g, text, coupling)
    }

    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.depth() != cfg.prompt_depth {
            return Err(Error::config(format!(
                "prompt depth {} but model expects {}",
                self.depth(),
                cfg.prompt_depth
            )));
        }
        for (t, w) in self.text.iter().zip(&self.coupling) {
            if t.shape() != [cfg.n_prompt_tokens, cfg.d_text]
                || w.shape() != [cfg.d_text, cfg.d_vision]
            {
                return Err(Error::config(format!(
                    "prompt shapes {:?}/{:?} do not match model",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn zero_coupling_gives_zero_vision_prompts() {
        let mut g = Graph::new();
        let t = g.param(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, 7.0]));
        let w = g.param(Tensor::zeros(&[3, 4]));
        let v = couple(&mut g, t, w).unwrap();
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_coupling_copies_text_prompts() {
        let tp = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, 7.0]);
        let mut g = Graph::new();
        let t = g.param(tp.clone());
        let w = g.param(Tensor::identity(3));
        let v = couple(&mut g, t, w).unwrap();
        assert_eq!(g.value(v), &tp);
    }

    #[test]
    fn coupling_dimension_mismatch_is_config_error() {
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros(&[2, 3]));
        let w = g.param(Tensor::zeros(&[4, 4]));
        assert!(matches!(couple(&mut g, t, w), Err(Error::Config(_))));
    }

    #[test]
    fn coupling_gradient_matches_finite_differences() {
        let cfg = ModelConfig {
            d_text: 4,
            d_vision: 6,
            ..ModelConfig::default()
        };
        let p = PromptState::random(&cfg, 1);
        let params = vec![p.text()[0].clone(), p.coupling()[0].clone()];
        let report = grad_check(
            |g, ids| {
                let v = couple(g, ids[0], ids[1])?;
                let s = g.gelu(v);
                Ok(g.sum(s))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn reset_restores_snapshot_bit_exactly() {
        let cfg = ModelConfig::default();
        let mut p = PromptState::random(&cfg, 3);
        let before = p.clone();
        for t in p.tensors_mut() {
            t.data_mut()[0] += 0.25;
        }
        assert!(!p.is_at_snapshot());
        p.reset();
        assert!(p.is_at_snapshot());
        assert_eq!(p, before);
    }
}
