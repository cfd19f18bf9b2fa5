use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Ordered, named collection of backbone weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[idx])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub(crate) fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(Arc::new(t));
        self.tensors.len() - 1
    }

    /// Binds every tensor into `g`, as trainable leaves or shared constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            ids: self
                .tensors
                .iter()
                .map(|t| g.shared(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Node ids of a [`ParamSet`] bound into one graph, index-aligned.
#[derive(Clone, Debug)]
pub struct Bound {
    pub(crate) ids: Vec<NodeId>,
}

impl Bound {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub(crate) fn at(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }
}

pub(crate) struct Init<'a, R: Rng> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.params.push(name, Tensor::matrix(rows, cols, data))
    }

    pub fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) -> usize {
        self.params.push(name, Tensor::full(&[rows, cols], value))
    }

    pub fn layernorm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.constant(format!("{prefix}.gamma"), 1, d, 1.0),
            self.constant(format!("{prefix}.beta"), 1, d, 0.0),
        )
    }
}

/// Indices of one pre-norm transformer block's weights.
#[derive(Clone, Debug)]
pub(crate) struct BlockLayout {
    ln1: (usize, usize),
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ln2: (usize, usize),
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

impl BlockLayout {
    pub fn init<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        d: usize,
        mlp_ratio: usize,
        n_layers: usize,
    ) -> Self {
        let h = d * mlp_ratio;
        let std_in = (1.0 / d as f64).sqrt();
        // Residual branches scaled down with depth, GPT-2 style.
        let std_res = std_in / (2.0 * n_layers as f64).sqrt();
        Self {
            ln1: init.layernorm(&format!("{prefix}.ln1"), d),
            qkv_w: init.normal(format!("{prefix}.attn.qkv.w"), d, 3 * d, std_in),
            qkv_b: init.constant(format!("{prefix}.attn.qkv.b"), 1, 3 * d, 0.0),
            out_w: init.normal(format!("{prefix}.attn.out.w"), d, d, std_res),
            out_b: init.constant(format!("{prefix}.attn.out.b"), 1, d, 0.0),
            ln2: init.layernorm(&format!("{prefix}.ln2"), d),
            fc1_w: init.normal(format!("{prefix}.mlp.fc1.w"), d, h, std_in),
            fc1_b: init.constant(format!("{prefix}.mlp.fc1.b"), 1, h, 0.0),
            fc2_w: init.normal(
                format!("{prefix}.mlp.fc2.w"),
                h,
                d,
                (1.0 / h as f64).sqrt() / (2.0 * n_layers as f64).sqrt(),
            ),
            fc2_b: init.constant(format!("{prefix}.mlp.fc2.b"), 1, d, 0.0),
        }
    }

    /// `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: NodeId,
        heads: usize,
        causal: bool,
        eps: f64,
    ) -> Result<NodeId> {
        let h = g.layernorm(x, b.at(self.ln1.0), b.at(self.ln1.1), eps)?;
        let qkv = g.linear(h, b.at(self.qkv_w), Some(b.at(self.qkv_b)))?;
        let a = g.attention(qkv, heads, causal)?;
        let a = g.linear(a, b.at(self.out_w), Some(b.at(self.out_b)))?;
        let x = g.add(x, a)?;
        let h = g.layernorm(x, b.at(self.ln2.0), b.at(self.ln2.1), eps)?;
        let h = g.linear(h, b.at(self.fc1_w), Some(b.at(self.fc1_b)))?;
        let h = g.gelu(h);
        let h = g.linear(h, b.at(self.fc2_w), Some(b.at(self.fc2_b)))?;
        g.add(x, h)
    }
}
