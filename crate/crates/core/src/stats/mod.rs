//! Channel-wise token statistics per vision layer.
//!
//! For one layer, the selected token rows of every view are pooled into a
//! single set; the mean and biased variance are taken per channel over that
//! set, giving one `d_vision` vector each per layer. Source statistics use
//! the same definition over a whole dataset with prompt-free forward passes.

pub mod moments;

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Model, ModelHash, TokenMask};
use moments::MomentAccumulator;

pub const STATS_MAGIC: &[u8; 8] = b"TDSTATS1";

/// Per-layer channel means and biased variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mu: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl LayerStats {
    pub fn n_layers(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }
}

/// Offline statistics of the prompt-free encoder on a source dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub model_hash: ModelHash,
    pub dataset_id: String,
    pub sample_count: u64,
    pub include_cls: bool,
    /// Highest central-moment order stored (at least 2).
    pub max_order: usize,
    pub mu: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    /// `moments[l][k − 3]` is the order-`k` central moment, `k = 3..=max_order`.
    pub moments: Vec<Vec<Vec<f64>>>,
}

impl SourceStats {
    pub fn n_layers(&self) -> usize {
        self.mu.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    /// Order-`k` central moment of layer `l` (`k = 2` is the variance).
    pub fn moment(&self, l: usize, k: usize) -> Option<&[f64]> {
        match k {
            2 => self.var.get(l).map(Vec::as_slice),
            k if k >= 3 => self.moments.get(l)?.get(k - 3).map(Vec::as_slice),
            _ => None,
        }
    }

    pub fn layer_stats(&self) -> LayerStats {
        LayerStats {
            mu: self.mu.clone(),
            var: self.var.clone(),
        }
    }

    pub fn token_mask(&self) -> TokenMask {
        TokenMask {
            include_cls: self.include_cls,
            include_prompts: false,
        }
    }

    pub fn check_model(&self, hash: &ModelHash) -> Result<()> {
        if &self.model_hash != hash {
            return Err(Error::Compat(format!(
                "statistics were computed with model {} but the loaded model is {}",
                self.model_hash, hash
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(STATS_MAGIC);
        out.extend_from_slice(&self.model_hash.0);
        for v in [self.n_layers(), self.dim(), self.max_order] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in 0..self.n_layers() {
            for k in 1..=self.max_order {
                let v = if k == 1 {
                    &self.mu[l][..]
                } else {
                    self.moment(l, k).expect("stored order")
                };
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.sample_count.to_le_bytes());
        out.push(self.include_cls as u8);
        out.extend_from_slice(&(self.dataset_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.dataset_id.as_bytes());
        w.write_all(&out)?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::format(format!(
                    "statistics file truncated at byte {pos}"
                )));
            }
            pos += n;
            Ok(&buf[pos - n..pos])
        };
        if take(8)? != STATS_MAGIC {
            return Err(Error::format("not a statistics file (bad magic)"));
        }
        let model_hash = ModelHash(take(32)?.try_into().expect("32 bytes"));
        let mut u32s = [0usize; 3];
        for v in &mut u32s {
            *v = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        let [n_layers, dim, max_order] = u32s;
        if max_order < 2 || dim == 0 || n_layers == 0 {
            return Err(Error::format(format!(
                "bad statistics header: {n_layers} layers, dim {dim}, max order {max_order}"
            )));
        }
        let body = n_layers
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(max_order))
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| Error::format("statistics header overflows"))?;
        let raw = take(body)?;
        let mut vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut vec = || {
            (0..dim)
                .map(|_| vals.next().expect("sized body"))
                .collect::<Vec<f64>>()
        };
        let (mut mu, mut var, mut moments) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n_layers {
            mu.push(vec());
            var.push(vec());
            moments.push((3..=max_order).map(|_| vec()).collect());
        }
        let sample_count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let include_cls = match take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::format(format!("bad mask flag {b}"))),
        };
        let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let dataset_id = std::str::from_utf8(take(n)?)
            .map_err(|_| Error::format("dataset id is not UTF-8"))?
            .to_string();
        if pos != buf.len() {
            return Err(Error::format(format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(Self {
            model_hash,
            dataset_id,
            sample_count,
            include_cls,
            max_order,
            mu,
            var,
            moments,
        })
    }
}

pub fn save_stats(stats: &SourceStats, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    stats.write(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads statistics and verifies they belong to the model with hash `expected`.
pub fn load_stats(path: &Path, expected: &ModelHash) -> Result<SourceStats> {
    let s = SourceStats::read(&mut File::open(path)?)?;
    s.check_model(expected)?;
    Ok(s)
}

/// Streams the selected rows of every view into one accumulator per layer.
/// `views[v][l]` is view `v`'s layer-`l` token matrix.
pub fn accumulate(
    views: &[Vec<Tensor>],
    rows: &[usize],
    max_order: usize,
) -> Result<Vec<MomentAccumulator>> {
    let first = views
        .first()
        .ok_or_else(|| Error::contract("statistics need at least one view"))?;
    if rows.is_empty() {
        return Err(Error::contract("token mask selects no rows"));
    }
    let mut accs: Vec<MomentAccumulator> = first
        .iter()
        .map(|t| MomentAccumulator::new(t.cols(), max_order))
        .collect();
    for view in views {
        push_view(&mut accs, view, rows)?;
    }
    Ok(accs)
}

fn push_view(accs: &mut [MomentAccumulator], view: &[Tensor], rows: &[usize]) -> Result<()> {
    if view.len() != accs.len() {
        return Err(Error::contract(format!(
            "view has {} layers, expected {}",
            view.len(),
            accs.len()
        )));
    }
    for (acc, t) in accs.iter_mut().zip(view) {
        if t.cols() != acc.dim() {
            return Err(Error::contract("token width differs between views"));
        }
        for &r in rows {
            if r >= t.rows() {
                return Err(Error::contract(format!(
                    "mask row {r} out of {} tokens",
                    t.rows()
                )));
            }
            acc.push(t.row_slice(r));
        }
    }
    Ok(())
}

/// Mean and biased variance per layer over all views and selected rows.
pub fn view_stats(views: &[Vec<Tensor>], rows: &[usize]) -> Result<LayerStats> {
    let accs = accumulate(views, rows, 2)?;
    Ok(LayerStats {
        mu: accs.iter().map(|a| a.mean().to_vec()).collect(),
        var: accs.iter().map(|a| a.variance()).collect(),
    })
}

/// Central moments of orders `2..=max_order`: `out[l][k − 2]`.
pub fn central_moments(
    views: &[Vec<Tensor>],
    rows: &[usize],
    max_order: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if max_order < 2 {
        return Err(Error::contract(format!(
            "central moments need order >= 2, got {max_order}"
        )));
    }
    let accs = accumulate(views, rows, max_order)?;
    Ok(accs
        .iter()
        .map(|a| (2..=max_order).map(|k| a.central(k)).collect())
        .collect())
}

/// Differentiable statistics of one layer.
#[derive(Clone, Debug)]
pub struct StatNodes {
    /// `1 × d` mean.
    pub mu: NodeId,
    /// `moments[k − 2]` is the `1 × d` order-`k` central moment, `k = 2..=max_order`.
    pub moments: Vec<NodeId>,
}

impl StatNodes {
    pub fn var(&self) -> NodeId {
        self.moments[0]
    }
}

/// Graph version of [`view_stats`] for one layer: `tokens[v]` is view `v`'s
/// token node. Forward values equal the streaming statistics bit for bit.
pub fn layer_stat_nodes(
    g: &mut Graph,
    tokens: &[NodeId],
    rows: &[usize],
    max_order: usize,
) -> Result<StatNodes> {
    if tokens.is_empty() {
        return Err(Error::contract("statistics need at least one view"));
    }
    if rows.is_empty() {
        return Err(Error::contract("token mask selects no rows"));
    }
    let picked = tokens
        .iter()
        .map(|&t| g.select_rows(t, rows))
        .collect::<Result<Vec<_>>>()?;
    let x = g.concat_rows(&picked)?;
    let mu = g.col_moment(x, 1)?;
    let moments = (2..=max_order.max(2))
        .map(|k| g.col_moment(x, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(StatNodes { mu, moments })
}

/// Source statistics of the prompt-free `model` over `images`. Forward passes
/// run in parallel within each batch; rows are reduced in image order, so the
/// result does not depend on `batch_size` or the thread count.
pub fn source_stats(
    model: &Model,
    images: &[Image],
    batch_size: usize,
    include_cls: bool,
    max_order: usize,
    dataset_id: &str,
) -> Result<SourceStats> {
    if images.is_empty() {
        return Err(Error::data("cannot compute statistics of an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let max_order = max_order.max(2);
    let mask = TokenMask {
        include_cls,
        include_prompts: false,
    };
    let rows = mask.rows(0, model.config().n_patches());
    let d = model.config().d_vision;
    let mut accs = vec![MomentAccumulator::new(d, max_order); model.config().vision_layers];
    for batch in images.chunks(batch_size) {
        let tokens = batch
            .par_iter()
            .map(|img| model.layer_tokens(img, None).map(|(t, _)| t))
            .collect::<Result<Vec<_>>>()?;
        for view in &tokens {
            push_view(&mut accs, view, &rows)?;
        }
    }
    Ok(SourceStats {
        model_hash: model.backbone_hash(),
        dataset_id: dataset_id.to_string(),
        sample_count: images.len() as u64,
        include_cls,
        max_order,
        mu: accs.iter().map(|a| a.mean().to_vec()).collect(),
        var: accs.iter().map(|a| a.variance()).collect(),
        moments: accs
            .iter()
            .map(|a| (3..=max_order).map(|k| a.central(k)).collect())
            .collect(),
    })
}
