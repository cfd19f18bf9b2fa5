//! Confidence filter, filtered-mean entropy, alignment distances and the
//! combined objective `L_final = L_entropy + β · L_align`.

use super::config::{filter_count, AlignLoss};
use crate::autodiff::{entropy_of, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::stats::{LayerStats, SourceStats, StatNodes};

/// Variance floor applied to both sides of the KL variant.
pub const KL_VAR_FLOOR: f64 = 1e-12;

/// Indices of the `max(1, ⌊ρ·N⌋)` rows of `probs` with the lowest Shannon
/// entropy, ties going to the lower index, returned in ascending order.
pub fn confidence_filter(probs: &Tensor, ratio: f64) -> Vec<usize> {
    let n = probs.rows();
    let keep = filter_count(ratio, n);
    let h: Vec<f64> = (0..n).map(|i| entropy_of(probs.row_slice(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Entropy of the mean of the kept rows of `probs` (natural log).
pub fn entropy_loss(g: &mut Graph, probs: NodeId, kept: &[usize]) -> Result<NodeId> {
    if kept.is_empty() {
        return Err(Error::contract("entropy loss needs at least one kept view"));
    }
    let rows = g.select_rows(probs, kept)?;
    let mean = g.col_mean(rows);
    Ok(g.entropy(mean))
}

/// Test-time statistic nodes of one 0-based vision layer.
#[derive(Clone, Debug)]
pub struct LayerStatNodes {
    pub layer: usize,
    pub stats: StatNodes,
}

fn source_row(g: &mut Graph, v: &[f64]) -> NodeId {
    g.constant(Tensor::row(v.to_vec()))
}

fn distance(g: &mut Graph, test: NodeId, source: &[f64], squared: bool) -> Result<NodeId> {
    let s = source_row(g, source);
    let d = g.sub(test, s)?;
    let e = if squared { g.square(d) } else { g.abs(d) };
    Ok(g.sum(e))
}

fn check_layer(source: &SourceStats, layer: usize, width: usize, order: usize) -> Result<()> {
    if layer >= source.n_layers() {
        return Err(Error::contract(format!(
            "layer {} has no source statistics ({} layers stored)",
            layer + 1,
            source.n_layers()
        )));
    }
    if width != source.dim() {
        return Err(Error::contract(format!(
            "test statistics have {width} channels, source has {}",
            source.dim()
        )));
    }
    if order > source.max_order {
        return Err(Error::contract(format!(
            "loss needs central moments up to order {order}, source stores {}",
            source.max_order
        )));
    }
    Ok(())
}

/// Alignment loss averaged over the given layers.
pub fn align_loss(
    g: &mut Graph,
    test: &[LayerStatNodes],
    source: &SourceStats,
    variant: AlignLoss,
) -> Result<NodeId> {
    if test.is_empty() {
        return Err(Error::contract("alignment needs at least one layer"));
    }
    let mut terms = Vec::with_capacity(test.len());
    for t in test {
        let width = g.value(t.stats.mu).cols();
        check_layer(source, t.layer, width, variant.max_order())?;
        if t.stats.moments.len() + 1 < variant.max_order() {
            return Err(Error::contract(
                "test statistics lack the moments the loss needs",
            ));
        }
        let l = t.layer;
        let term = match variant {
            AlignLoss::L1 | AlignLoss::L2 | AlignLoss::Cmd(_) => {
                let sq = variant == AlignLoss::L2;
                let mut parts = vec![
                    distance(g, t.stats.mu, &source.mu[l], sq)?,
                    distance(g, t.stats.var(), &source.var[l], sq)?,
                ];
                for k in 3..=variant.max_order() {
                    let m = source.moment(l, k).expect("checked order").to_vec();
                    parts.push(distance(g, t.stats.moments[k - 2], &m, false)?);
                }
                let c = g.concat_rows(&parts)?;
                g.sum(c)
            }
            AlignLoss::Kl => kl_term(g, t.stats.mu, t.stats.var(), &source.mu[l], &source.var[l])?,
            AlignLoss::KlReverse => {
                kl_reverse_term(g, t.stats.mu, t.stats.var(), &source.mu[l], &source.var[l])?
            }
        };
        terms.push(term);
    }
    let all = g.concat_rows(&terms)?;
    Ok(g.mean(all))
}

/// Channel-mean of `½ [ln(σ̂²/σ²) + (σ² + (μ − μ̂)²)/σ̂² − 1]`.
fn kl_term(g: &mut Graph, mu: NodeId, var: NodeId, mu_s: &[f64], var_s: &[f64]) -> Result<NodeId> {
    let vs: Vec<f64> = var_s.iter().map(|v| v.max(KL_VAR_FLOOR)).collect();
    let vt = g.clamp_min(var, KL_VAR_FLOOR);
    let ms = source_row(g, mu_s);
    let inv = g.constant(Tensor::row(vs.iter().map(|v| 1.0 / v).collect()));
    let ln_s = g.constant(Tensor::row(vs.iter().map(|v| v.ln()).collect()));
    let ln_t = g.ln(vt);
    let log_ratio = g.sub(ln_s, ln_t)?;
    let dm = g.sub(mu, ms)?;
    let dm2 = g.square(dm);
    let num = g.add(vt, dm2)?;
    let ratio = g.mul(num, inv)?;
    let inner = g.add(log_ratio, ratio)?;
    let inner = g.add_scalar(inner, -1.0);
    let m = g.mean(inner);
    Ok(g.scale(m, 0.5))
}

/// Channel-mean of `½ [ln(σ²/σ̂²) + (σ̂² + (μ − μ̂)²)/σ² − 1]`.
fn kl_reverse_term(
    g: &mut Graph,
    mu: NodeId,
    var: NodeId,
    mu_s: &[f64],
    var_s: &[f64],
) -> Result<NodeId> {
    let vs: Vec<f64> = var_s.iter().map(|v| v.max(KL_VAR_FLOOR)).collect();
    let vt = g.clamp_min(var, KL_VAR_FLOOR);
    let ms = source_row(g, mu_s);
    let vs_row = source_row(g, &vs);
    let ln_s = g.constant(Tensor::row(vs.iter().map(|v| v.ln()).collect()));
    let ln_t = g.ln(vt);
    let log_ratio = g.sub(ln_t, ln_s)?;
    let dm = g.sub(mu, ms)?;
    let dm2 = g.square(dm);
    let num = g.add(vs_row, dm2)?;
    let inv = g.powi(vt, -1);
    let ratio = g.mul(num, inv)?;
    let inner = g.add(log_ratio, ratio)?;
    let inner = g.add_scalar(inner, -1.0);
    let m = g.mean(inner);
    Ok(g.scale(m, 0.5))
}

/// `L_entropy + β · L_align`; with `β = 0` the entropy node itself is returned
/// so the objective and its gradient are exactly the entropy-only ones.
pub fn combined_loss(
    g: &mut Graph,
    entropy: NodeId,
    align: Option<NodeId>,
    beta: f64,
) -> Result<NodeId> {
    match align {
        Some(a) if beta != 0.0 => {
            let s = g.scale(a, beta);
            g.add(entropy, s)
        }
        _ => Ok(entropy),
    }
}

/// Non-differentiable alignment loss between plain statistics. `layers` are 0-based.
pub fn align_loss_value(
    test: &LayerStats,
    source: &SourceStats,
    layers: &[usize],
    variant: AlignLoss,
) -> Result<f64> {
    if variant.max_order() > 2 {
        return Err(Error::contract(
            "plain statistics carry no higher moments; use the graph form",
        ));
    }
    let mut g = Graph::new();
    let mut nodes = Vec::with_capacity(layers.len());
    for &l in layers {
        if l >= test.n_layers() {
            return Err(Error::contract(format!(
                "test statistics lack layer {}",
                l + 1
            )));
        }
        let mu = g.constant(Tensor::row(test.mu[l].clone()));
        let var = g.constant(Tensor::row(test.var[l].clone()));
        nodes.push(LayerStatNodes {
            layer: l,
            stats: StatNodes {
                mu,
                moments: vec![var],
            },
        });
    }
    let loss = align_loss(&mut g, &nodes, source, variant)?;
    Ok(g.value(loss).item())
}
