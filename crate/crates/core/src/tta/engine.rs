use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Mode, TtaConfig};
use super::loss::{align_loss, combined_loss, confidence_filter, entropy_loss, LayerStatNodes};
use super::optim::Optimizer;
use crate::augment::{derive_seed, generate_views};
use crate::autodiff::{grad_check, GradCheckReport, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{BoundPrompts, Model, PromptState, TokenMask};
use crate::stats::{layer_stat_nodes, SourceStats};

/// Objective values at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub entropy: f64,
    /// Present whenever source statistics were supplied, even with `β = 0`.
    pub align: Option<f64>,
    /// `λ‖p − p_prev‖²` (continuous mode only).
    pub reg: f64,
    pub total: f64,
    /// Views that passed the confidence filter.
    pub kept: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub prediction: usize,
    /// Class probabilities of the original image under the adapted prompts.
    pub probs: Vec<f64>,
    /// Objective before each update step.
    pub steps: Vec<StepLog>,
    /// Seed the views were drawn from.
    pub view_seed: u64,
    pub wall_time_secs: f64,
}

/// Outcomes compare equal when everything but the wall time matches.
impl PartialEq for EpisodeResult {
    fn eq(&self, other: &Self) -> bool {
        self.prediction == other.prediction
            && self.probs == other.probs
            && self.steps == other.steps
            && self.view_seed == other.view_seed
    }
}

impl EpisodeResult {
    pub fn views_kept(&self) -> usize {
        self.steps.last().map_or(0, |s| s.kept.len())
    }
}

/// Prompt values before the current sample's update, for the continuous-mode penalty.
struct Anchor<'a> {
    prev: &'a PromptState,
    lambda: f64,
}

struct Evaluation {
    log: StepLog,
    grads: Option<Vec<Tensor>>,
}

fn check_source(model: &Model, source: Option<&SourceStats>, cfg: &TtaConfig) -> Result<()> {
    if let Some(s) = source {
        s.check_model(&model.backbone_hash())?;
        if s.max_order < cfg.align_loss.max_order() {
            return Err(Error::Compat(format!(
                "{} needs source moments up to order {}, file stores {}",
                cfg.align_loss,
                cfg.align_loss.max_order(),
                s.max_order
            )));
        }
        if s.include_cls != cfg.include_cls {
            return Err(Error::Compat(format!(
                "source statistics include_cls={} but the run uses include_cls={}",
                s.include_cls, cfg.include_cls
            )));
        }
    }
    Ok(())
}

/// Loss nodes of one episode graph.
struct Objective {
    entropy: NodeId,
    align: Option<NodeId>,
    reg: Option<NodeId>,
    total: NodeId,
    kept: Vec<usize>,
}

/// Builds the episode objective for `views` (plus statistics-only
/// `bag_views`) on already-bound prompts. `kept` overrides the confidence
/// filter's choice.
#[allow(clippy::too_many_arguments)]
fn build_objective(
    g: &mut Graph,
    model: &Model,
    bp: &BoundPrompts,
    views: &[Image],
    bag_views: &[Image],
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
    kept: Option<&[usize]>,
) -> Result<Objective> {
    let b = model.bind(g, false);
    let text = model.encode_texts(g, &b, Some(bp))?;
    let layers: Vec<usize> = cfg.align_layers.iter().map(|l| l - 1).collect();
    let mut tokens: Vec<Vec<NodeId>> = vec![Vec::new(); layers.len()];
    let mut feats = Vec::with_capacity(views.len());
    let mut rows = Vec::new();
    let mask = TokenMask {
        include_cls: cfg.include_cls,
        include_prompts: false,
    };
    for (i, img) in views.iter().chain(bag_views).enumerate() {
        let enc = model.encode_image(g, &b, img, Some(bp))?;
        if i < views.len() {
            feats.push(enc.feature);
        }
        if source.is_some() {
            rows = enc.mask_rows(mask);
            for (slot, &l) in layers.iter().enumerate() {
                tokens[slot].push(enc.layer_tokens[l]);
            }
        }
    }
    let feats = g.concat_rows(&feats)?;
    let probs = model.class_probs(g, feats, text)?;
    let kept = match kept {
        Some(k) => k.to_vec(),
        None => confidence_filter(g.value(probs), cfg.filter_ratio),
    };
    let entropy = entropy_loss(g, probs, &kept)?;
    let align = match source {
        Some(s) if !layers.is_empty() => {
            let order = cfg.align_loss.max_order();
            let nodes = layers
                .iter()
                .zip(&tokens)
                .map(|(&layer, t)| {
                    Ok(LayerStatNodes {
                        layer,
                        stats: layer_stat_nodes(g, t, &rows, order)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(align_loss(g, &nodes, s, cfg.align_loss)?)
        }
        _ => None,
    };
    let total = combined_loss(g, entropy, align, cfg.beta)?;
    Ok(Objective {
        entropy,
        align,
        reg: None,
        total,
        kept,
    })
}

/// Adds `λ Σ ‖p − p_prev‖²` over the trainable tensors.
fn add_drift_penalty(
    g: &mut Graph,
    obj: &mut Objective,
    trainable: &[NodeId],
    anchor: &Anchor<'_>,
) -> Result<()> {
    let mut parts = Vec::with_capacity(trainable.len());
    for (id, prev) in trainable.iter().zip(anchor.prev.tensors()) {
        let p = g.constant(prev.clone());
        let d = g.sub(*id, p)?;
        let sq = g.square(d);
        parts.push(g.sum(sq));
    }
    let all = g.concat_rows(&parts)?;
    let s = g.sum(all);
    let r = g.scale(s, anchor.lambda);
    obj.total = g.add(obj.total, r)?;
    obj.reg = Some(r);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    model: &Model,
    prompts: &PromptState,
    views: &[Image],
    bag_views: &[Image],
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
    anchor: Option<&Anchor<'_>>,
    grad: bool,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let bp = prompts.bind(&mut g, true, !cfg.freeze_coupling)?;
    let trainable = trainable_ids(&bp, cfg);
    let mut obj = build_objective(&mut g, model, &bp, views, bag_views, source, cfg, None)?;
    if let Some(a) = anchor.filter(|a| a.lambda > 0.0) {
        add_drift_penalty(&mut g, &mut obj, &trainable, a)?;
    }
    let log = StepLog {
        entropy: g.value(obj.entropy).item(),
        align: obj.align.map(|a| g.value(a).item()),
        reg: obj.reg.map_or(0.0, |r| g.value(r).item()),
        total: g.value(obj.total).item(),
        kept: obj.kept,
    };
    let grads = if grad {
        let gr = g.backward(obj.total)?;
        Some(
            trainable
                .iter()
                .zip(prompts.tensors())
                .map(|(&id, t)| gr.get_or_zeros(id, t))
                .collect(),
        )
    } else {
        None
    };
    Ok(Evaluation { log, grads })
}

/// Which part of the episode objective a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveTerm {
    Entropy,
    Align,
    Final,
}

/// Central-difference check of one objective term with respect to every
/// text-prompt and coupling entry. The filter's kept views are fixed at
/// their unperturbed choice so the function is smooth in the prompts.
pub fn objective_grad_check(
    image: &Image,
    model: &Model,
    prompts: &PromptState,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
    term: ObjectiveTerm,
    step: f64,
) -> Result<GradCheckReport> {
    cfg.validate(model.config().vision_layers)?;
    check_source(model, source, cfg)?;
    if term == ObjectiveTerm::Align && source.is_none() {
        return Err(Error::contract(
            "the alignment term needs source statistics",
        ));
    }
    let (views, bag_views) = episode_views(image, &[], cfg)?;
    let kept = evaluate(model, prompts, &views, &bag_views, source, cfg, None, false)?
        .log
        .kept;
    let depth = prompts.depth();
    let params: Vec<Tensor> = prompts.tensors().into_iter().cloned().collect();
    grad_check(
        |g, ids| {
            let bp = BoundPrompts::from_nodes(g, ids[..depth].to_vec(), ids[depth..].to_vec())?;
            let obj = build_objective(g, model, &bp, &views, &bag_views, source, cfg, Some(&kept))?;
            Ok(match term {
                ObjectiveTerm::Entropy => obj.entropy,
                ObjectiveTerm::Align => obj.align.expect("source present"),
                ObjectiveTerm::Final => obj.total,
            })
        },
        &params,
        step,
    )
}

fn trainable_ids(bp: &BoundPrompts, cfg: &TtaConfig) -> Vec<NodeId> {
    if cfg.freeze_coupling {
        bp.text.clone()
    } else {
        bp.leaves()
    }
}

fn step(
    prompts: &mut PromptState,
    opt: &mut Optimizer,
    grads: &[Tensor],
    freeze_coupling: bool,
) -> Result<()> {
    let gref: Vec<&Tensor> = grads.iter().collect();
    let mut params = prompts.tensors_mut();
    if freeze_coupling {
        params.truncate(gref.len());
    }
    opt.step(&mut params, &gref)
}

/// Views of `image` and of every bag member; bag member `j` draws its views
/// from `derive_seed(seed, j + 1)`.
fn episode_views(
    image: &Image,
    bag: &[Image],
    cfg: &TtaConfig,
) -> Result<(Vec<Image>, Vec<Image>)> {
    let views = generate_views(image, cfg.n_views, cfg.seed, &cfg.augment)?.views;
    let mut bag_views = Vec::new();
    for (j, img) in bag.iter().enumerate() {
        bag_views.extend(
            generate_views(
                img,
                cfg.n_views,
                derive_seed(cfg.seed, j as u64 + 1),
                &cfg.augment,
            )?
            .views,
        );
    }
    Ok((views, bag_views))
}

fn run_episode(
    image: &Image,
    bag: &[Image],
    model: &Model,
    prompts: &mut PromptState,
    opt: &mut Optimizer,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let prev =
        (cfg.mode == Mode::Continuous && cfg.prompt_reg_lambda > 0.0).then(|| prompts.clone());
    let anchor = prev.as_ref().map(|p| Anchor {
        prev: p,
        lambda: cfg.prompt_reg_lambda,
    });
    let mut steps = Vec::with_capacity(cfg.n_steps);
    if cfg.n_steps > 0 {
        let (views, bag_views) = episode_views(image, bag, cfg)?;
        for _ in 0..cfg.n_steps {
            let e = evaluate(
                model,
                prompts,
                &views,
                &bag_views,
                source,
                cfg,
                anchor.as_ref(),
                true,
            )?;
            step(
                prompts,
                opt,
                &e.grads.expect("requested"),
                cfg.freeze_coupling,
            )?;
            steps.push(e.log);
        }
    }
    let probs = model.predict(image, Some(prompts))?;
    Ok(EpisodeResult {
        prediction: crate::model::argmax(&probs),
        probs,
        steps,
        view_seed: cfg.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Adapts the prompts to one test image and classifies it. In episodic mode
/// the prompts are first reset to their snapshot; views come from `cfg.seed`.
pub fn adapt_and_predict(
    image: &Image,
    model: &Model,
    prompts: &mut PromptState,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
) -> Result<EpisodeResult> {
    adapt_with_bag(image, &[], model, prompts, source, cfg)
}

/// As [`adapt_and_predict`], with the views of the other `bag` samples pooled
/// into the alignment statistics (they do not enter the entropy term).
pub fn adapt_with_bag(
    image: &Image,
    bag: &[Image],
    model: &Model,
    prompts: &mut PromptState,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
) -> Result<EpisodeResult> {
    cfg.validate(model.config().vision_layers)?;
    prompts.check_compatible(model.config())?;
    check_source(model, source, cfg)?;
    if cfg.mode == Mode::Episodic {
        prompts.reset();
    }
    let mut opt = Optimizer::new(cfg.optimizer_config());
    run_episode(image, bag, model, prompts, &mut opt, source, cfg)
}

/// Objective and filter decision of `prompts` on the episode views of
/// `image` (the views `adapt_and_predict` would draw with `cfg.seed`).
pub fn evaluate_objective(
    image: &Image,
    model: &Model,
    prompts: &PromptState,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
) -> Result<StepLog> {
    cfg.validate(model.config().vision_layers)?;
    check_source(model, source, cfg)?;
    let (views, bag_views) = episode_views(image, &[], cfg)?;
    Ok(evaluate(model, prompts, &views, &bag_views, source, cfg, None, false)?.log)
}

/// Gradient of the episode objective with respect to the trainable prompt
/// tensors, in [`PromptState::tensors`] order.
pub fn objective_gradient(
    image: &Image,
    model: &Model,
    prompts: &PromptState,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
) -> Result<(StepLog, Vec<Tensor>)> {
    cfg.validate(model.config().vision_layers)?;
    check_source(model, source, cfg)?;
    let (views, bag_views) = episode_views(image, &[], cfg)?;
    let e = evaluate(model, prompts, &views, &bag_views, source, cfg, None, true)?;
    Ok((e.log, e.grads.expect("requested")))
}

/// Continuous (non-episodic) adaptation over a stream: prompts and optimizer
/// state persist; sample `i` draws its views from `derive_seed(cfg.seed, i)`.
/// A positive `prompt_reg_lambda` penalizes `‖p − p_prev‖²` against the
/// prompts held before each sample.
pub fn continuous_adapt(
    images: &[Image],
    model: &Model,
    prompts: &mut PromptState,
    source: Option<&SourceStats>,
    cfg: &TtaConfig,
) -> Result<Vec<EpisodeResult>> {
    if cfg.mode != Mode::Continuous {
        return Err(Error::config("continuous_adapt needs mode=continuous"));
    }
    cfg.validate(model.config().vision_layers)?;
    prompts.check_compatible(model.config())?;
    check_source(model, source, cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer_config());
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let sample_cfg = TtaConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            run_episode(img, &[], model, prompts, &mut opt, source, &sample_cfg)
        })
        .collect()
}

/// Alignment loss of `prompts` (or the prompt-free encoder) on the given
/// views, layers 1-based as in [`TtaConfig::align_layers`].
pub fn views_align_loss(
    model: &Model,
    prompts: Option<&PromptState>,
    views: &[Image],
    source: &SourceStats,
    cfg: &TtaConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let bp = prompts.map(|p| p.bind(&mut g, false, false)).transpose()?;
    let mask = TokenMask {
        include_cls: cfg.include_cls,
        include_prompts: false,
    };
    let layers: Vec<usize> = cfg.align_layers.iter().map(|l| l - 1).collect();
    let mut tokens: Vec<Vec<NodeId>> = vec![Vec::new(); layers.len()];
    let mut rows = Vec::new();
    for img in views {
        let enc = model.encode_image(&mut g, &b, img, bp.as_ref())?;
        rows = enc.mask_rows(mask);
        for (slot, &l) in layers.iter().enumerate() {
            let t = *enc
                .layer_tokens
                .get(l)
                .ok_or_else(|| Error::config(format!("align layer {} beyond encoder", l + 1)))?;
            tokens[slot].push(t);
        }
    }
    let order = cfg.align_loss.max_order();
    let nodes = layers
        .iter()
        .zip(&tokens)
        .map(|(&layer, t)| {
            Ok(LayerStatNodes {
                layer,
                stats: layer_stat_nodes(&mut g, t, &rows, order)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = align_loss(&mut g, &nodes, source, cfg.align_loss)?;
    Ok(g.value(loss).item())
}
