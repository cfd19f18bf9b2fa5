use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, BoundPrompts, Model, PromptState};
use crate::augment::{derive_seed, generate_views, AugmentConfig};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tta::optim::{Optimizer, OptimizerConfig};

/// Supervised training schedule for the backbone and for source prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Train on one random resized crop of each image instead of the image itself.
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.0,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training-set accuracy per epoch (on the inputs actually seen).
    pub epoch_accuracy: Vec<f64>,
}

fn check_data(
    model: &Model,
    images: &[Image],
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if images.len() != labels.len() {
        return Err(Error::data(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.config.n_classes) {
        return Err(Error::data(format!("label {bad} out of range")));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("epochs and batch_size must be positive"));
    }
    Ok(())
}

/// Mean cross-entropy of one minibatch; also returns the number correct.
fn batch_loss(
    model: &Model,
    g: &mut Graph,
    b: &Bound,
    prompts: Option<&BoundPrompts>,
    batch: &[(Image, usize)],
) -> Result<(NodeId, usize)> {
    let text = model.encode_texts(g, b, prompts)?;
    let feats = batch
        .iter()
        .map(|(img, _)| model.encode_image(g, b, img, prompts).map(|e| e.feature))
        .collect::<Result<Vec<_>>>()?;
    let feats = g.concat_rows(&feats)?;
    let logits = model.logits(g, feats, text)?;
    let logp = g.log_softmax_rows(logits);
    let c = model.config.n_classes;
    let mut onehot = vec![0.0; batch.len() * c];
    let mut correct = 0;
    let lv = g.value(logits);
    for (i, (_, y)) in batch.iter().enumerate() {
        onehot[i * c + y] = 1.0;
        if argmax(lv.row_slice(i)) == *y {
            correct += 1;
        }
    }
    let mask = g.constant(Tensor::matrix(batch.len(), c, onehot));
    let picked = g.mul(logp, mask)?;
    let s = g.sum(picked);
    Ok((g.scale(s, -1.0 / batch.len() as f64), correct))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Shuffled (optionally augmented) minibatches for one epoch.
fn epoch_batches(
    images: &[Image],
    labels: &[usize],
    cfg: &PretrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<(Image, usize)>>> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(rng);
    let aug = AugmentConfig::default();
    let mut out = Vec::new();
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let img = if cfg.augment {
                let seed = derive_seed(
                    derive_seed(cfg.seed, epoch as u64),
                    (bi * cfg.batch_size) as u64 + i as u64,
                );
                generate_views(&images[i], 2, seed, &aug)?
                    .views
                    .swap_remove(1)
            } else {
                images[i].clone()
            };
            batch.push((img, labels[i]));
        }
        out.push(batch);
    }
    Ok(out)
}

/// Trains every backbone weight with cross-entropy over the classifier
/// (no prompts). Deterministic in `cfg.seed`.
pub fn pretrain_backbone(
    model: &mut Model,
    images: &[Image],
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    check_data(model, images, labels, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.lr, cfg.weight_decay));
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        let (mut total, mut correct) = (0.0, 0);
        for batch in epoch_batches(images, labels, cfg, epoch, &mut rng)? {
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let (loss, c) = batch_loss(model, &mut g, &b, None, &batch)?;
            total += g.value(loss).item() * batch.len() as f64;
            correct += c;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = b
                .ids()
                .iter()
                .zip(model.params.iter())
                .map(|(&id, (_, t))| grads.get_or_zeros(id, t))
                .collect();
            drop(g);
            let gref: Vec<&Tensor> = gs.iter().collect();
            opt.step(&mut model.params_mut().tensors_mut(), &gref)?;
        }
        log.epoch_loss.push(total / images.len() as f64);
        log.epoch_accuracy
            .push(correct as f64 / images.len() as f64);
    }
    Ok(log)
}

/// Fits prompts and coupling maps on labeled source data with the backbone
/// frozen, then makes the result the prompts' reset snapshot.
pub fn train_prompts(
    model: &Model,
    prompts: &mut PromptState,
    images: &[Image],
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    check_data(model, images, labels, cfg)?;
    prompts.check_compatible(&model.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.lr, cfg.weight_decay));
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        let (mut total, mut correct) = (0.0, 0);
        for batch in epoch_batches(images, labels, cfg, epoch, &mut rng)? {
            let mut g = Graph::new();
            let b = model.bind(&mut g, false);
            let bp = prompts.bind(&mut g, true, true)?;
            let (loss, c) = batch_loss(model, &mut g, &b, Some(&bp), &batch)?;
            total += g.value(loss).item() * batch.len() as f64;
            correct += c;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = bp
                .leaves()
                .iter()
                .zip(prompts.tensors())
                .map(|(&id, t)| grads.get_or_zeros(id, t))
                .collect();
            let gref: Vec<&Tensor> = gs.iter().collect();
            opt.step(&mut prompts.tensors_mut(), &gref)?;
        }
        log.epoch_loss.push(total / images.len() as f64);
        log.epoch_accuracy
            .push(correct as f64 / images.len() as f64);
    }
    prompts.commit_snapshot();
    Ok(log)
}
