//! Per-sample adaptation over a dataset and the JSON reports it produces.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use crate::augment::derive_seed;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Model, PromptState};
use crate::stats::SourceStats;
use crate::tta::{adapt_with_bag, continuous_adapt, EpisodeResult, Mode, StepLog, TtaConfig};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    pub probs: Vec<f64>,
    /// Objective before each update step.
    pub steps: Vec<StepLog>,
    pub view_seed: u64,
}

impl SampleRecord {
    fn first(&self) -> Option<&StepLog> {
        self.steps.first()
    }
}

/// Outcome of one evaluation run. Timing lives outside the compared fields
/// so reports of identical runs are byte-identical.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub dataset_id: String,
    pub model_hash: String,
    pub seed: u64,
    pub config: TtaConfig,
    pub n_samples: usize,
    pub accuracy: f64,
    /// Means of the pre-update objective over samples (absent without update steps).
    pub mean_entropy: Option<f64>,
    pub mean_align: Option<f64>,
    pub mean_total: Option<f64>,
    pub records: Vec<SampleRecord>,
    #[serde(skip)]
    pub timing: Timing,
}

impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.summary() == other.summary() && self.records == other.records
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    /// Wall time of each sample's adaptation, in sample order.
    pub per_sample_secs: Vec<f64>,
}

impl Timing {
    pub fn mean_latency(&self) -> f64 {
        if self.per_sample_secs.is_empty() {
            0.0
        } else {
            self.per_sample_secs.iter().sum::<f64>() / self.per_sample_secs.len() as f64
        }
    }
}

/// Report without the per-sample records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub version: u32,
    pub dataset_id: String,
    pub model_hash: String,
    pub seed: u64,
    pub config: TtaConfig,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_entropy: Option<f64>,
    pub mean_align: Option<f64>,
    pub mean_total: Option<f64>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Aggregates records; accuracy and loss means are re-derived from them.
    pub fn from_records(
        dataset_id: &str,
        model: &Model,
        cfg: &TtaConfig,
        records: Vec<SampleRecord>,
        timing: Timing,
    ) -> Self {
        let n = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        Self {
            version: REPORT_VERSION,
            dataset_id: dataset_id.to_string(),
            model_hash: model.backbone_hash().to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            n_samples: n,
            accuracy: if n == 0 {
                0.0
            } else {
                correct as f64 / n as f64
            },
            mean_entropy: mean(records.iter().map(|r| r.first().map(|s| s.entropy))),
            mean_align: mean(records.iter().map(|r| r.first().and_then(|s| s.align))),
            mean_total: mean(records.iter().map(|r| r.first().map(|s| s.total))),
            records,
            timing,
        }
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            version: self.version,
            dataset_id: self.dataset_id.clone(),
            model_hash: self.model_hash.clone(),
            seed: self.seed,
            config: self.config.clone(),
            n_samples: self.n_samples,
            accuracy: self.accuracy,
            mean_entropy: self.mean_entropy,
            mean_align: self.mean_align,
            mean_total: self.mean_total,
        }
    }

    /// `report.jsonl` (one record per line), `summary.json` and `timing.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("report.jsonl"))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r).map_err(json_err)?)?;
        }
        let summary = serde_json::to_string_pretty(&self.summary()).map_err(json_err)?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        let timing = serde_json::to_string_pretty(&self.timing).map_err(json_err)?;
        fs::write(dir.join("timing.json"), timing + "\n")?;
        Ok(())
    }

    /// Reads back what [`EvalReport::write`] produced.
    pub fn read(dir: &Path) -> Result<Self> {
        let summary: EvalSummary =
            serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)
                .map_err(json_err)?;
        if summary.version != REPORT_VERSION {
            return Err(Error::format(format!(
                "report version {}, expected {REPORT_VERSION}",
                summary.version
            )));
        }
        let records = fs::read_to_string(dir.join("report.jsonl"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(json_err))
            .collect::<Result<Vec<SampleRecord>>>()?;
        let timing = fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Ok(Self {
            version: summary.version,
            dataset_id: summary.dataset_id,
            model_hash: summary.model_hash,
            seed: summary.seed,
            config: summary.config,
            n_samples: summary.n_samples,
            accuracy: summary.accuracy,
            mean_entropy: summary.mean_entropy,
            mean_align: summary.mean_align,
            mean_total: summary.mean_total,
            records,
            timing,
        })
    }
}

pub(crate) fn json_err(e: serde_json::Error) -> Error {
    Error::format(format!("json: {e}"))
}

/// Up to `bag_size − 1` other samples sharing sample `i`'s label, in dataset
/// order after `i` (wrapping). The harness knows labels; the adaptation does not.
pub fn bag_members(data: &DatasetBundle, i: usize, bag_size: usize) -> Vec<&Image> {
    let n = data.len();
    (1..n)
        .map(|k| (i + k) % n)
        .filter(|&j| data.labels[j] == data.labels[i])
        .take(bag_size.saturating_sub(1))
        .map(|j| &data.images[j])
        .collect()
}

fn record(i: usize, label: usize, r: EpisodeResult) -> (SampleRecord, f64) {
    (
        SampleRecord {
            index: i,
            label,
            prediction: r.prediction,
            correct: r.prediction == label,
            probs: r.probs,
            steps: r.steps,
            view_seed: r.view_seed,
        },
        r.wall_time_secs,
    )
}

/// Adapts and classifies every sample. Sample `i` draws its views from
/// `derive_seed(cfg.seed, i)`. Episodic runs parallelize over samples with
/// results in sample order; continuous runs are sequential.
pub fn run_eval(
    model: &Model,
    prompts: &PromptState,
    source: Option<&SourceStats>,
    data: &DatasetBundle,
    cfg: &TtaConfig,
) -> Result<EvalReport> {
    let start = Instant::now();
    let pairs: Vec<(SampleRecord, f64)> = match cfg.mode {
        Mode::Episodic => (0..data.len())
            .into_par_iter()
            .map(|i| {
                let c = TtaConfig {
                    seed: derive_seed(cfg.seed, i as u64),
                    ..cfg.clone()
                };
                let bag: Vec<Image> = bag_members(data, i, cfg.bag_size)
                    .into_iter()
                    .cloned()
                    .collect();
                let mut p = prompts.clone();
                adapt_with_bag(&data.images[i], &bag, model, &mut p, source, &c)
                    .map(|r| record(i, data.labels[i], r))
            })
            .collect::<Result<_>>()?,
        Mode::Continuous => {
            if cfg.bag_size > 1 {
                return Err(Error::config(
                    "bag statistics are only defined for episodic runs",
                ));
            }
            let mut p = prompts.clone();
            continuous_adapt(&data.images, model, &mut p, source, cfg)?
                .into_iter()
                .enumerate()
                .map(|(i, r)| record(i, data.labels[i], r))
                .collect()
        }
    };
    let (records, per_sample_secs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let timing = Timing {
        total_secs: start.elapsed().as_secs_f64(),
        per_sample_secs,
    };
    Ok(EvalReport::from_records(
        &data.meta.id,
        model,
        cfg,
        records,
        timing,
    ))
}

/// Plain zero-shot accuracy of `prompts` (or the prompt-free model).
pub fn frozen_accuracy(
    model: &Model,
    prompts: Option<&PromptState>,
    data: &DatasetBundle,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("cannot score an empty dataset"));
    }
    let hits = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(img, &y)| {
            model
                .predict(img, prompts)
                .map(|p| (crate::model::argmax(&p) == y) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}
