//! The end-to-end experiment: data, backbone, source prompts, statistics.

use super::dataset::DatasetBundle;
use super::settings::Settings;
use super::synth::{gen_synthetic, SynthData};
use crate::error::Result;
use crate::model::{pretrain_backbone, train_prompts, Model, PretrainLog, PromptState};
use crate::stats::{source_stats, SourceStats};

/// Trained backbone plus the source-fitted prompts that adaptation starts from.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub prompts: PromptState,
    pub backbone_log: PretrainLog,
    pub prompt_log: PretrainLog,
}

/// Trains the backbone without prompts, then fits the prompts on the frozen
/// backbone and commits them as the reset snapshot.
pub fn train(settings: &Settings, source: &DatasetBundle) -> Result<Trained> {
    settings.model.validate()?;
    let mut model = Model::new(settings.model.clone(), settings.model_seed())?;
    let backbone_log = pretrain_backbone(
        &mut model,
        &source.images,
        &source.labels,
        &settings.pretrain_config(),
    )?;
    let mut prompts = model.default_prompts(settings.prompt_seed())?;
    let prompt_log = if settings.prompt_train.epochs > 0 {
        train_prompts(
            &model,
            &mut prompts,
            &source.images,
            &source.labels,
            &settings.prompt_train_config(),
        )?
    } else {
        PretrainLog::default()
    };
    Ok(Trained {
        model,
        prompts,
        backbone_log,
        prompt_log,
    })
}

/// Source statistics of the prompt-free backbone over `source`.
pub fn statistics(
    settings: &Settings,
    model: &Model,
    source: &DatasetBundle,
) -> Result<SourceStats> {
    source_stats(
        model,
        &source.images,
        settings.stats_batch_size,
        settings.tta.include_cls,
        settings.stats_max_order,
        &source.meta.id,
    )
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: SynthData,
    pub trained: Trained,
    pub stats: SourceStats,
}

/// Generates data, trains, and computes statistics on the training split.
pub fn prepare(settings: &Settings) -> Result<Prepared> {
    settings.validate()?;
    let data = gen_synthetic(&settings.synth, settings.seed)?;
    let trained = train(settings, &data.train)?;
    let stats = statistics(settings, &trained.model, &data.train)?;
    Ok(Prepared {
        data,
        trained,
        stats,
    })
}
