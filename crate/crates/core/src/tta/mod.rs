//! Test-time prompt adaptation: per sample, draw augmented views, keep the
//! most confident ones for an entropy objective, align the token statistics
//! of all views with the source statistics, and update the prompts.

mod config;
mod engine;
pub mod loss;
pub mod optim;

pub use config::{filter_count, AlignLoss, Mode, TtaConfig};
pub use engine::{
    adapt_and_predict, adapt_with_bag, continuous_adapt, evaluate_objective, objective_grad_check,
    objective_gradient, views_align_loss, EpisodeResult, ObjectiveTerm, StepLog,
};
pub use loss::{
    align_loss, align_loss_value, combined_loss, confidence_filter, entropy_loss, LayerStatNodes,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

#[cfg(test)]
mod tests;
