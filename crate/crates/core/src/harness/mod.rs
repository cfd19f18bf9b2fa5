//! Experiment plumbing: dataset files, synthetic shifted data, settings,
//! evaluation runs, sweeps and reports.

pub mod ablation;
pub mod dataset;
pub mod eval;
pub mod gradsuite;
pub mod pipeline;
pub mod settings;
pub mod synth;

pub use ablation::{apply_axis, run_ablation, AblationRow, AblationTable, SweepSpec};
pub use dataset::{DatasetBundle, DatasetMeta, Split};
pub use eval::{
    bag_members, frozen_accuracy, run_eval, EvalReport, EvalSummary, SampleRecord, Timing,
};
pub use gradsuite::{run_grad_suite, toy_config, GradSuiteReport, TermCheck};
pub use pipeline::{prepare, statistics, train, Prepared, Trained};
pub use settings::Settings;
pub use synth::{gen_synthetic, render_split, ShiftKind, ShiftSpec, SynthConfig, SynthData};
