//! One-axis sweeps over the adaptation config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use super::eval::{json_err, run_eval, EvalReport};
use super::settings::parse_layers;
use crate::error::{Error, Result};
use crate::model::{Model, PromptState};
use crate::stats::SourceStats;
use crate::tta::TtaConfig;

pub const AXES: [&str; 8] = [
    "beta",
    "n_views",
    "n_steps",
    "align_loss",
    "align_layers",
    "mode",
    "prompt_reg_lambda",
    "bag_size",
];

/// Parsed `axis=v1,v2,...` clauses, separated by `;`. Layer-set values join
/// layers with `+` (`align_layers=1,1+2,1+2+3`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axes: Vec<(String, Vec<String>)>,
}

impl SweepSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let axes = text
            .split([';', '\n'])
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(|clause| {
                let (axis, values) = clause.split_once('=').ok_or_else(|| {
                    Error::config(format!("sweep clause {clause:?} is not axis=values"))
                })?;
                let values: Vec<String> = values
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect();
                if values.is_empty() {
                    return Err(Error::config(format!("sweep axis {axis:?} has no values")));
                }
                Ok((axis.trim().to_string(), values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { axes })
    }

    pub fn single(axis: &str, values: &[&str]) -> Self {
        Self {
            axes: vec![(
                axis.to_string(),
                values.iter().map(|v| v.to_string()).collect(),
            )],
        }
    }
}

/// `base` with one axis set to `value`.
pub fn apply_axis(base: &TtaConfig, axis: &str, value: &str) -> Result<TtaConfig> {
    let mut c = base.clone();
    let bad = || Error::config(format!("{axis}: cannot parse {value:?}"));
    match axis {
        "beta" => c.beta = value.parse().map_err(|_| bad())?,
        "n_views" => c.n_views = value.parse().map_err(|_| bad())?,
        "n_steps" => c.n_steps = value.parse().map_err(|_| bad())?,
        "align_loss" => c.align_loss = value.parse()?,
        "align_layers" => c.align_layers = parse_layers(value)?,
        "mode" => c.mode = value.parse()?,
        "prompt_reg_lambda" => c.prompt_reg_lambda = value.parse().map_err(|_| bad())?,
        "bag_size" => c.bag_size = value.parse().map_err(|_| bad())?,
        _ => {
            return Err(Error::config(format!(
                "unsupported sweep axis {axis:?} ({})",
                AXES.join(", ")
            )))
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub accuracy: f64,
    pub mean_align: Option<f64>,
    pub mean_entropy: Option<f64>,
    /// Wall-clock seconds per sample; excluded from equality-sensitive files.
    #[serde(skip)]
    pub mean_latency_secs: f64,
}

impl PartialEq for AblationRow {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
            && self.accuracy == other.accuracy
            && self.mean_align == other.mean_align
            && self.mean_entropy == other.mean_entropy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    /// Fixed-width text table.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>12} {:>12} {:>12}",
            self.axis, "top1", "align", "entropy", "sec/sample"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>9.4} {:>12} {:>12} {:>12.4}",
                r.value,
                r.accuracy,
                opt(r.mean_align),
                opt(r.mean_entropy),
                r.mean_latency_secs
            );
        }
        s
    }

    /// `summary.json` (rows), `latency.json`, and one report directory per setting.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct Summary<'a> {
            version: u32,
            axis: &'a str,
            rows: &'a [AblationRow],
        }
        let summary = Summary {
            version: super::eval::REPORT_VERSION,
            axis: &self.axis,
            rows: &self.rows,
        };
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).map_err(json_err)? + "\n",
        )?;
        let latency: Vec<(&str, f64)> = self
            .rows
            .iter()
            .map(|r| (r.value.as_str(), r.mean_latency_secs))
            .collect();
        fs::write(
            dir.join("latency.json"),
            serde_json::to_string_pretty(&latency).map_err(json_err)? + "\n",
        )?;
        for (r, rep) in self.rows.iter().zip(&self.reports) {
            rep.write(&dir.join(format!("{}={}", self.axis, r.value.replace('+', "_"))))?;
        }
        Ok(())
    }
}

/// One report per value of the single swept axis, run in order.
pub fn run_ablation(
    model: &Model,
    prompts: &PromptState,
    source: Option<&SourceStats>,
    data: &DatasetBundle,
    base: &TtaConfig,
    spec: &SweepSpec,
) -> Result<AblationTable> {
    let [(axis, values)] = spec.axes.as_slice() else {
        return Err(Error::contract(format!(
            "an ablation sweeps exactly one axis, got {}",
            spec.axes.len()
        )));
    };
    let configs = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    let mut reports = Vec::with_capacity(configs.len());
    for (v, c) in values.iter().zip(&configs) {
        let rep = run_eval(model, prompts, source, data, c)?;
        rows.push(AblationRow {
            value: v.clone(),
            accuracy: rep.accuracy,
            mean_align: rep.mean_align,
            mean_entropy: rep.mean_entropy,
            mean_latency_secs: rep.timing.mean_latency(),
        });
        reports.push(rep);
    }
    Ok(AblationTable {
        axis: axis.clone(),
        rows,
        reports,
    })
}
