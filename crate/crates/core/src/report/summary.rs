use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Aggregate, CellResult, EvalScores, RunSummary};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";

/// One row per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub group: String,
    pub label: String,
    pub seed: u64,
    pub steps: usize,
    pub final_task_loss: Option<f64>,
    pub gradient_bias: Option<f64>,
    pub iou_both: Option<f64>,
    pub iou_a_only: Option<f64>,
    pub iou_b_only: Option<f64>,
    pub error: Option<String>,
}

impl SummaryRow {
    pub fn from_summary(run_id: &str, group: &str, label: &str, seed: u64, s: &RunSummary) -> Self {
        Self {
            run_id: run_id.to_string(),
            group: group.to_string(),
            label: label.to_string(),
            seed,
            steps: s.steps,
            final_task_loss: s.final_task_loss,
            gradient_bias: s.gradient_bias,
            iou_both: Some(s.eval.both),
            iou_a_only: Some(s.eval.a_only),
            iou_b_only: Some(s.eval.b_only),
            error: None,
        }
    }

    pub fn from_cell(run_id: &str, c: &CellResult) -> Self {
        match &c.summary {
            Some(s) => Self::from_summary(run_id, &c.cell.group, &c.cell.label, c.cell.seed, s),
            None => Self {
                run_id: run_id.to_string(),
                group: c.cell.group.clone(),
                label: c.cell.label.clone(),
                seed: c.cell.seed,
                steps: 0,
                final_task_loss: None,
                gradient_bias: None,
                iou_both: None,
                iou_a_only: None,
                iou_b_only: None,
                error: c.error.clone(),
            },
        }
    }

    pub fn eval(&self) -> Option<EvalScores> {
        Some(EvalScores {
            both: self.iou_both?,
            a_only: self.iou_a_only?,
            b_only: self.iou_b_only?,
        })
    }
}

/// Seed statistics for one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub run_id: String,
    pub group: String,
    pub label: String,
    pub n: usize,
    pub failed: usize,
    pub gradient_bias_mean: f64,
    pub gradient_bias_std: f64,
    pub gradient_bias_se: f64,
    pub final_task_loss_mean: f64,
    pub final_task_loss_std: f64,
    pub iou_both_mean: f64,
    pub iou_both_std: f64,
    pub iou_both_se: f64,
    pub iou_a_only_mean: f64,
    pub iou_b_only_mean: f64,
}

impl AggregateRow {
    pub fn new(run_id: &str, a: &Aggregate) -> Self {
        Self {
            run_id: run_id.to_string(),
            group: a.group.clone(),
            label: a.label.clone(),
            n: a.iou_both.n,
            failed: a.failed,
            gradient_bias_mean: a.gradient_bias.mean,
            gradient_bias_std: a.gradient_bias.std,
            gradient_bias_se: a.gradient_bias.se,
            final_task_loss_mean: a.final_task_loss.mean,
            final_task_loss_std: a.final_task_loss.std,
            iou_both_mean: a.iou_both.mean,
            iou_both_std: a.iou_both.std,
            iou_both_se: a.iou_both.se,
            iou_a_only_mean: a.iou_a_only.mean,
            iou_b_only_mean: a.iou_b_only.mean,
        }
    }
}

/// A CSV record type with a header known even when there are no rows.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

impl CsvRow for SummaryRow {
    const HEADER: &'static [&'static str] = &[
        "run_id",
        "group",
        "label",
        "seed",
        "steps",
        "final_task_loss",
        "gradient_bias",
        "iou_both",
        "iou_a_only",
        "iou_b_only",
        "error",
    ];
}

impl CsvRow for AggregateRow {
    const HEADER: &'static [&'static str] = &[
        "run_id",
        "group",
        "label",
        "n",
        "failed",
        "gradient_bias_mean",
        "gradient_bias_std",
        "gradient_bias_se",
        "final_task_loss_mean",
        "final_task_loss_std",
        "iou_both_mean",
        "iou_both_std",
        "iou_both_se",
        "iou_a_only_mean",
        "iou_b_only_mean",
    ];
}

/// Header row plus one line per item, LF terminated.
pub fn write_csv<T: CsvRow>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(T::HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Serde(format!("{}: {e}", path.display()))
    }
}
