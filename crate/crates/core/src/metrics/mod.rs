//! Evaluation engine for SiR, GSR, HOI and HHI.
//!
//! Per-item and per-class scores are computed independently (in parallel when
//! enabled) and then reduced sequentially in a canonical order (sorted ids or
//! catalog order), so reports do not depend on input order or worker count.

mod hhi;
mod hoi;
mod situation;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::BoundingBox;

pub use hhi::{eval_hhi, ExactMatchScorer, ExecScorer, HhiItem, HhiScorer, ScoreError, TokenF1Scorer, VerbSimScorer};
pub use hoi::{
    average_precision, eval_hoi, match_hoi, HoiGroundTruth, HoiImageDetections, HoiImageGroundTruth, PairBoxes,
    RankedMatch,
};
pub use situation::{
    eval_gsr, eval_sir, GsrGroundTruth, GsrPrediction, ItemScores, SirGroundTruth, SirPrediction,
};

/// Box overlap threshold used by grounded and HOI metrics, inclusive.
pub const IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union. Zero for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Top1,
    Top5,
    GtVerb,
}

impl Scenario {
    /// How many ranked hypotheses may supply the GT verb.
    pub fn rank_budget(self) -> usize {
        match self {
            Scenario::Top1 => 1,
            Scenario::Top5 => 5,
            Scenario::GtVerb => usize::MAX,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Top1 => "top1",
            Scenario::Top5 => "top5",
            Scenario::GtVerb => "gtverb",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "top1" => Ok(Scenario::Top1),
            "top5" => Ok(Scenario::Top5),
            "gtverb" => Ok(Scenario::GtVerb),
            other => Err(format!("unknown scenario {other:?} (expected top1|top5|gtverb)")),
        }
    }
}

/// How per-role correctness becomes an item-level `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueMode {
    /// 1 if at least one role is correct.
    AnyRole,
    /// Fraction of roles correct.
    PerRole,
}

impl ValueMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueMode::AnyRole => "any",
            ValueMode::PerRole => "per-role",
        }
    }
}

impl std::str::FromStr for ValueMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "any" | "any-role" | "any_role" => Ok(ValueMode::AnyRole),
            "per-role" | "per_role" => Ok(ValueMode::PerRole),
            other => Err(format!("unknown value mode {other:?} (expected any|per-role)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ground-truth item {0:?} has no prediction")]
    MissingPrediction(String),
    #[error("prediction {0:?} has no ground truth")]
    UnexpectedPrediction(String),
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("item {id:?}: {message}")]
    Schema { id: String, message: String },
    #[error("detection in image {id:?} uses class {class} which is not in the catalog")]
    UnknownClass { id: String, class: String },
    #[error("scorer failed: {0}")]
    Scorer(String),
}

impl EvalError {
    pub fn code(&self) -> &'static str {
        match self {
            EvalError::MissingPrediction(_) | EvalError::UnexpectedPrediction(_) => "id-mismatch",
            EvalError::DuplicateId(_) => "duplicate-id",
            EvalError::Schema { .. } => "schema-mismatch",
            EvalError::UnknownClass { .. } => "unknown-class",
            EvalError::Scorer(_) => "scorer-failed",
        }
    }
}

/// One per-item or per-class row of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub key: String,
    pub values: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_mode: Option<ValueMode>,
    pub items: usize,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(task: &str, items: usize) -> Self {
        EvalReport {
            task: task.to_owned(),
            scenario: None,
            value_mode: None,
            items,
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            rows: Vec::new(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text summary (metrics and counts, not rows).
    pub fn to_table(&self) -> String {
        let mut header = format!("task: {}", self.task);
        if let Some(s) = self.scenario {
            let _ = write!(header, "  scenario: {}", s.as_str());
        }
        if let Some(m) = self.value_mode {
            let _ = write!(header, "  value-mode: {}", m.as_str());
        }
        let _ = write!(header, "  items: {}", self.items);
        let width = self.metrics.keys().chain(self.counts.keys()).map(String::len).max().unwrap_or(6).max(6);
        let mut out = header;
        out.push('\n');
        let _ = writeln!(out, "{:<width$}  {:>10}", "metric", "value");
        let _ = writeln!(out, "{}  {}", "-".repeat(width), "-".repeat(10));
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k:<width$}  {:>10.4}", v);
        }
        for (k, v) in &self.counts {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }

    /// Rows as CSV with a header of `key` plus the union of value columns.
    pub fn to_csv(&self) -> String {
        let mut columns: Vec<&String> = self.rows.iter().flat_map(|r| r.values.keys()).collect();
        columns.sort();
        columns.dedup();
        let mut out = String::from("key");
        for c in &columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&csv_field(&row.key));
            for c in &columns {
                out.push(',');
                if let Some(v) = row.values.get(*c) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Sequential mean in the given order; `None` for an empty slice.
pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
