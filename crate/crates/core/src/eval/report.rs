use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{Pipeline, RefMode};
use super::metrics::{Confusion, Label};
use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRow {
    pub id: String,
    pub label: Label,
    /// True when the item is flagged defective.
    pub decision: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub capture_rate: Option<f64>,
    pub filter_rate: Option<f64>,
    pub f_score: Option<f64>,
    #[serde(flatten)]
    pub confusion: Confusion,
    /// Why a rate is absent, when one is.
    pub notes: Vec<String>,
}

impl Aggregates {
    pub fn from_rows(rows: &[ItemRow]) -> Result<Self, EvalError> {
        let decisions: Vec<bool> = rows.iter().map(|r| r.decision).collect();
        let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
        let confusion = Confusion::from_decisions(&decisions, &labels)?;
        let mut notes = Vec::new();
        let mut keep = |r: Result<f64, EvalError>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(e.to_string());
                None
            }
        };
        Ok(Self {
            capture_rate: keep(confusion.capture_rate()),
            filter_rate: keep(confusion.filter_rate()),
            f_score: keep(confusion.f_score()),
            confusion,
            notes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pipeline: Pipeline,
    pub ref_mode: RefMode,
    pub dataset: String,
    pub items: Vec<ItemRow>,
    pub aggregates: Aggregates,
    /// Decision threshold on the score (pixel threshold for map-based pipelines).
    pub threshold: Option<f64>,
    pub reference_protocol: String,
    pub checkpoints: BTreeMap<String, String>,
    /// Configuration of the run, including the dataset hash.
    pub config: serde_json::Value,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pipeline: Pipeline,
        ref_mode: RefMode,
        dataset: String,
        items: Vec<ItemRow>,
        threshold: Option<f64>,
        reference_protocol: String,
        checkpoints: BTreeMap<String, String>,
        config: serde_json::Value,
    ) -> Result<Self, EvalError> {
        let aggregates = Aggregates::from_rows(&items)?;
        Ok(Self {
            pipeline,
            ref_mode,
            dataset,
            items,
            aggregates,
            threshold,
            reference_protocol,
            checkpoints,
            config,
        })
    }

    /// Recomputes the aggregates from the per-item rows.
    pub fn check_consistency(&self) -> Result<(), EvalError> {
        let fresh = Aggregates::from_rows(&self.items)?;
        if fresh != self.aggregates {
            return Err(EvalError::InvalidReport(format!(
                "aggregates {:?} do not match per-item rows {:?}",
                self.aggregates, fresh
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::InvalidReport(e.to_string()))
    }

    /// One row per item: `id,label,decision,score`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "label", "decision", "score"])
            .expect("in-memory csv");
        for r in &self.items {
            let label = if r.label.is_defective() { "defective" } else { "nominal" };
            let decision = if r.decision { "defective" } else { "nominal" };
            w.write_record([r.id.as_str(), label, decision, &r.score.to_string()])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is UTF-8")
    }
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, report.to_json()).map_err(io(&json))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, report.to_csv()).map_err(io(&csv))?;
    Ok(())
}
