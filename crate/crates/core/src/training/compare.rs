use serde::Serialize;

use super::experiment::{RunReport, RunStatus};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub status: RunStatus,
    pub model: String,
    pub views: String,
    pub normalization: String,
    pub folds: usize,
    pub accuracy: Option<f64>,
    pub mean_eer: Option<f64>,
    pub parameter_count: usize,
}

pub fn comparison_rows(reports: &[(String, RunReport)]) -> Vec<ComparisonRow> {
    reports
        .iter()
        .map(|(run, r)| ComparisonRow {
            run: run.clone(),
            status: r.status,
            model: r.model_kind.clone(),
            views: r.views.join("+"),
            normalization: r.normalization.clone(),
            folds: r.folds.len(),
            accuracy: r.averages.as_ref().map(|a| a.accuracy),
            mean_eer: r.averages.as_ref().map(|a| a.mean_eer),
            parameter_count: r.parameter_count,
        })
        .collect()
}

pub fn to_csv(rows: &[ComparisonRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Contract(format!("csv serialization: {e}")))?;
    }
    if rows.is_empty() {
        w.write_record(["run", "status", "model", "views", "normalization", "folds", "accuracy", "mean_eer", "parameter_count"])
            .map_err(|e| Error::Contract(format!("csv serialization: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.2}", 100.0 * x))
}

/// Accuracy and EER are shown in percent.
pub fn to_markdown(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "| run | status | model | views | normalization | folds | accuracy (%) | mean EER (%) | parameters |\n\
         |---|---|---|---|---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let status = match r.status {
            RunStatus::Running => "running",
            RunStatus::Complete => "complete",
            RunStatus::Failed => "failed",
        };
        out.push_str(&format!(
            "| {} | {status} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.model,
            r.views,
            r.normalization,
            r.folds,
            pct(r.accuracy),
            pct(r.mean_eer),
            r.parameter_count
        ));
    }
    out
}
