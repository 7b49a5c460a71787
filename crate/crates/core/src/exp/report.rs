//! Flattens a completed run directory into plot-ready CSV and a metrics
//! table.

use crate::error::{Result, SimError};
use crate::exp::runner::{files, validate_summary_schema, Summary};
use crate::trainer::TrainHistory;
use serde::{Deserialize, Serialize};
use std::io::BufReader;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub regime: String,
    pub t0: Option<u64>,
    pub t11: Option<u64>,
    pub fit_c: Option<f64>,
    pub fit_t0: Option<f64>,
    pub fit_r2: Option<f64>,
    pub normal_accuracy: f64,
    pub hard_accuracy: f64,
    pub hard_vs_normal_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub regimes: Vec<RegimeMetrics>,
}

fn require(dir: &Path, names: &[String]) -> Result<()> {
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !dir.join(n).exists())
        .cloned()
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(SimError::MissingArtifacts(missing))
    }
}

/// One row per logged step per regime.
pub fn history_csv(histories: &[(&str, &TrainHistory)]) -> String {
    let mut out = String::from(
        "regime,step,loss,F_normal_plus,F_normal_minus,F_hard_plus,F_hard_minus,A_common,psi1_max,tracer_bias,F_normal_max,t11_ratio_max,logit_max\n",
    );
    for (regime, h) in histories {
        for r in &h.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                regime,
                r.step,
                r.loss,
                r.f_normal_plus,
                r.f_normal_minus,
                r.f_hard_plus,
                r.f_hard_minus,
                r.a_common,
                r.psi1_max,
                r.tracer_bias.map(|b| b.to_string()).unwrap_or_default(),
                r.f_normal_max,
                r.t11_ratio_max,
                r.logit_max,
            ));
        }
    }
    out
}

fn metrics_of(summary: &Summary) -> Metrics {
    let row = |r: &crate::exp::runner::RegimeSummary| RegimeMetrics {
        regime: r.regime.clone(),
        t0: r.t0,
        t11: r.t11,
        fit_c: r.fit_c,
        fit_t0: r.fit_t0,
        fit_r2: r.fit_r2,
        normal_accuracy: r.normal_accuracy,
        hard_accuracy: r.hard_accuracy,
        hard_vs_normal_ratio: r.hard_vs_normal_ratio,
    };
    Metrics {
        regimes: vec![row(&summary.coarse), row(&summary.fine)],
    }
}

fn metrics_csv(m: &Metrics) -> String {
    let mut out = String::from(
        "regime,t0,t11,fit_c,fit_t0,fit_r2,normal_accuracy,hard_accuracy,hard_vs_normal_ratio\n",
    );
    let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let opt_f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &m.regimes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.regime,
            opt_u(r.t0),
            opt_u(r.t11),
            opt_f(r.fit_c),
            opt_f(r.fit_t0),
            opt_f(r.fit_r2),
            r.normal_accuracy,
            r.hard_accuracy,
            opt_f(r.hard_vs_normal_ratio),
        ));
    }
    out
}

/// Reads a completed artifact directory and writes `report.csv` +
/// `metrics.csv` (csv format) or `metrics.json` (json format). Returns the
/// paths written.
pub fn emit_report(dir: &Path, format: ReportFormat) -> Result<Vec<std::path::PathBuf>> {
    require(
        dir,
        &[
            files::SUMMARY.to_string(),
            files::history("coarse"),
            files::history("fine"),
        ],
    )?;
    let summary_text = std::fs::read_to_string(dir.join(files::SUMMARY))?;
    let value: serde_json::Value = serde_json::from_str(&summary_text)?;
    validate_summary_schema(&value)?;
    let summary: Summary = serde_json::from_value(value)?;

    let coarse = TrainHistory::read_jsonl(BufReader::new(std::fs::File::open(
        dir.join(files::history("coarse")),
    )?))?;
    let fine = TrainHistory::read_jsonl(BufReader::new(std::fs::File::open(
        dir.join(files::history("fine")),
    )?))?;

    let metrics = metrics_of(&summary);
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let report = dir.join("report.csv");
            std::fs::write(&report, history_csv(&[("coarse", &coarse), ("fine", &fine)]))?;
            let mpath = dir.join("metrics.csv");
            std::fs::write(&mpath, metrics_csv(&metrics))?;
            written.push(report);
            written.push(mpath);
        }
        ReportFormat::Json => {
            let mpath = dir.join("metrics.json");
            std::fs::write(&mpath, serde_json::to_string_pretty(&metrics)?)?;
            written.push(mpath);
        }
    }
    Ok(written)
}
