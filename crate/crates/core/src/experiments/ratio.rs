use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::write_json;
use super::sweep::{load_records, summarize, SummaryRow};
use crate::error::{Error, Result};
use crate::message_passing::ConvKind;
use crate::training::MetricsRecord;

/// Best neural against best standard readout for one (dataset, conv).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub dataset: String,
    pub conv: ConvKind,
    pub metric: String,
    pub best_neural_readout: Option<String>,
    pub best_neural: Option<f64>,
    pub best_standard_readout: Option<String>,
    pub best_standard: Option<f64>,
    /// `None` when either side is missing or the standard score is not
    /// positive.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
}

/// `neural / standard`, undefined unless `standard > 0`.
pub fn ratio(neural: f64, standard: f64) -> Option<f64> {
    (standard > 0.0).then(|| neural / standard)
}

fn best<'a>(rows: impl Iterator<Item = &'a SummaryRow>) -> Option<(String, f64)> {
    rows.filter_map(|r| r.mean.map(|m| (r.label(), m)))
        .fold(None, |acc, (l, m)| match acc {
            Some((_, b)) if b >= m => acc,
            _ => Some((l, m)),
        })
}

/// Ratio rows from raw run records, one per (dataset, conv) in order of
/// first appearance. Cell means are taken over completed seeds.
pub fn ratio_from_records(records: &[MetricsRecord]) -> RatioReport {
    let summary = summarize(records);
    let mut keys: Vec<(String, ConvKind)> = Vec::new();
    for r in &summary {
        let k = (r.dataset.clone(), r.conv);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let rows = keys
        .into_iter()
        .map(|(dataset, conv)| {
            let group: Vec<&SummaryRow> = summary
                .iter()
                .filter(|r| r.dataset == dataset && r.conv == conv)
                .collect();
            let metric = group
                .iter()
                .map(|r| r.metric.as_str())
                .find(|m| *m != "na")
                .unwrap_or("na")
                .to_string();
            let neural = best(group.iter().copied().filter(|r| !r.readout.is_standard()));
            let standard = best(group.iter().copied().filter(|r| r.readout.is_standard()));
            let ratio = match (&neural, &standard) {
                (Some((_, n)), Some((_, s))) => ratio(*n, *s),
                _ => None,
            };
            RatioRow {
                dataset,
                conv,
                metric,
                best_neural_readout: neural.as_ref().map(|x| x.0.clone()),
                best_neural: neural.map(|x| x.1),
                best_standard_readout: standard.as_ref().map(|x| x.0.clone()),
                best_standard: standard.map(|x| x.1),
                ratio,
            }
        })
        .collect();
    RatioReport { rows }
}

pub fn ratio_csv(report: &RatioReport) -> String {
    let na = |v: &Option<String>| v.clone().unwrap_or_else(|| "NA".into());
    let num = |v: Option<f64>| v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"));
    let mut s = String::from("dataset,conv,metric,best_neural_readout,best_neural,best_standard_readout,best_standard,ratio\n");
    for r in &report.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.dataset,
            r.conv,
            r.metric,
            na(&r.best_neural_readout),
            num(r.best_neural),
            na(&r.best_standard_readout),
            num(r.best_standard),
            num(r.ratio)
        )
        .unwrap();
    }
    s
}

/// Reads the records of a finished sweep and writes `ratio.json` and
/// `ratio.csv` into `out`.
pub fn ratio_report(sweep_dir: &Path, out: &Path) -> Result<RatioReport> {
    let records = load_records(sweep_dir)?;
    if records.is_empty() {
        return Err(Error::Missing(format!(
            "no run records under {}",
            sweep_dir.display()
        )));
    }
    let report = ratio_from_records(&records);
    write_json(out.join("ratio.json"), &report)?;
    let csv = out.join("ratio.csv");
    std::fs::write(&csv, ratio_csv(&report)).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}
