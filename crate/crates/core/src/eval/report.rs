use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format_ratio;
use crate::error::{Error, Result};
use crate::util::write_atomic;

pub const REPORT_COLUMNS: [&str; 14] = [
    "experiment_id",
    "generator_ckpt",
    "target_ckpt",
    "dataset",
    "attack_type",
    "success_mode",
    "xi",
    "lambda0",
    "manipulated_rate",
    "preserved_rate",
    "n_target_px",
    "n_nontarget_px",
    "efficiency_ratio",
    "seed",
];

/// One CSV row. Absent rates print as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub generator_ckpt: String,
    pub target_ckpt: String,
    pub dataset: String,
    pub attack_type: String,
    pub success_mode: String,
    pub xi: f32,
    /// Unknown when a checkpoint is evaluated without its training config.
    pub lambda0: Option<f32>,
    pub manipulated_rate: Option<f32>,
    pub preserved_rate: Option<f32>,
    pub n_target_px: u64,
    pub n_nontarget_px: u64,
    pub efficiency_ratio: Option<f32>,
    pub seed: u64,
}

fn rate(r: Option<f32>) -> String {
    r.map(|v| format!("{v:.4}")).unwrap_or_default()
}

/// Renders rows sorted by experiment id, checkpoints, dataset, then xi.
pub fn report_csv_bytes(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&ReportRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.experiment_id, &a.generator_ckpt, &a.target_ckpt, &a.dataset)
            .cmp(&(&b.experiment_id, &b.generator_ckpt, &b.target_ckpt, &b.dataset))
            .then(a.xi.total_cmp(&b.xi))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    for r in sorted {
        w.write_record([
            r.experiment_id.clone(),
            r.generator_ckpt.clone(),
            r.target_ckpt.clone(),
            r.dataset.clone(),
            r.attack_type.clone(),
            r.success_mode.clone(),
            format!("{}", r.xi),
            r.lambda0.map(|v| v.to_string()).unwrap_or_default(),
            rate(r.manipulated_rate),
            rate(r.preserved_rate),
            r.n_target_px.to_string(),
            r.n_nontarget_px.to_string(),
            r.efficiency_ratio.map(|v| format_ratio(v as f64)).unwrap_or_default(),
            r.seed.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Contract(format!("csv buffer: {e}")))
}

/// Writes the report CSV atomically.
pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    write_atomic(path, &report_csv_bytes(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, m: Option<f32>) -> ReportRow {
        ReportRow {
            experiment_id: id.into(),
            generator_ckpt: "g".into(),
            target_ckpt: "t".into(),
            dataset: "A".into(),
            attack_type: "Vanish".into(),
            success_mode: "VanishMode".into(),
            xi: 10.0,
            lambda0: Some(0.01),
            manipulated_rate: m,
            preserved_rate: Some(0.914),
            n_target_px: 10,
            n_nontarget_px: 90,
            efficiency_ratio: Some(0.6717),
            seed: 42,
        }
    }

    #[test]
    fn header_only_and_format() {
        let empty = String::from_utf8(report_csv_bytes(&[]).unwrap()).unwrap();
        assert_eq!(empty.trim_end(), REPORT_COLUMNS.join(","));
        let s = String::from_utf8(report_csv_bytes(&[row("b", None), row("a", Some(0.7471))]).unwrap()).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[1], "a,g,t,A,Vanish,VanishMode,10,0.01,0.7471,0.9140,10,90,0.672,42");
        assert!(lines[2].starts_with("b,") && lines[2].contains(",,0.9140,"));
    }
}
