//! Metric reports, ablation tables, training history and run metadata.
//!
//! Metric columns are written with six decimals; an undefined HD95 is `NA`
//! in CSV and `null` in JSON.

use crate::error::{Error, Result};
use crate::nn::Variant;
use crate::train::metrics::SegMetrics;
use crate::train::{AblationRow, EpochRecord};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REPORT_HEADER: [&str; 5] = ["model", "DSC", "Sensitivity", "Precision", "HD95_mm"];
pub const ABLATION_HEADER: [&str; 9] = [
    "model",
    "MPE",
    "RFE",
    "MSFF",
    "WT/IWT",
    "DSC",
    "Sensitivity",
    "Precision",
    "HD95",
];
pub const HISTORY_HEADER: [&str; 4] = ["epoch", "lr", "train_loss", "val_dsc"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    #[serde(rename = "DSC")]
    pub dsc: f64,
    #[serde(rename = "Sensitivity")]
    pub sensitivity: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "HD95_mm")]
    pub hd95_mm: Option<f64>,
}

impl ReportRow {
    pub fn new(model: impl Into<String>, m: &SegMetrics) -> Self {
        Self {
            model: model.into(),
            dsc: m.dsc,
            sensitivity: m.sensitivity,
            precision: m.precision,
            hd95_mm: m.hd95_mm,
        }
    }
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt6).unwrap_or_else(|| "NA".into())
}

fn write_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    write_csv(
        &REPORT_HEADER,
        rows.iter().map(|r| {
            vec![
                r.model.clone(),
                fmt6(r.dsc),
                fmt6(r.sensitivity),
                fmt6(r.precision),
                fmt_opt(r.hd95_mm),
            ]
        }),
    )
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| schema("header", e))?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Schema {
            field: "header".into(),
            detail: format!("expected {}, got {}", REPORT_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| schema(&format!("row {}", i + 1), e))?;
        let num = |c: usize| -> Result<f64> {
            rec[c]
                .parse()
                .map_err(|e| schema(&format!("row {} {}", i + 1, REPORT_HEADER[c]), e))
        };
        rows.push(ReportRow {
            model: rec[0].to_string(),
            dsc: num(1)?,
            sensitivity: num(2)?,
            precision: num(3)?,
            hd95_mm: if &rec[4] == "NA" { None } else { Some(num(4)?) },
        });
    }
    Ok(rows)
}

fn schema(field: &str, e: impl std::fmt::Display) -> Error {
    Error::Schema {
        field: field.into(),
        detail: e.to_string(),
    }
}

pub fn save_report(dir_or_stem: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let stem = dir_or_stem.as_ref();
    std::fs::write(stem.with_extension("csv"), report_csv(rows)?)?;
    std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(rows)? + "\n")?;
    Ok(())
}

pub fn load_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    parse_report_csv(&std::fs::read_to_string(path)?)
}

fn mark(on: bool) -> String {
    if on { "yes" } else { "no" }.into()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    write_csv(
        &ABLATION_HEADER,
        rows.iter().map(|r| {
            let t = r.variant.toggles();
            vec![
                r.variant.name().to_string(),
                mark(t[0]),
                mark(t[1]),
                mark(t[2]),
                mark(t[3]),
                fmt6(r.metrics.dsc),
                fmt6(r.metrics.sensitivity),
                fmt6(r.metrics.precision),
                fmt_opt(r.metrics.hd95_mm),
            ]
        }),
    )
}

/// Values use the shortest exact decimal form, so equal histories give
/// byte-identical files.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    write_csv(
        &HISTORY_HEADER,
        history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                r.val_dsc.to_string(),
            ]
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Ablation row name of the network toggles, or `Custom`.
    pub variant: String,
    /// CRC-32 of the compact JSON config, hex.
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl RunMetadata {
    pub fn new(command: &str, seed: u64, variant: Option<Variant>, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let hash = crc32fast::hash(serde_json::to_string(&config)?.as_bytes());
        Ok(Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            variant: variant.map_or("Custom", Variant::name).into(),
            config_hash: format!("{hash:08x}"),
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(report_csv(&[]).unwrap(), "model,DSC,Sensitivity,Precision,HD95_mm\n");
    }

    #[test]
    fn csv_round_trip_keeps_formatting() {
        let rows = vec![
            ReportRow {
                model: "Full model".into(),
                dsc: 0.8082,
                sensitivity: 0.123456789,
                precision: 1.0,
                hd95_mm: Some(9.77),
            },
            ReportRow {
                model: "Baseline".into(),
                dsc: 0.0,
                sensitivity: 0.0,
                precision: 0.0,
                hd95_mm: None,
            },
        ];
        let text = report_csv(&rows).unwrap();
        assert!(text.contains("Full model,0.808200,0.123457,1.000000,9.770000"));
        assert!(text.contains("Baseline,0.000000,0.000000,0.000000,NA"));
        assert_eq!(report_csv(&parse_report_csv(&text).unwrap()).unwrap(), text);
    }
}
