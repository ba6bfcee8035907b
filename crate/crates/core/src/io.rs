//! CSV ingestion, JSON configuration, and canonical result files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, MissingReport};
use crate::pipeline::{AnalysisConfig, BalanceRecord, ObservedBiasRecord, RecordKind};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("CSV line {line}, column '{column}': cannot read '{value}' as a number")]
    Cell {
        line: u64,
        column: String,
        value: String,
    },
    #[error("CSV header: duplicate column '{column}' at position {position}")]
    DuplicateHeader { column: String, position: usize },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(#[from] crate::pipeline::ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("records: {0}")]
    Records(String),
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| !v.is_nan())
}

/// A loaded CSV with the SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub data: Dataset,
    pub sha256: String,
}

pub fn read_csv(path: &Path) -> Result<LoadedCsv, IoError> {
    let bytes = read_file(path)?;
    let data = parse_csv(&bytes)?;
    Ok(LoadedCsv {
        data,
        sha256: sha256_hex(&bytes),
    })
}

/// Parses CSV bytes. Columns where every present cell is numeric stay
/// numeric; columns with no numeric cells are text and become `col=level`
/// indicators for every level except the alphabetically first. Empty cells
/// and `NA` are missing.
pub fn parse_csv(bytes: &[u8]) -> Result<Dataset, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let csv_err = |e: csv::Error| IoError::Csv {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    for (position, h) in headers.iter().enumerate() {
        if headers[..position].contains(h) {
            return Err(IoError::DuplicateHeader {
                column: h.clone(),
                position: position + 1,
            });
        }
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    let mut lines = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        lines.push(record.position().map_or(0, |p| p.line()));
        for (col, cell) in cells.iter_mut().zip(record.iter()) {
            col.push(cell.to_string());
        }
    }

    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (name, col) in headers.iter().zip(&cells) {
        let present: Vec<(usize, &String)> = col.iter().enumerate().filter(|(_, c)| !is_missing(c)).collect();
        let numeric = present.iter().filter(|(_, c)| parse_number(c).is_some()).count();
        if numeric == present.len() {
            names.push(name.clone());
            columns.push(col.iter().map(|c| parse_number(c).unwrap_or(f64::NAN)).collect());
        } else if numeric == 0 {
            let levels: BTreeSet<&str> = present.iter().map(|(_, c)| c.trim()).collect();
            if levels.len() < 2 {
                log::warn!("text column '{name}' has fewer than two levels and is dropped");
            }
            for level in levels.iter().skip(1) {
                names.push(format!("{name}={level}"));
                columns.push(
                    col.iter()
                        .map(|c| {
                            if is_missing(c) {
                                f64::NAN
                            } else {
                                (c.trim() == *level) as u8 as f64
                            }
                        })
                        .collect(),
                );
            }
        } else {
            let (row, value) = present
                .iter()
                .find(|(_, c)| parse_number(c).is_none())
                .expect("mixed column has a text cell");
            return Err(IoError::Cell {
                line: lines[*row],
                column: name.clone(),
                value: (*value).clone(),
            });
        }
    }
    Ok(Dataset::new(names, columns)?)
}

/// Shortest round-trip text; integers without a fraction, extremes in
/// exponent form.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v}")
    } else {
        format!("{v:?}")
    }
}

fn format_cell(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        format_number(v)
    }
}

/// Writes a dataset as CSV with shortest round-trip numbers and `NA` for
/// missing cells.
pub fn dataset_to_csv(data: &Dataset) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(data.names()).expect("in-memory write");
    for i in 0..data.nrows() {
        w.write_record(data.columns().iter().map(|c| format_cell(c[i])))
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

pub fn parse_config(text: &str) -> Result<AnalysisConfig, IoError> {
    let config: AnalysisConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<AnalysisConfig, IoError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    parse_config(&text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareInfo {
    pub name: String,
    pub version: String,
}

impl Default for SoftwareInfo {
    fn default() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Everything a run produced, plus what it was run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub software: SoftwareInfo,
    pub input_sha256: String,
    pub config: AnalysisConfig,
    pub full: ObservedBiasRecord,
    /// Drop and tip rows in display order.
    pub records: Vec<ObservedBiasRecord>,
    pub balance: Vec<BalanceRecord>,
    pub missing: MissingReport,
    /// Only recorded on request, since it differs between otherwise identical runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_seconds: Option<f64>,
}

/// Rounds to 9 significant digits.
pub fn round_sig9(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn canonical_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let r = round_sig9(n.as_f64().expect("f64 number"));
            serde_json::Number::from_f64(r).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonical_value).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, canonical_value(v))).collect()),
        other => other,
    }
}

/// JSON with sorted keys, floats at 9 significant digits, NaN as null and
/// a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T, pretty: bool) -> Result<String, IoError> {
    let v = canonical_value(serde_json::to_value(value)?);
    let mut s = if pretty {
        serde_json::to_string_pretty(&v)?
    } else {
        serde_json::to_string(&v)?
    };
    s.push('\n');
    Ok(s)
}

fn csv_float(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format_number(round_sig9(x)),
        _ => "NA".to_string(),
    }
}

/// `label,kind,estimate,lcl,ucl,oce`, full record first.
pub fn records_to_csv(full: &ObservedBiasRecord, records: &[ObservedBiasRecord]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["label", "kind", "estimate", "lcl", "ucl", "oce"])
        .expect("in-memory write");
    for r in std::iter::once(full).chain(records) {
        w.write_record([
            r.label.clone(),
            r.kind.to_string(),
            csv_float(Some(r.estimate)),
            csv_float(Some(r.lcl)),
            csv_float(Some(r.ucl)),
            csv_float(r.oce),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

fn csv_value(field: &str, s: &str, line: u64) -> Result<f64, IoError> {
    if is_missing(s) {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| IoError::Cell {
        line,
        column: field.to_string(),
        value: s.to_string(),
    })
}

/// Reads a records CSV back; returns the full record and the others.
pub fn parse_records_csv(bytes: &[u8]) -> Result<(ObservedBiasRecord, Vec<ObservedBiasRecord>), IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let csv_err = |e: csv::Error| IoError::Csv {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["label", "kind", "estimate", "lcl", "ucl", "oce"] {
        return Err(IoError::Records(format!(
            "expected header label,kind,estimate,lcl,ucl,oce, got {}",
            header.join(",")
        )));
    }
    let mut full = None;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let kind: RecordKind = record[1]
            .parse()
            .map_err(|e: String| IoError::Csv { line, message: e })?;
        let oce = csv_value("oce", &record[5], line)?;
        let r = ObservedBiasRecord {
            label: record[0].to_string(),
            kind,
            estimate: csv_value("estimate", &record[2], line)?,
            lcl: csv_value("lcl", &record[3], line)?,
            ucl: csv_value("ucl", &record[4], line)?,
            oce: (!oce.is_nan()).then_some(oce),
            error: None,
        };
        if kind == RecordKind::Full {
            if full.replace(r).is_some() {
                return Err(IoError::Records(format!("line {line}: second full-model row")));
            }
        } else {
            rows.push(r);
        }
    }
    let full = full.ok_or_else(|| IoError::Records("no row of kind 'full'".into()))?;
    Ok((full, rows))
}

/// Path of the records CSV written next to a results JSON file.
pub fn sibling_csv(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

/// Writes the canonical JSON artifact and the records CSV next to it.
pub fn write_results(artifact: &RunArtifact, json_path: &Path, pretty: bool) -> Result<PathBuf, IoError> {
    write_file(json_path, &to_canonical_json(artifact, pretty)?)?;
    let csv_path = sibling_csv(json_path);
    write_file(&csv_path, &records_to_csv(&artifact.full, &artifact.records))?;
    Ok(csv_path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = read_file(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_results(path: &Path) -> Result<RunArtifact, IoError> {
    read_json(path)
}

/// Accepts `null` for a float and reads it as NaN.
pub fn f64_or_nan<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Column renames for the right heart catheterization study file, applied
/// after indicator expansion.
pub const RHC_RENAMES: [(&str, &str); 7] = [
    ("swang1=RHC", "exposure"),
    ("dth30=Yes", "event"),
    ("t3d30", "time"),
    ("dnr1=Yes", "dnr1"),
    ("neuro=Yes", "neuro"),
    ("hema=Yes", "hema"),
    ("sex=Male", "sex"),
];

pub const RHC_COVARIATES: [&str; 20] = [
    "renalhx", "gibledhx", "transhx", "aps1", "wblc1", "hrt1", "pafi1", "alb1", "hema1", "bili1", "meanbp1",
    "paco21", "dnr1", "ph1", "resp1", "neuro", "hema", "sex", "age", "surv2md1",
];

const RHC_PHYSIOLOGY: [&str; 10] = [
    "hrt1", "wblc1", "pafi1", "alb1", "hema1", "bili1", "paco21", "meanbp1", "resp1", "ph1",
];

pub fn apply_rhc_preset(data: &mut Dataset) -> Result<(), IoError> {
    for (from, to) in RHC_RENAMES {
        data.rename(from, to)?;
    }
    Ok(())
}

/// Analysis of the study file with its 20 covariates and four groups.
pub fn rhc_config() -> AnalysisConfig {
    let mut groups = IndexMap::new();
    groups.insert(
        "All Covariates".to_string(),
        RHC_COVARIATES.iter().map(|s| s.to_string()).collect(),
    );
    groups.insert(
        "APACHE and Support prob.".to_string(),
        vec!["aps1".to_string(), "surv2md1".to_string()],
    );
    groups.insert(
        "All Physiological Measurements".to_string(),
        RHC_PHYSIOLOGY.iter().map(|s| s.to_string()).collect(),
    );
    groups.insert(
        "Physiological Measurements, APACHE, and Support prob.".to_string(),
        RHC_PHYSIOLOGY
            .iter()
            .chain(&["aps1", "surv2md1"])
            .map(|s| s.to_string())
            .collect(),
    );
    AnalysisConfig {
        groups,
        outcome_common: true,
        ..AnalysisConfig::new("exposure", "time", "event", &RHC_COVARIATES)
    }
}

/// Counts of each value of a binary column, for arm summaries.
pub fn arm_counts(data: &Dataset, column: &str) -> Result<BTreeMap<bool, usize>, IoError> {
    let mut counts = BTreeMap::new();
    for z in data.binary(column)? {
        *counts.entry(z).or_insert(0) += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_is_empty() {
        let d = parse_csv(b"a,b\n").unwrap();
        assert_eq!(d.nrows(), 0);
        assert_eq!(d.names(), ["a", "b"]);
    }

    #[test]
    fn text_columns_expand() {
        let d = parse_csv(b"sex,age\nMale,40\nFemale,NA\nMale,33.5\n").unwrap();
        assert_eq!(d.names(), ["sex=Male", "age"]);
        assert_eq!(d.column("sex=Male").unwrap(), &[1.0, 0.0, 1.0]);
        assert!(d.column("age").unwrap()[1].is_nan());

        let three = parse_csv(b"c\nb\na\nc\n\n").unwrap();
        assert_eq!(three.names(), ["c=b", "c=c"]);
    }

    #[test]
    fn missing_text_stays_missing() {
        let d = parse_csv(b"g,x\nYes,1\nNA,2\nNo,3\n").unwrap();
        let g = d.column("g=Yes").unwrap();
        assert_eq!(g[0], 1.0);
        assert!(g[1].is_nan());
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn errors_carry_coordinates() {
        let err = parse_csv(b"x,y\n1,2\n3,abc\n4,5\n").unwrap_err();
        assert!(
            matches!(&err, IoError::Cell { line: 3, column, value } if column == "y" && value == "abc"),
            "{err}"
        );
        let ragged = parse_csv(b"x,y\n1,2\n3\n").unwrap_err();
        assert!(matches!(ragged, IoError::Csv { line: 3, .. }), "{ragged}");
        let dup = parse_csv(b"x,x\n1,2\n").unwrap_err();
        assert!(matches!(dup, IoError::DuplicateHeader { position: 2, .. }));
    }

    #[test]
    fn csv_round_trip() {
        let d = parse_csv(b"a,b\n0.1,NA\n1e-300,3\n").unwrap();
        let text = dataset_to_csv(&d);
        assert_eq!(text, "a,b\n0.1,NA\n1e-300,3\n");
        assert_eq!(dataset_to_csv(&parse_csv(text.as_bytes()).unwrap()), text);
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = parse_config(r#"{"exposure":"z","time":"t","event":"d","covariates":["a"]}"#).unwrap();
        assert!(c.groups.is_empty());
        assert_eq!(c.ci_level, 0.95);
        assert!(!c.outcome_common);

        let unknown = parse_config(r#"{"exposure":"z","time":"t","event":"d","covariates":[],"colour":1}"#);
        assert!(matches!(unknown, Err(IoError::Json(_))));
        let missing = parse_config(r#"{"exposure":"z","time":"t","covariates":[]}"#).unwrap_err();
        assert!(missing.to_string().contains("event"));
        let absent = parse_config(
            r#"{"exposure":"z","time":"t","event":"d","covariates":["a"],"groups":{"g":["a","b"]}}"#,
        )
        .unwrap_err();
        assert!(absent.to_string().contains("'b'"), "{absent}");
    }

    #[test]
    fn canonical_json_rounds_and_sorts() {
        let v = serde_json::json!({"b": 1.0 / 3.0, "a": [f64::NAN, 2.0, 7u64]});
        let s = to_canonical_json(&v, false).unwrap();
        assert_eq!(s, "{\"a\":[null,2.0,7],\"b\":0.333333333}\n");
        assert_eq!(round_sig9(1.2352023456789), 1.23520235);
        assert_eq!(round_sig9(0.0), 0.0);
    }

    #[test]
    fn rhc_groups() {
        let c = rhc_config();
        c.validate().unwrap();
        assert_eq!(c.covariates.len(), 20);
        assert_eq!(c.groups["APACHE and Support prob."], ["aps1", "surv2md1"]);
        assert_eq!(c.drop_list().len(), 24);
    }

    #[test]
    fn records_csv_round_trip() {
        let full = ObservedBiasRecord {
            label: "Full model".into(),
            kind: RecordKind::Full,
            estimate: 1.2352023,
            lcl: 1.11277,
            ucl: 1.371105,
            oce: None,
            error: None,
        };
        let drop = ObservedBiasRecord {
            label: "a, \"quoted\"".into(),
            kind: RecordKind::Covariate,
            estimate: 1.0 / 3.0,
            lcl: 0.25,
            ucl: 0.5,
            oce: Some(1.0),
            error: None,
        };
        let text = records_to_csv(&full, std::slice::from_ref(&drop));
        let (f, rows) = parse_records_csv(text.as_bytes()).unwrap();
        assert_eq!(f, full);
        assert_eq!(rows[0].label, drop.label);
        assert_eq!(rows[0].estimate, 0.333333333);
        assert_eq!(records_to_csv(&f, &rows), text);
    }
}
