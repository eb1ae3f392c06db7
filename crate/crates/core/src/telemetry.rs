//! Fridge telemetry: CSV ingestion, derived feature columns and the document
//! mapping used by the `telemetry` collection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::docstore::Document;

pub const TELEMETRY_COLLECTION: &str = "telemetry";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("required column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("records are not sorted by (fridge_id, timestamp) at index {index}")]
    UnsortedInput { index: usize },
    #[error("document is not a telemetry record: {0}")]
    BadDocument(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Value of an optional sensor column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExtraValue {
    Number(f64),
    Text(String),
}

impl ExtraValue {
    pub fn parse(raw: &str) -> Self {
        match raw.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => ExtraValue::Number(v),
            _ => ExtraValue::Text(raw.to_owned()),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ExtraValue::Number(v) => Some(*v),
            ExtraValue::Text(_) => None,
        }
    }

    fn to_csv(&self) -> String {
        match self {
            ExtraValue::Number(v) => v.to_string(),
            ExtraValue::Text(s) => s.clone(),
        }
    }
}

/// Columns computed from the raw stream (flagged "derived" in the fleet schema).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedFields {
    pub timestamp_sec: f64,
    pub time_diff_sec: f64,
    #[serde(rename = "targetTemp_on")]
    pub target_temp_on: f64,
    #[serde(rename = "targetTemp_on_diff")]
    pub target_temp_on_diff: f64,
    #[serde(rename = "targetTemp_off")]
    pub target_temp_off: f64,
    #[serde(rename = "targetTemp_off_diff")]
    pub target_temp_off_diff: f64,
    /// Seconds since the current defrost run began; 0 outside defrost.
    #[serde(rename = "targetTime_sec")]
    pub target_time_sec: f64,
}

/// One reading for one fridge.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub timestamp: f64,
    pub fridge_id: String,
    pub store_id: Option<String>,
    pub air_on_temperature: f64,
    pub air_off_temperature: f64,
    pub defrost_state: u8,
    pub extra: BTreeMap<String, ExtraValue>,
    pub derived: Option<DerivedFields>,
}

impl TelemetryRecord {
    pub fn new(fridge_id: impl Into<String>, timestamp: f64, air_on: f64, air_off: f64, defrost_state: u8) -> Self {
        Self {
            timestamp,
            fridge_id: fridge_id.into(),
            store_id: None,
            air_on_temperature: air_on,
            air_off_temperature: air_off,
            defrost_state,
            extra: BTreeMap::new(),
            derived: None,
        }
    }

    pub fn in_defrost(&self) -> bool {
        self.defrost_state == 1
    }

    /// Looks up a numeric feature by name: the core temperatures, the defrost
    /// flag, derived columns, then the `extra` map.
    pub fn feature(&self, name: &str) -> Option<f64> {
        match name {
            "timestamp" => Some(self.timestamp),
            "air_on_temperature" => Some(self.air_on_temperature),
            "air_off_temperature" => Some(self.air_off_temperature),
            "defrost_state" => Some(f64::from(self.defrost_state)),
            "time_diff_sec" => self.derived.map(|d| d.time_diff_sec),
            "targetTemp_on_diff" => self.derived.map(|d| d.target_temp_on_diff),
            "targetTemp_off_diff" => self.derived.map(|d| d.target_temp_off_diff),
            "targetTime_sec" => self.derived.map(|d| d.target_time_sec),
            other => self.extra.get(other).and_then(ExtraValue::as_f64),
        }
    }
}

/// Maps CSV header names onto record fields. Unmapped columns land in
/// `extra` under their header name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub timestamp: String,
    pub fridge_id: String,
    pub store_id: Option<String>,
    pub air_on: String,
    pub air_off: String,
    pub defrost: String,
    /// Columns to skip entirely.
    pub ignore: Vec<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            fridge_id: "refrigeration_case".into(),
            store_id: Some("store_number".into()),
            air_on: "air_on_temperature".into(),
            air_off: "air_off_temperature".into(),
            defrost: "defrost_state".into(),
            ignore: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowReject {
    /// 1-based line number in the file, header included.
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTelemetry {
    pub records: Vec<TelemetryRecord>,
    pub rejects: Vec<RowReject>,
}

fn parse_float(raw: &str, column: &str) -> Result<f64, String> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("`{column}` is not a finite number: {raw:?}"))
}

fn parse_defrost(raw: &str, column: &str) -> Result<u8, String> {
    match raw.trim().parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(format!("`{column}` must be 0 or 1: {raw:?}")),
    }
}

pub fn parse_telemetry_csv(text: &str, columns: &ColumnMap) -> Result<ParsedTelemetry, TelemetryError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::Headers)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TelemetryError::MissingColumn(name.to_owned()))
    };
    let ts_col = position(&columns.timestamp)?;
    let fridge_col = position(&columns.fridge_id)?;
    let on_col = position(&columns.air_on)?;
    let off_col = position(&columns.air_off)?;
    let defrost_col = position(&columns.defrost)?;
    let store_col = columns.store_id.as_deref().and_then(|s| headers.iter().position(|h| h == s));
    let mapped = [Some(ts_col), Some(fridge_col), Some(on_col), Some(off_col), Some(defrost_col), store_col];
    let extra_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| !mapped.contains(&Some(*i)) && !columns.ignore.iter().any(|c| c == h))
        .map(|(i, h)| (i, h.to_owned()))
        .collect();

    let mut out = ParsedTelemetry::default();
    for (n, row) in reader.records().enumerate() {
        let line = n + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(RowReject { row: line, reason: e.to_string() });
                continue;
            }
        };
        let field = |i: usize| row.get(i).unwrap_or("");
        let parsed = (|| -> Result<TelemetryRecord, String> {
            let timestamp = parse_float(field(ts_col), &columns.timestamp)?;
            if timestamp <= 0.0 {
                return Err(format!("timestamp must be positive: {timestamp}"));
            }
            let fridge_id = field(fridge_col).trim();
            if fridge_id.is_empty() {
                return Err("empty fridge id".into());
            }
            let mut record = TelemetryRecord::new(
                fridge_id,
                timestamp,
                parse_float(field(on_col), &columns.air_on)?,
                parse_float(field(off_col), &columns.air_off)?,
                parse_defrost(field(defrost_col), &columns.defrost)?,
            );
            record.store_id = store_col.map(|i| field(i).trim().to_owned()).filter(|s| !s.is_empty());
            for (i, name) in &extra_cols {
                let raw = field(*i);
                if !raw.trim().is_empty() {
                    record.extra.insert(name.clone(), ExtraValue::parse(raw));
                }
            }
            Ok(record)
        })();
        match parsed {
            Ok(record) => out.records.push(record),
            Err(reason) => out.rejects.push(RowReject { row: line, reason }),
        }
    }
    Ok(out)
}

/// Writes records in the layout [`parse_telemetry_csv`] reads with `columns`.
/// Extra columns are the sorted union over all records.
pub fn write_telemetry_csv(records: &[TelemetryRecord], columns: &ColumnMap) -> String {
    let extra_names: Vec<String> = records
        .iter()
        .flat_map(|r| r.extra.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec![columns.timestamp.clone(), columns.fridge_id.clone()];
    if let Some(s) = &columns.store_id {
        header.push(s.clone());
    }
    header.extend([columns.air_on.clone(), columns.air_off.clone(), columns.defrost.clone()]);
    header.extend(extra_names.iter().cloned());
    writer.write_record(&header).expect("writing to a Vec cannot fail");
    for r in records {
        let mut row = vec![r.timestamp.to_string(), r.fridge_id.clone()];
        if columns.store_id.is_some() {
            row.push(r.store_id.clone().unwrap_or_default());
        }
        row.extend([
            r.air_on_temperature.to_string(),
            r.air_off_temperature.to_string(),
            r.defrost_state.to_string(),
        ]);
        row.extend(extra_names.iter().map(|n| r.extra.get(n).map(ExtraValue::to_csv).unwrap_or_default()));
        writer.write_record(&row).expect("writing to a Vec cannot fail");
    }
    String::from_utf8(writer.into_inner().expect("flush to Vec")).expect("csv output is UTF-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setpoints {
    pub on: f64,
    pub off: f64,
}

fn check_sorted(records: &[TelemetryRecord]) -> Result<(), TelemetryError> {
    for (i, pair) in records.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let ordered = match a.fridge_id.cmp(&b.fridge_id) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Equal => a.timestamp <= b.timestamp,
            std::cmp::Ordering::Greater => false,
        };
        if !ordered {
            return Err(TelemetryError::UnsortedInput { index: i + 1 });
        }
    }
    Ok(())
}

/// Fills [`DerivedFields`] on every record. Recomputes from scratch, so
/// applying it twice gives the same result.
pub fn derive_features(mut records: Vec<TelemetryRecord>, setpoints: Setpoints) -> Result<Vec<TelemetryRecord>, TelemetryError> {
    check_sorted(&records)?;
    let mut prev: Option<(String, f64)> = None;
    let mut defrost_began: Option<f64> = None;
    for r in &mut records {
        let same_fridge = prev.as_ref().is_some_and(|(id, _)| *id == r.fridge_id);
        let time_diff_sec = match &prev {
            Some((_, ts)) if same_fridge => r.timestamp - ts,
            _ => 0.0,
        };
        if !same_fridge {
            defrost_began = None;
        }
        if r.in_defrost() {
            defrost_began.get_or_insert(r.timestamp);
        } else {
            defrost_began = None;
        }
        r.derived = Some(DerivedFields {
            timestamp_sec: r.timestamp,
            time_diff_sec,
            target_temp_on: setpoints.on,
            target_temp_on_diff: r.air_on_temperature - setpoints.on,
            target_temp_off: setpoints.off,
            target_temp_off_diff: r.air_off_temperature - setpoints.off,
            target_time_sec: defrost_began.map_or(0.0, |t| r.timestamp - t),
        });
        prev = Some((r.fridge_id.clone(), r.timestamp));
    }
    Ok(records)
}

pub fn record_id(fridge_id: &str, timestamp: f64) -> String {
    format!("{fridge_id}:{timestamp}")
}

pub fn to_document(r: &TelemetryRecord) -> Document {
    let mut doc = Document::with_id(record_id(&r.fridge_id, r.timestamp));
    doc.set("timestamp", json!(r.timestamp));
    doc.set("fridge_id", json!(r.fridge_id));
    if let Some(s) = &r.store_id {
        doc.set("store_id", json!(s));
    }
    doc.set("air_on_temperature", json!(r.air_on_temperature));
    doc.set("air_off_temperature", json!(r.air_off_temperature));
    doc.set("defrost_state", json!(r.defrost_state));
    if !r.extra.is_empty() {
        doc.set("extra", serde_json::to_value(&r.extra).expect("scalars serialize"));
    }
    if let Some(d) = &r.derived {
        doc.set("derived", serde_json::to_value(d).expect("floats serialize"));
    }
    doc
}

pub fn to_documents(records: &[TelemetryRecord]) -> Vec<Document> {
    records.iter().map(to_document).collect()
}

pub fn from_document(doc: &Document) -> Result<TelemetryRecord, TelemetryError> {
    let bad = |what: &str| TelemetryError::BadDocument(format!("{}: {what}", doc.id().unwrap_or("?")));
    let num = |key: &str| doc.get_f64(key).ok_or_else(|| bad(key));
    let extra = match doc.get("extra") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| bad("extra"))?,
        None => BTreeMap::new(),
    };
    let derived = match doc.get("derived") {
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|_| bad("derived"))?),
        None => None,
    };
    Ok(TelemetryRecord {
        timestamp: num("timestamp")?,
        fridge_id: doc.get_str("fridge_id").ok_or_else(|| bad("fridge_id"))?.to_owned(),
        store_id: doc.get_str("store_id").map(str::to_owned),
        air_on_temperature: num("air_on_temperature")?,
        air_off_temperature: num("air_off_temperature")?,
        defrost_state: match doc.get("defrost_state").and_then(Value::as_u64) {
            Some(s @ 0..=1) => s as u8,
            _ => return Err(bad("defrost_state")),
        },
        extra,
        derived,
    })
}

/// Sorts records by (fridge_id, timestamp), stable for equal keys.
pub fn sort_records(records: &mut [TelemetryRecord]) {
    records.sort_by(|a, b| {
        a.fridge_id
            .cmp(&b.fridge_id)
            .then(a.timestamp.total_cmp(&b.timestamp))
    });
}

/// Splits a (fridge, time)-sorted list into per-fridge slices.
pub fn per_fridge(records: &[TelemetryRecord]) -> Vec<&[TelemetryRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].fridge_id != records[start].fridge_id {
            if i > start {
                out.push(&records[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Field map helper for building documents from JSON literals in tests and tools.
pub fn extra_map(pairs: &[(&str, f64)]) -> BTreeMap<String, ExtraValue> {
    pairs
        .iter()
        .map(|(k, v)| ((*k).to_owned(), ExtraValue::Number(*v)))
        .collect()
}
