//! Atomised defrost examples: the observed window before a defrost run and the
//! number of seconds until the run's final point.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::WranglerError;
use crate::docstore::Document;
use crate::telemetry::{per_fridge, TelemetryRecord};

pub const DEFROST_COLLECTION: &str = "defrost_examples";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionConfig {
    /// Observed steps per example.
    pub window_len: usize,
    pub features: Vec<String>,
    /// Nominal sampling interval of the stream.
    pub cadence_s: f64,
    /// Consecutive readings further apart than `gap_factor * cadence_s` break a sequence.
    pub gap_factor: f64,
    /// Accepted defrost durations, inclusive.
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Food-safety threshold recorded on each example (not used to cut runs).
    pub threshold_temp: f64,
}

/// Defrost durations in the normal fleet range run from 1800 s to 2700 s.
pub const NORMAL_DEFROST_MAX_S: f64 = 2700.0;
pub const DEFAULT_GAP_FACTOR: f64 = 3.0;

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            window_len: 32,
            features: vec!["air_on_temperature".into(), "air_off_temperature".into()],
            cadence_s: 60.0,
            gap_factor: DEFAULT_GAP_FACTOR,
            min_duration_s: 600.0,
            max_duration_s: 3.0 * NORMAL_DEFROST_MAX_S,
            threshold_temp: 8.0,
        }
    }
}

impl ExtractionConfig {
    pub fn max_gap_s(&self) -> f64 {
        self.gap_factor * self.cadence_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefrostExample {
    pub id: String,
    pub fridge_id: String,
    pub store_id: Option<String>,
    /// `window_len` rows of `feature_names.len()` values, oldest first.
    pub observed: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    /// Seconds from the prediction instant to the end of the defrost run.
    pub target_seconds: f64,
    pub defrost_start_ts: f64,
    pub defrost_end_ts: f64,
    /// The window ends this many seconds before `defrost_start_ts`.
    pub lead_seconds: f64,
    pub threshold_temp: f64,
}

impl DefrostExample {
    /// The instant a prediction is made: the defrost start minus the lead.
    pub fn prediction_ts(&self) -> f64 {
        self.defrost_start_ts - self.lead_seconds
    }

    pub fn to_document(&self) -> Document {
        let mut doc = Document::with_id(self.id.clone());
        doc.set("fridge_id", json!(self.fridge_id));
        if let Some(s) = &self.store_id {
            doc.set("store_id", json!(s));
        }
        doc.set("observed", json!(self.observed));
        doc.set("feature_names", json!(self.feature_names));
        doc.set("target_seconds", json!(self.target_seconds));
        doc.set("defrost_start_ts", json!(self.defrost_start_ts));
        doc.set("defrost_end_ts", json!(self.defrost_end_ts));
        doc.set("lead_seconds", json!(self.lead_seconds));
        doc.set("threshold_temp", json!(self.threshold_temp));
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self, WranglerError> {
        let bad = |what: &str| WranglerError::BadDocument(format!("{}: {what}", doc.id().unwrap_or("?")));
        let num = |k: &str| doc.get_f64(k).ok_or_else(|| bad(k));
        Ok(Self {
            id: doc.id().ok_or_else(|| bad("_id"))?.to_owned(),
            fridge_id: doc.get_str("fridge_id").ok_or_else(|| bad("fridge_id"))?.to_owned(),
            store_id: doc.get_str("store_id").map(str::to_owned),
            observed: serde_json::from_value(doc.get("observed").cloned().ok_or_else(|| bad("observed"))?)
                .map_err(|_| bad("observed"))?,
            feature_names: serde_json::from_value(doc.get("feature_names").cloned().ok_or_else(|| bad("feature_names"))?)
                .map_err(|_| bad("feature_names"))?,
            target_seconds: num("target_seconds")?,
            defrost_start_ts: num("defrost_start_ts")?,
            defrost_end_ts: num("defrost_end_ts")?,
            lead_seconds: num("lead_seconds")?,
            threshold_temp: num("threshold_temp")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InsufficientHistory,
    Gap,
    DefrostInWindow,
    MissingFeature,
    Unterminated,
    ImplausibleDuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionReject {
    pub fridge_id: String,
    pub defrost_start_ts: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub examples: Vec<DefrostExample>,
    pub rejects: Vec<ExtractionReject>,
}

/// Why a window could not be assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowError {
    InsufficientHistory,
    Gap,
    MissingFeature,
}

/// The `window_len` readings strictly before `end_ts`, as a feature matrix.
///
/// This is the one window builder used for training extraction and for
/// inference, so both see bit-identical inputs for the same instant.
pub fn assemble_window(
    stream: &[TelemetryRecord],
    end_ts: f64,
    window_len: usize,
    features: &[String],
    max_gap_s: f64,
) -> Result<(usize, Vec<Vec<f64>>), WindowError> {
    let end = stream.partition_point(|r| r.timestamp < end_ts);
    if window_len == 0 || end < window_len {
        return Err(WindowError::InsufficientHistory);
    }
    let start = end - window_len;
    let window = &stream[start..end];
    if end_ts - window[window_len - 1].timestamp > max_gap_s {
        return Err(WindowError::Gap);
    }
    if window.windows(2).any(|p| p[1].timestamp - p[0].timestamp > max_gap_s) {
        return Err(WindowError::Gap);
    }
    let mut rows = Vec::with_capacity(window_len);
    for record in window {
        let row: Option<Vec<f64>> = features
            .iter()
            .map(|f| record.feature(f).filter(|v| v.is_finite()))
            .collect();
        rows.push(row.ok_or(WindowError::MissingFeature)?);
    }
    Ok((start, rows))
}

/// A maximal defrost run: index of its first `1` and of the `0` that ends it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DefrostRun {
    pub start: usize,
    pub end: Option<usize>,
}

pub fn defrost_runs(stream: &[TelemetryRecord]) -> Vec<DefrostRun> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < stream.len() {
        if stream[i].in_defrost() {
            let start = i;
            while i < stream.len() && stream[i].in_defrost() {
                i += 1;
            }
            runs.push(DefrostRun {
                start,
                end: (i < stream.len()).then_some(i),
            });
        } else {
            i += 1;
        }
    }
    runs
}

fn example_id(fridge_id: &str, start_ts: f64, lead: f64) -> String {
    format!("{fridge_id}:{start_ts}:{lead}")
}

fn build_example(
    stream: &[TelemetryRecord],
    run: DefrostRun,
    lead_seconds: f64,
    config: &ExtractionConfig,
) -> Result<DefrostExample, RejectReason> {
    let first = &stream[run.start];
    let end = run.end.ok_or(RejectReason::Unterminated)?;
    let t0 = first.timestamp;
    let t1 = stream[end].timestamp;
    let prediction_ts = t0 - lead_seconds;
    let (window_start, observed) =
        assemble_window(stream, prediction_ts, config.window_len, &config.features, config.max_gap_s()).map_err(|e| match e {
            WindowError::InsufficientHistory => RejectReason::InsufficientHistory,
            WindowError::Gap => RejectReason::Gap,
            WindowError::MissingFeature => RejectReason::MissingFeature,
        })?;
    // Everything from the window through the end of the run must be gap-free
    // and defrost-free before the run.
    let span = &stream[window_start..=end];
    if span.windows(2).any(|p| p[1].timestamp - p[0].timestamp > config.max_gap_s()) {
        return Err(RejectReason::Gap);
    }
    if stream[window_start..run.start].iter().any(TelemetryRecord::in_defrost) {
        return Err(RejectReason::DefrostInWindow);
    }
    let duration = t1 - t0;
    if duration < config.min_duration_s || duration > config.max_duration_s {
        return Err(RejectReason::ImplausibleDuration);
    }
    Ok(DefrostExample {
        id: example_id(&first.fridge_id, t0, lead_seconds),
        fridge_id: first.fridge_id.clone(),
        store_id: first.store_id.clone(),
        observed,
        feature_names: config.features.clone(),
        target_seconds: t1 - prediction_ts,
        defrost_start_ts: t0,
        defrost_end_ts: t1,
        lead_seconds,
        threshold_temp: config.threshold_temp,
    })
}

/// Extracts one example per usable defrost run, with the observed window
/// ending `lead_seconds` before the run starts.
/// `records` must be sorted by (fridge_id, timestamp).
pub fn extract_defrost_examples(records: &[TelemetryRecord], config: &ExtractionConfig, lead_seconds: f64) -> Extraction {
    let mut out = Extraction::default();
    for stream in per_fridge(records) {
        for run in defrost_runs(stream) {
            match build_example(stream, run, lead_seconds, config) {
                Ok(example) => out.examples.push(example),
                Err(reason) => out.rejects.push(ExtractionReject {
                    fridge_id: stream[run.start].fridge_id.clone(),
                    defrost_start_ts: stream[run.start].timestamp,
                    reason,
                }),
            }
        }
    }
    out
}

/// Rebuilds `example` with its window ending `lead_seconds` before the defrost
/// start. `stream` is the example's own fridge stream.
pub fn shift_for_lead_time(
    example: &DefrostExample,
    lead_seconds: f64,
    stream: &[TelemetryRecord],
    config: &ExtractionConfig,
) -> Result<DefrostExample, WranglerError> {
    if !(lead_seconds >= 0.0) {
        return Err(WranglerError::InvalidArgument(format!("lead must be non-negative, got {lead_seconds}")));
    }
    if lead_seconds == example.lead_seconds {
        return Ok(example.clone());
    }
    let insufficient = || WranglerError::InsufficientHistory {
        fridge_id: example.fridge_id.clone(),
        at_ts: example.defrost_start_ts - lead_seconds,
    };
    let prediction_ts = example.defrost_start_ts - lead_seconds;
    let (window_start, observed) =
        assemble_window(stream, prediction_ts, config.window_len, &example.feature_names, config.max_gap_s())
            .map_err(|_| insufficient())?;
    let run_start = stream.partition_point(|r| r.timestamp < example.defrost_start_ts);
    if stream[window_start..run_start].iter().any(TelemetryRecord::in_defrost) {
        return Err(insufficient());
    }
    Ok(DefrostExample {
        id: example_id(&example.fridge_id, example.defrost_start_ts, lead_seconds),
        observed,
        target_seconds: example.defrost_end_ts - prediction_ts,
        lead_seconds,
        ..example.clone()
    })
}
