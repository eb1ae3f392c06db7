//! The two case studies as store-mediated tasks: defrost-duration regression
//! for demand-side response, and day-ahead fault classification.
//!
//! Tasks read their inputs from the store and write their outputs back; no
//! task depends on another's process-local state.

mod dsr;
mod faults;
mod ingest;
mod report;

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::docstore::{AggregationPipeline, Document, Store, StoreError};
use crate::neural::{LayerKind, ModelArtifact, NeuralError};
use crate::telemetry::{self, TelemetryError, TelemetryRecord};
use crate::wrangler::WranglerError;

pub use dsr::{
    fridge_powers, infer_dsr, learn_dsr, select_dsr_candidates, wrangle_dsr, CandidateSelection, DsrInference,
    DsrPrediction, DsrWrangleSummary, InferFailure, DSR_PREDICTIONS_COLLECTION, SELECTIONS_COLLECTION,
};
pub use faults::{
    infer_faults, learn_faults, wrangle_faults, FaultInference, FaultPrediction, FaultWrangleSummary, FAULT_PREDICTIONS_COLLECTION,
};
pub use ingest::{ingest_records, IngestSummary};
pub use report::{
    build_report, evaluate_model, render_table, DsrRow, EvalSummary, FaultRow, Report, ReportRequest, REPORTS_COLLECTION,
    TEST_PREDICTIONS_COLLECTION,
};

/// Telemetry after the cleaning ledger; inference windows come from here.
pub const CLEAN_TELEMETRY_COLLECTION: &str = "telemetry_clean";
/// Value of the `split` field on held-out examples.
pub const TEST_SPLIT: &str = "test";
pub const TRAIN_SPLIT: &str = "train";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("only one class present")]
    SingleClass,
    #[error("classes must be balanced before training, got {positives} fault and {negatives} no-fault examples")]
    BalanceRequired { positives: usize, negatives: usize },
    #[error("no power rating for fridge `{0}`")]
    MissingPower(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wrangler(#[from] WranglerError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// How long a task waits for the store's writer lock.
pub const LOCK_TIMEOUT: Duration = Duration::from_secs(600);

pub(crate) fn open_writer(path: &Path) -> Result<Store, PipelineError> {
    Ok(Store::open_wait(path, LOCK_TIMEOUT)?)
}

/// Depth × width of a stacked recurrent network; sequence length and input
/// width come from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub kind: LayerKind,
    pub hidden: usize,
    pub depth: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            kind: LayerKind::Lstm,
            hidden: 32,
            depth: 2,
        }
    }
}

impl NetConfig {
    pub fn describe(&self) -> String {
        let kind = match self.kind {
            LayerKind::Rnn => "RNN",
            LayerKind::Lstm => "LSTM",
        };
        format!("{}x{kind}({})", self.depth, self.hidden)
    }
}

/// Hex SHA-256 of the pipeline's canonical JSON.
pub fn pipeline_hash(pipeline: &AggregationPipeline) -> String {
    let digest = Sha256::digest(pipeline.to_json_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `pipeline` preceded by an equality match on `lead_seconds`.
pub fn with_lead(pipeline: &AggregationPipeline, lead_seconds: f64) -> Result<AggregationPipeline, StoreError> {
    let mut out = AggregationPipeline::from_value(&json!([{ "$match": { "lead_seconds": lead_seconds } }]))?;
    out.stages.extend(pipeline.stages.iter().cloned());
    Ok(out)
}

/// All records of a telemetry collection, sorted by (fridge, time).
pub fn load_telemetry(store: &Store, collection: &str) -> Result<Vec<TelemetryRecord>, PipelineError> {
    let mut records = Vec::new();
    let mut bad = None;
    store.scan(collection, |d| match telemetry::from_document(d) {
        Ok(r) => records.push(r),
        Err(e) => {
            bad.get_or_insert(e);
        }
    })?;
    if let Some(e) = bad {
        return Err(e.into());
    }
    telemetry::sort_records(&mut records);
    Ok(records)
}

/// The cleaned streams of the given fridges, each sorted by time, read in
/// one pass. Fridges with no readings map to an empty stream.
pub(crate) fn fridge_streams(store: &Store, fridge_ids: &[String]) -> Result<std::collections::BTreeMap<String, Vec<TelemetryRecord>>, PipelineError> {
    let mut out: std::collections::BTreeMap<String, Vec<TelemetryRecord>> = fridge_ids.iter().map(|f| (f.clone(), Vec::new())).collect();
    let mut bad = None;
    store.scan(CLEAN_TELEMETRY_COLLECTION, |d| {
        let Some(stream) = d.get_str("fridge_id").and_then(|f| out.get_mut(f)) else {
            return;
        };
        match telemetry::from_document(d) {
            Ok(r) => stream.push(r),
            Err(e) => {
                bad.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = bad {
        return Err(e.into());
    }
    for stream in out.values_mut() {
        stream.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(out)
}

/// Fridge ids present in the cleaned telemetry, sorted.
pub fn fridge_ids(store: &Store) -> Vec<String> {
    let mut ids = std::collections::BTreeSet::new();
    let scanned = store.scan(CLEAN_TELEMETRY_COLLECTION, |d| {
        if let Some(f) = d.get_str("fridge_id") {
            if !ids.contains(f) {
                ids.insert(f.to_owned());
            }
        }
    });
    if let Err(e) = scanned {
        log::error!("reading {CLEAN_TELEMETRY_COLLECTION}: {e}");
    }
    ids.into_iter().collect()
}

/// A stored model with the metadata the tasks attach to it.
#[derive(Debug, Clone)]
pub struct StoredModel {
    pub model_id: String,
    pub meta: Document,
    pub artifact: ModelArtifact,
}

impl StoredModel {
    pub fn load(store: &Store, model_id: &str) -> Result<Self, PipelineError> {
        let (meta, bytes) = store.get_model(model_id)?;
        let artifact = ModelArtifact::from_blob(&meta, &bytes)?;
        Ok(Self {
            model_id: model_id.to_owned(),
            meta,
            artifact,
        })
    }

    /// The most recently stored model called `name`, optionally at a given lead.
    pub fn latest(store: &Store, name: &str, lead_seconds: Option<f64>) -> Result<Self, PipelineError> {
        let found = store
            .models_named(name)
            .into_iter()
            .filter(|m| lead_seconds.is_none_or(|l| m.meta.get_f64("lead_seconds") == Some(l)))
            .last()
            .ok_or_else(|| match lead_seconds {
                Some(l) => PipelineError::NotFound(format!("model `{name}` at lead {l} s")),
                None => PipelineError::NotFound(format!("model `{name}`")),
            })?;
        Self::load(store, &found.model_id)
    }

    pub fn features(&self) -> Result<Vec<String>, PipelineError> {
        self.meta
            .get("feature_names")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| PipelineError::NotFound(format!("feature_names in model `{}`", self.model_id)))
    }

    pub fn max_gap_s(&self) -> f64 {
        self.meta.get_f64("max_gap_s").unwrap_or(f64::INFINITY)
    }

    pub fn lead_seconds(&self) -> f64 {
        self.meta.get_f64("lead_seconds").unwrap_or(0.0)
    }
}

/// Everything a learn task needs besides the store.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnRequest {
    /// Recorded as `meta.name`; later tasks look models up by it.
    pub name: String,
    pub pipeline: AggregationPipeline,
    pub net: NetConfig,
    pub hyper: crate::neural::TrainHyper,
}

#[derive(Debug, Clone)]
pub struct LearnOutcome {
    pub model_id: String,
    pub artifact: ModelArtifact,
    pub n_examples: usize,
}

/// Adds the task-level fields to an artifact's meta document.
pub(crate) fn annotate_meta(meta: &mut Document, name: &str, task: &str, pipeline: &AggregationPipeline, extra: &[(&str, serde_json::Value)]) {
    meta.set("name", json!(name));
    meta.set("task", json!(task));
    meta.set("pipeline", json!(pipeline.to_json_string()));
    meta.set("pipeline_hash", json!(pipeline_hash(pipeline)));
    for (k, v) in extra {
        meta.set(*k, v.clone());
    }
}
