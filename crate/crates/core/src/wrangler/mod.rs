//! Cleaning and atomisation: raw telemetry in, self-contained training
//! examples out.

mod clean;
mod defrost;
mod faults;
mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clean::{
    clean_records, dedupe_records, drop_constant_features, sigma_clip, unify_categoricals, CanonMap, CleanerConfig,
    CleaningReport, ClipOutcome, Deduped, Unified,
};
pub use defrost::{
    assemble_window, defrost_runs, extract_defrost_examples, shift_for_lead_time, DefrostExample, DefrostRun,
    Extraction, ExtractionConfig, ExtractionReject, RejectReason, WindowError, DEFAULT_GAP_FACTOR, DEFROST_COLLECTION,
    NORMAL_DEFROST_MAX_S,
};
pub use faults::{
    balance_classes, merge_faults, parse_work_order, FaultConfig, FaultExample, FaultLabel, FaultMerge, ParsedWorkOrder,
    WorkOrder, DEFAULT_HORIZON_S, FAULT_COLLECTION, WORK_ORDER_COLLECTION,
};
pub use split::{resample_validation, split_dataset, DatasetSplit};

#[derive(Debug, Error)]
pub enum WranglerError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("fridge `{fridge_id}` lacks history for a window ending at {at_ts}")]
    InsufficientHistory { fridge_id: String, at_ts: f64 },
    #[error("only one class present; cannot balance")]
    SingleClass,
    #[error("{n} examples are too few for the requested split")]
    TooFewExamples { n: usize },
    #[error("bad work-order pattern: {0}")]
    BadPattern(#[from] regex::Error),
    #[error("malformed example document: {0}")]
    BadDocument(String),
}

/// The wrangle section of a run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WranglerConfig {
    pub cleaner: CleanerConfig,
    pub extraction: ExtractionConfig,
    pub faults: FaultConfig,
}
