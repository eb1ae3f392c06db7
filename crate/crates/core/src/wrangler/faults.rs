//! Fault examples: free-text work orders joined onto telemetry by regex, with
//! windows that end a fixed horizon before each fault.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{assemble_window, WranglerError, DEFAULT_GAP_FACTOR};
use crate::docstore::Document;
use crate::telemetry::{per_fridge, TelemetryRecord};

pub const FAULT_COLLECTION: &str = "fault_examples";
pub const WORK_ORDER_COLLECTION: &str = "work_orders";
/// Predict a day ahead.
pub const DEFAULT_HORIZON_S: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkOrder {
    pub raw_text: String,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultConfig {
    /// Tried in order; each needs a `fridge` group and may have `store` and
    /// `fault` groups.
    pub patterns: Vec<String>,
    /// Name used when a pattern has no `fault` group.
    pub default_fault: String,
    /// Keep only work orders whose fault name matches (case-insensitive).
    pub fault_filter: Option<String>,
    pub horizon_seconds: f64,
    pub window_len: usize,
    pub features: Vec<String>,
    pub cadence_s: f64,
    pub gap_factor: f64,
    /// Spacing of candidate negative prediction instants.
    pub negative_stride_s: f64,
    pub seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            patterns: vec![r"(?i)(?P<fault>ice cleared)\b.*?\bcase\s+(?P<fridge>\w+)\s+store\s+(?P<store>\w+)".into()],
            default_fault: "fault".into(),
            fault_filter: None,
            horizon_seconds: DEFAULT_HORIZON_S,
            window_len: 32,
            features: vec!["air_on_temperature".into(), "air_off_temperature".into()],
            cadence_s: 60.0,
            gap_factor: DEFAULT_GAP_FACTOR,
            negative_stride_s: 6.0 * 3600.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultLabel {
    NoFault,
    Fault,
}

impl FaultLabel {
    /// Class index for the two-way softmax head.
    pub fn class(self) -> usize {
        match self {
            FaultLabel::NoFault => 0,
            FaultLabel::Fault => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultExample {
    pub id: String,
    pub fridge_id: String,
    pub store_id: Option<String>,
    pub observed: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub label: FaultLabel,
    pub fault_name: String,
    pub horizon_seconds: f64,
    /// The window covers readings strictly before this instant.
    pub window_end_ts: f64,
}

impl FaultExample {
    pub fn to_document(&self) -> Document {
        let mut doc = Document::with_id(self.id.clone());
        doc.set("fridge_id", json!(self.fridge_id));
        if let Some(s) = &self.store_id {
            doc.set("store_id", json!(s));
        }
        doc.set("observed", json!(self.observed));
        doc.set("feature_names", json!(self.feature_names));
        doc.set("label", json!(self.label));
        doc.set("class", json!(self.label.class()));
        doc.set("fault_name", json!(self.fault_name));
        doc.set("horizon_seconds", json!(self.horizon_seconds));
        doc.set("window_end_ts", json!(self.window_end_ts));
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self, WranglerError> {
        let bad = |what: &str| WranglerError::BadDocument(format!("{}: {what}", doc.id().unwrap_or("?")));
        let field = |k: &str| doc.get(k).cloned().ok_or_else(|| bad(k));
        Ok(Self {
            id: doc.id().ok_or_else(|| bad("_id"))?.to_owned(),
            fridge_id: doc.get_str("fridge_id").ok_or_else(|| bad("fridge_id"))?.to_owned(),
            store_id: doc.get_str("store_id").map(str::to_owned),
            observed: serde_json::from_value(field("observed")?).map_err(|_| bad("observed"))?,
            feature_names: serde_json::from_value(field("feature_names")?).map_err(|_| bad("feature_names"))?,
            label: serde_json::from_value(field("label")?).map_err(|_| bad("label"))?,
            fault_name: doc.get_str("fault_name").ok_or_else(|| bad("fault_name"))?.to_owned(),
            horizon_seconds: doc.get_f64("horizon_seconds").ok_or_else(|| bad("horizon_seconds"))?,
            window_end_ts: doc.get_f64("window_end_ts").ok_or_else(|| bad("window_end_ts"))?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedWorkOrder {
    pub fridge_id: String,
    pub store_id: Option<String>,
    pub fault_name: String,
}

/// First pattern that yields a `fridge` capture wins.
pub fn parse_work_order(text: &str, patterns: &[Regex], default_fault: &str) -> Option<ParsedWorkOrder> {
    patterns.iter().find_map(|re| {
        let caps = re.captures(text)?;
        let fridge = caps.name("fridge")?.as_str().to_owned();
        Some(ParsedWorkOrder {
            fridge_id: fridge,
            store_id: caps.name("store").map(|m| m.as_str().to_owned()),
            fault_name: caps
                .name("fault")
                .map_or_else(|| default_fault.to_owned(), |m| m.as_str().to_lowercase()),
        })
    })
}

#[derive(Debug, Clone, Default)]
pub struct FaultMerge {
    pub examples: Vec<FaultExample>,
    /// Work orders no pattern could identify.
    pub skipped_orders: usize,
    /// Identified work orders naming a fridge absent from the telemetry.
    pub unmatched_orders: usize,
    /// Identified faults excluded by `fault_filter`.
    pub filtered_orders: usize,
    /// Candidate windows (positive or negative) that could not be assembled.
    pub rejected_windows: usize,
}

/// Builds positive windows ending `horizon_seconds` before each fault and
/// negative windows at a fixed stride, at least two horizons from any fault
/// of the same fridge. `telemetry` must be sorted by (fridge_id, timestamp).
pub fn merge_faults(
    telemetry: &[TelemetryRecord],
    work_orders: &[WorkOrder],
    config: &FaultConfig,
) -> Result<FaultMerge, WranglerError> {
    if !(config.horizon_seconds > 0.0) || !(config.negative_stride_s > 0.0) {
        return Err(WranglerError::InvalidArgument("horizon and stride must be positive".into()));
    }
    let patterns = config
        .patterns
        .iter()
        .map(|p| Regex::new(p))
        .collect::<Result<Vec<_>, _>>()?;
    let streams = per_fridge(telemetry);
    let mut by_key: BTreeMap<(Option<&str>, &str), usize> = BTreeMap::new();
    for (i, s) in streams.iter().enumerate() {
        by_key.insert((s[0].store_id.as_deref(), s[0].fridge_id.as_str()), i);
    }
    let lookup = |store: Option<&str>, fridge: &str| -> Option<usize> {
        by_key.get(&(store, fridge)).copied().or_else(|| {
            // Fall back to the fridge id alone when one side lacks a store
            // and the match is unambiguous.
            let mut hits = by_key
                .iter()
                .filter(|((s, f), _)| *f == fridge && (store.is_none() || s.is_none()));
            match (hits.next(), hits.next()) {
                (Some((_, &i)), None) => Some(i),
                _ => None,
            }
        })
    };

    let mut out = FaultMerge::default();
    let mut faults: Vec<Vec<(f64, String)>> = vec![Vec::new(); streams.len()];
    for order in work_orders {
        let Some(parsed) = parse_work_order(&order.raw_text, &patterns, &config.default_fault) else {
            log::debug!("work order without identifying features: {:?}", order.raw_text);
            out.skipped_orders += 1;
            continue;
        };
        if let Some(filter) = &config.fault_filter {
            if !parsed.fault_name.eq_ignore_ascii_case(filter) {
                out.filtered_orders += 1;
                continue;
            }
        }
        match lookup(parsed.store_id.as_deref(), &parsed.fridge_id) {
            Some(i) => faults[i].push((order.timestamp, parsed.fault_name)),
            None => out.unmatched_orders += 1,
        }
    }

    let max_gap = config.gap_factor * config.cadence_s;
    let horizon = config.horizon_seconds;
    let negative_name = config.fault_filter.clone().unwrap_or_else(|| config.default_fault.clone());
    for (stream, fridge_faults) in streams.iter().zip(&mut faults) {
        fridge_faults.sort_by(|a, b| a.0.total_cmp(&b.0));
        let first = &stream[0];
        let push = |end_ts: f64, label: FaultLabel, name: &str, out: &mut FaultMerge| {
            match assemble_window(stream, end_ts, config.window_len, &config.features, max_gap) {
                Ok((_, observed)) => out.examples.push(FaultExample {
                    id: format!("{}:{end_ts}:{}", first.fridge_id, label.class()),
                    fridge_id: first.fridge_id.clone(),
                    store_id: first.store_id.clone(),
                    observed,
                    feature_names: config.features.clone(),
                    label,
                    fault_name: name.to_owned(),
                    horizon_seconds: horizon,
                    window_end_ts: end_ts,
                }),
                Err(_) => out.rejected_windows += 1,
            }
        };
        for (ts, name) in fridge_faults.iter() {
            push(ts - horizon, FaultLabel::Fault, name, &mut out);
        }
        let start = first.timestamp;
        let end = stream[stream.len() - 1].timestamp;
        let mut p = start + config.negative_stride_s;
        while p <= end {
            if fridge_faults.iter().all(|(ts, _)| (ts - p).abs() >= 2.0 * horizon) {
                push(p, FaultLabel::NoFault, &negative_name, &mut out);
            }
            p += config.negative_stride_s;
        }
    }
    Ok(out)
}

/// Down-samples the majority class to the minority count, uniformly and
/// seeded; survivors keep their input order.
pub fn balance_classes(examples: Vec<FaultExample>, seed: u64) -> Result<Vec<FaultExample>, WranglerError> {
    let positives = examples.iter().filter(|e| e.label == FaultLabel::Fault).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(WranglerError::SingleClass);
    }
    if positives == negatives {
        return Ok(examples);
    }
    let (majority, keep_n) = if positives > negatives {
        (FaultLabel::Fault, negatives)
    } else {
        (FaultLabel::NoFault, positives)
    };
    let majority_count = positives.max(negatives);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; majority_count];
    for i in index::sample(&mut rng, majority_count, keep_n) {
        keep[i] = true;
    }
    let mut seen = 0;
    Ok(examples
        .into_iter()
        .filter(|e| {
            if e.label != majority {
                return true;
            }
            seen += 1;
            keep[seen - 1]
        })
        .collect())
}
