//! The cleaning ledger: categorical unification, de-duplication, removal of
//! constant features and sigma clipping, applied in that order.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::WranglerError;
use crate::telemetry::{ExtraValue, TelemetryRecord};

/// Variant (lower-cased, trimmed) → canonical token; `None` maps to missing.
pub type CanonMap = BTreeMap<String, Option<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanerConfig {
    pub canon_map: CanonMap,
    pub sigma_k: f64,
    pub clip_fields: Vec<String>,
    /// Upper bound on repeated ledger passes while searching for a fixed point.
    pub max_passes: usize,
}

impl Default for CleanerConfig {
    fn default() -> Self {
        let mut canon_map = CanonMap::new();
        for v in ["yes", "y", "true", "on"] {
            canon_map.insert(v.into(), Some("yes".into()));
        }
        for v in ["no", "n", "false", "off"] {
            canon_map.insert(v.into(), Some("no".into()));
        }
        for v in ["-", "", "n/a", "na", "null"] {
            canon_map.insert(v.into(), None);
        }
        Self {
            canon_map,
            sigma_k: 6.0,
            clip_fields: vec!["air_on_temperature".into(), "air_off_temperature".into()],
            max_passes: 20,
        }
    }
}

/// Outcome of [`unify_categoricals`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Unified {
    pub values: Vec<Option<String>>,
    pub unmapped: Vec<String>,
}

pub fn unify_categoricals(values: &[Option<String>], canon: &CanonMap) -> Unified {
    let mut out = Unified::default();
    for value in values {
        let unified = match value {
            None => None,
            Some(raw) => match canon.get(&raw.trim().to_lowercase()) {
                Some(mapped) => mapped.clone(),
                None => {
                    log::debug!("categorical value {raw:?} has no canonical form");
                    out.unmapped.push(raw.clone());
                    Some(raw.clone())
                }
            },
        };
        out.values.push(unified);
    }
    out
}

/// Drops features with at most one distinct non-missing value and returns the
/// retained feature names in input order.
pub fn drop_constant_features(columns: &[(String, Vec<Option<ExtraValue>>)]) -> Result<Vec<String>, WranglerError> {
    if columns.is_empty() || columns.iter().all(|(_, v)| v.is_empty()) {
        return Err(WranglerError::EmptyDataset);
    }
    let mut retained = Vec::new();
    for (name, values) in columns {
        let distinct: BTreeSet<String> = values.iter().flatten().map(distinct_key).collect();
        if distinct.len() <= 1 {
            log::info!("dropping constant feature `{name}` ({} distinct values)", distinct.len());
        } else {
            retained.push(name.clone());
        }
    }
    Ok(retained)
}

fn distinct_key(v: &ExtraValue) -> String {
    match v {
        ExtraValue::Number(x) if *x == 0.0 => "n0".into(),
        ExtraValue::Number(x) => format!("n{x:e}"),
        ExtraValue::Text(s) => format!("s{s}"),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipOutcome {
    pub kept: Vec<f64>,
    pub removed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Standard deviation was zero, so nothing was removed.
    pub degenerate_std: bool,
}

/// Single-pass sigma clipping with the population standard deviation.
pub fn sigma_clip(values: &[f64], k: f64) -> Result<ClipOutcome, WranglerError> {
    if !(k > 0.0) {
        return Err(WranglerError::InvalidArgument(format!("sigma_clip k must be positive, got {k}")));
    }
    if values.len() < 2 {
        return Err(WranglerError::InvalidArgument("sigma_clip needs at least two values".into()));
    }
    let (mean, std) = mean_std(values);
    if std == 0.0 {
        return Ok(ClipOutcome {
            kept: values.to_vec(),
            removed: Vec::new(),
            mean,
            std,
            degenerate_std: true,
        });
    }
    let (kept, removed) = values.iter().partition(|&&v| (v - mean).abs() <= k * std);
    Ok(ClipOutcome {
        kept,
        removed,
        mean,
        std,
        degenerate_std: false,
    })
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Default)]
pub struct Deduped {
    pub records: Vec<TelemetryRecord>,
    pub removed: usize,
    /// (fridge_id, timestamp) keys whose duplicates disagreed on content.
    pub conflicts: Vec<(String, f64)>,
}

/// Removes repeats of (fridge_id, timestamp), keeping the first occurrence.
pub fn dedupe_records(records: Vec<TelemetryRecord>) -> Deduped {
    let mut first: HashMap<(String, u64), usize> = HashMap::new();
    let mut out = Deduped::default();
    for record in records {
        let key = (record.fridge_id.clone(), record.timestamp.to_bits());
        match first.get(&key) {
            Some(&pos) => {
                out.removed += 1;
                if out.records[pos] != record {
                    log::warn!("conflicting duplicate for {}@{}; keeping first", record.fridge_id, record.timestamp);
                    out.conflicts.push((record.fridge_id.clone(), record.timestamp));
                }
            }
            None => {
                first.insert(key, out.records.len());
                out.records.push(record);
            }
        }
    }
    out
}

/// Per-pass counters of the full cleaning ledger.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CleaningReport {
    pub input_records: usize,
    pub output_records: usize,
    pub passes: usize,
    pub unmapped_categoricals: usize,
    pub duplicates_removed: usize,
    pub duplicate_conflicts: usize,
    pub dropped_features: Vec<String>,
    pub clipped_records: usize,
}

/// Returns (unmapped values seen, values changed).
fn unify_records(records: &mut [TelemetryRecord], canon: &CanonMap) -> (usize, usize) {
    let mut unmapped = 0;
    let mut changed = 0;
    for record in records.iter_mut() {
        let texts: Vec<(String, String)> = record
            .extra
            .iter()
            .filter_map(|(k, v)| match v {
                ExtraValue::Text(s) => Some((k.clone(), s.clone())),
                ExtraValue::Number(_) => None,
            })
            .collect();
        for (key, raw) in texts {
            let unified = unify_categoricals(&[Some(raw.clone())], canon);
            unmapped += unified.unmapped.len();
            match unified.values.into_iter().next().flatten() {
                Some(v) if v == raw => {}
                Some(v) => {
                    changed += 1;
                    record.extra.insert(key, ExtraValue::Text(v));
                }
                None => {
                    changed += 1;
                    record.extra.remove(&key);
                }
            }
        }
    }
    (unmapped, changed)
}

fn drop_constant_extras(records: &mut [TelemetryRecord]) -> Vec<String> {
    let names: BTreeSet<String> = records.iter().flat_map(|r| r.extra.keys().cloned()).collect();
    if names.is_empty() {
        return Vec::new();
    }
    let columns: Vec<(String, Vec<Option<ExtraValue>>)> = names
        .iter()
        .map(|n| (n.clone(), records.iter().map(|r| r.extra.get(n).cloned()).collect()))
        .collect();
    let retained: BTreeSet<String> = drop_constant_features(&columns)
        .unwrap_or_default()
        .into_iter()
        .collect();
    let dropped: Vec<String> = names.difference(&retained).cloned().collect();
    for record in records.iter_mut() {
        record.extra.retain(|k, _| retained.contains(k));
    }
    dropped
}

fn clip_records(records: Vec<TelemetryRecord>, fields: &[String], k: f64) -> Result<(Vec<TelemetryRecord>, usize), WranglerError> {
    let mut keep = vec![true; records.len()];
    for field in fields {
        let present: Vec<(usize, f64)> = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.feature(field).map(|v| (i, v)))
            .collect();
        if present.len() < 2 {
            continue;
        }
        let values: Vec<f64> = present.iter().map(|(_, v)| *v).collect();
        let outcome = sigma_clip(&values, k)?;
        if outcome.degenerate_std {
            continue;
        }
        for (i, v) in present {
            if (v - outcome.mean).abs() > k * outcome.std {
                keep[i] = false;
            }
        }
    }
    let removed = keep.iter().filter(|k| !**k).count();
    let kept = records
        .into_iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then_some(r))
        .collect();
    Ok((kept, removed))
}

/// Runs unify → dedupe → drop-constant → sigma-clip, repeating the whole pass
/// until nothing changes so that cleaning already-clean data is a no-op.
/// Each individual clip is single pass; the bounds are recomputed per pass.
pub fn clean_records(records: Vec<TelemetryRecord>, config: &CleanerConfig) -> Result<(Vec<TelemetryRecord>, CleaningReport), WranglerError> {
    if records.is_empty() {
        return Err(WranglerError::EmptyDataset);
    }
    let mut report = CleaningReport {
        input_records: records.len(),
        ..CleaningReport::default()
    };
    let mut current = records;
    for pass in 1..=config.max_passes.max(1) {
        report.passes = pass;
        let (unmapped, unified) = unify_records(&mut current, &config.canon_map);
        report.unmapped_categoricals += unmapped;
        let deduped = dedupe_records(current);
        report.duplicates_removed += deduped.removed;
        report.duplicate_conflicts += deduped.conflicts.len();
        current = deduped.records;
        let dropped = drop_constant_extras(&mut current);
        let changed = unified + deduped.removed + dropped.len();
        report.dropped_features.extend(dropped);
        let (kept, clipped) = clip_records(current, &config.clip_fields, config.sigma_k)?;
        report.clipped_records += clipped;
        current = kept;
        if changed + clipped == 0 {
            break;
        }
        if current.is_empty() {
            return Err(WranglerError::EmptyDataset);
        }
    }
    report.output_records = current.len();
    Ok((current, report))
}
