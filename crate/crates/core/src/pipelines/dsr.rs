use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    annotate_meta, fridge_streams, open_writer, with_lead, LearnOutcome, LearnRequest, PipelineError, StoredModel,
    CLEAN_TELEMETRY_COLLECTION, TEST_SPLIT, TRAIN_SPLIT,
};
use crate::docstore::{Document, Store};
use crate::fridgesim::DsrEvent;
use crate::neural::{predict, train, HeadKind, LossKind, NetworkSpec, Output, Target, TrainingExample};
use crate::telemetry::{self, derive_features, Setpoints, TELEMETRY_COLLECTION};
use crate::wrangler::{
    assemble_window, clean_records, extract_defrost_examples, split_dataset, CleanerConfig, CleaningReport, DefrostExample,
    ExtractionConfig, WindowError, DEFROST_COLLECTION,
};

pub const DSR_PREDICTIONS_COLLECTION: &str = "dsr_predictions";
pub const SELECTIONS_COLLECTION: &str = "dsr_selections";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DsrWrangleSummary {
    pub cleaning: CleaningReport,
    /// Examples per lead, in lead order.
    pub examples: Vec<(f64, usize)>,
    pub rejects: usize,
    pub train_runs: usize,
    pub test_runs: usize,
}

/// The splitter also sizes a validation draw; tasks resample their own per
/// epoch, so only its test side matters here.
pub(crate) fn nominal_val_fraction(test_fraction: f64) -> f64 {
    test_fraction.min((1.0 - test_fraction) / 2.0)
}

/// A defrost run's identity across leads.
fn run_key(e: &DefrostExample) -> String {
    format!("{}:{}", e.fridge_id, e.defrost_start_ts)
}

/// Cleans the raw telemetry into [`CLEAN_TELEMETRY_COLLECTION`], extracts one
/// example per defrost run and lead, and tags each with a train/test split
/// drawn over runs, so every lead of a run lands on the same side.
#[allow(clippy::too_many_arguments)]
pub fn wrangle_dsr(
    store_path: &Path,
    cleaner: &CleanerConfig,
    extraction: &ExtractionConfig,
    setpoints: Setpoints,
    leads: &[f64],
    test_fraction: f64,
    seed: u64,
) -> Result<DsrWrangleSummary, PipelineError> {
    if leads.is_empty() || leads.iter().any(|l| !(*l >= 0.0)) {
        return Err(PipelineError::InvalidArgument("leads must be a non-empty list of non-negative seconds".into()));
    }
    let raw = super::load_telemetry(&Store::open_reader(store_path)?, TELEMETRY_COLLECTION)?;
    if raw.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let (cleaned, cleaning) = clean_records(raw, cleaner)?;
    let cleaned = derive_features(cleaned, setpoints)?;

    let mut per_lead = Vec::new();
    let mut rejects = 0;
    let mut all = Vec::new();
    for &lead in leads {
        let extraction = extract_defrost_examples(&cleaned, extraction, lead);
        per_lead.push((lead, extraction.examples.len()));
        rejects += extraction.rejects.len();
        all.extend(extraction.examples);
    }
    let keys: Vec<String> = all.iter().map(run_key).collect::<BTreeSet<_>>().into_iter().collect();
    if keys.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let split = split_dataset(&keys, test_fraction, nominal_val_fraction(test_fraction), seed)?;
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    let docs: Vec<Document> = all
        .iter()
        .map(|e| {
            let mut doc = e.to_document();
            let side = if test.contains(run_key(e).as_str()) { TEST_SPLIT } else { TRAIN_SPLIT };
            doc.set("split", json!(side));
            doc
        })
        .collect();

    let mut store = open_writer(store_path)?;
    store.replace_collection(CLEAN_TELEMETRY_COLLECTION, cleaned.iter().map(telemetry::to_document))?;
    store.create_index(CLEAN_TELEMETRY_COLLECTION, "fridge_id")?;
    store.replace_collection(DEFROST_COLLECTION, docs)?;
    let summary = DsrWrangleSummary {
        cleaning,
        examples: per_lead,
        rejects,
        train_runs: split.train.len(),
        test_runs: split.test.len(),
    };
    log::info!("dsr wrangle: {summary:?}");
    Ok(summary)
}

/// Trains a regression model on the defrost examples selected by the
/// request's pipeline at `lead_seconds`, and stores it.
pub fn learn_dsr(store_path: &Path, request: &LearnRequest, lead_seconds: f64, max_gap_s: f64) -> Result<LearnOutcome, PipelineError> {
    let pipeline = with_lead(&request.pipeline, lead_seconds)?;
    let examples = {
        let store = Store::open_reader(store_path)?;
        store
            .aggregate(DEFROST_COLLECTION, &pipeline)?
            .iter()
            .map(DefrostExample::from_document)
            .collect::<Result<Vec<_>, _>>()?
    };
    let Some(first) = examples.first() else {
        return Err(PipelineError::EmptyDataset);
    };
    let features = first.feature_names.clone();
    let window_len = first.observed.len();
    if examples.iter().any(|e| e.feature_names != features || e.observed.len() != window_len) {
        return Err(PipelineError::InvalidArgument("selected examples disagree on window shape".into()));
    }
    let data: Vec<TrainingExample> = examples
        .iter()
        .map(|e| TrainingExample {
            x: e.observed.clone(),
            target: Target::Value(e.target_seconds),
        })
        .collect();
    let net = request.net;
    let spec = NetworkSpec::stacked(net.kind, net.hidden, net.depth, HeadKind::Linear, window_len, features.len());
    let hyper = crate::neural::TrainHyper {
        loss: LossKind::Mae,
        lead_seconds,
        ..request.hyper.clone()
    };
    let (artifact, _) = train(&spec, &data, &hyper)?;
    let (mut meta, bytes) = artifact.to_blob();
    annotate_meta(
        &mut meta,
        &request.name,
        "dsr",
        &pipeline,
        &[
            ("lead_seconds", json!(lead_seconds)),
            ("feature_names", json!(features)),
            ("max_gap_s", json!(max_gap_s)),
            ("n_examples", json!(data.len())),
            ("architecture", json!(net.describe())),
        ],
    );
    let model_id = open_writer(store_path)?.put_model(meta, &bytes)?;
    log::info!("stored dsr model {} ({}, lead {lead_seconds} s) as {model_id}", request.name, net.describe());
    Ok(LearnOutcome {
        model_id,
        artifact,
        n_examples: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsrPrediction {
    pub fridge_id: String,
    /// Seconds after `as_of_ts` the fridge can stay off before breaching.
    pub predicted_safe_off_s: f64,
    pub model_id: String,
    pub as_of_ts: f64,
    pub lead_seconds: f64,
}

impl DsrPrediction {
    pub fn to_document(&self) -> Document {
        let mut doc = Document::with_id(format!("{}:{}:{}", self.model_id, self.fridge_id, self.as_of_ts));
        for (k, v) in serde_json::to_value(self).expect("finite prediction").as_object().expect("struct") {
            doc.set(k.clone(), v.clone());
        }
        doc
    }

    pub fn from_document(doc: &Document) -> Option<Self> {
        let mut value = doc.clone().into_value();
        value.as_object_mut()?.remove(crate::docstore::ID_FIELD);
        serde_json::from_value(value).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferFailure {
    pub fridge_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DsrInference {
    pub predictions: Vec<DsrPrediction>,
    pub failures: Vec<InferFailure>,
}

pub(crate) fn window_failure(e: WindowError) -> &'static str {
    match e {
        WindowError::InsufficientHistory => "insufficient history",
        WindowError::Gap => "gap in window",
        WindowError::MissingFeature => "missing feature",
    }
}

/// Predicts, per fridge, how long it can stay off from `as_of_ts`, using the
/// window ending `lead_seconds` earlier. The window is built exactly as in
/// extraction. Fridges without a usable window are reported, not fatal.
pub fn infer_dsr(
    store: &Store,
    model_id: &str,
    fridge_ids: &[String],
    as_of_ts: f64,
    lead_seconds: f64,
) -> Result<DsrInference, PipelineError> {
    let model = StoredModel::load(store, model_id)?;
    if model.artifact.spec.head != HeadKind::Linear {
        return Err(PipelineError::InvalidArgument(format!("model `{model_id}` is not a regression model")));
    }
    if model.lead_seconds() != lead_seconds {
        log::warn!("model {model_id} was trained at lead {} s, inferring at {lead_seconds} s", model.lead_seconds());
    }
    let features = model.features()?;
    let mut out = DsrInference::default();
    let streams = fridge_streams(store, fridge_ids)?;
    for fridge in fridge_ids {
        let stream = &streams[fridge];
        let window = assemble_window(&stream, as_of_ts - lead_seconds, model.artifact.spec.seq_len, &features, model.max_gap_s());
        match window {
            Ok((_, x)) => {
                let Output::Value(seconds) = predict(&model.artifact, &x)? else {
                    unreachable!("linear head")
                };
                out.predictions.push(DsrPrediction {
                    fridge_id: fridge.clone(),
                    predicted_safe_off_s: seconds - lead_seconds,
                    model_id: model_id.to_owned(),
                    as_of_ts,
                    lead_seconds,
                });
            }
            Err(e) => {
                log::warn!("no prediction for {fridge}: {}", window_failure(e));
                out.failures.push(InferFailure {
                    fridge_id: fridge.clone(),
                    reason: window_failure(e).into(),
                });
            }
        }
    }
    Ok(out)
}

/// Rated power per fridge: the largest `power_kw` seen in its cleaned stream.
pub fn fridge_powers(store: &Store) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    let scanned = store.scan(CLEAN_TELEMETRY_COLLECTION, |doc| {
        let (Some(id), Some(p)) = (doc.get_str("fridge_id"), doc.get_path("extra.power_kw").and_then(|v| v.as_f64())) else {
            return;
        };
        match out.get_mut(id) {
            Some(e) => *e = e.max(p),
            None => {
                out.insert(id.to_owned(), p);
            }
        }
    });
    if let Err(e) = scanned {
        log::error!("reading {CLEAN_TELEMETRY_COLLECTION}: {e}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSelection {
    pub event: DsrEvent,
    pub chosen: Vec<String>,
    pub shed_kw: f64,
    pub feasible: bool,
    pub safety_margin_s: f64,
}

impl CandidateSelection {
    pub fn to_document(&self, id: impl Into<String>) -> Document {
        let mut doc = Document::with_id(id);
        for (k, v) in serde_json::to_value(self).expect("finite selection").as_object().expect("struct") {
            doc.set(k.clone(), v.clone());
        }
        doc
    }
}

/// Greedy shedding: among fridges whose predicted safe-off time, less the
/// margin, covers the event, take the most powerful first (ties: longer
/// safe-off, then id) until the target is met.
pub fn select_dsr_candidates(
    predictions: &[DsrPrediction],
    powers: &BTreeMap<String, f64>,
    event: &DsrEvent,
    safety_margin_s: f64,
) -> Result<CandidateSelection, PipelineError> {
    let mut eligible = Vec::new();
    for p in predictions {
        let power = *powers.get(&p.fridge_id).ok_or_else(|| PipelineError::MissingPower(p.fridge_id.clone()))?;
        if p.predicted_safe_off_s - safety_margin_s >= event.secondary_s {
            eligible.push((p, power));
        }
    }
    eligible.sort_by(|(a, pa), (b, pb)| {
        pb.total_cmp(pa)
            .then(b.predicted_safe_off_s.total_cmp(&a.predicted_safe_off_s))
            .then(a.fridge_id.cmp(&b.fridge_id))
    });
    let mut chosen = Vec::new();
    let mut shed_kw = 0.0;
    for (p, power) in eligible {
        if shed_kw >= event.target_shed_kw {
            break;
        }
        chosen.push(p.fridge_id.clone());
        shed_kw += power;
    }
    Ok(CandidateSelection {
        event: event.clone(),
        feasible: shed_kw >= event.target_shed_kw,
        chosen,
        shed_kw,
        safety_margin_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, safe: f64) -> DsrPrediction {
        DsrPrediction {
            fridge_id: id.into(),
            predicted_safe_off_s: safe,
            model_id: "m".into(),
            as_of_ts: 0.0,
            lead_seconds: 0.0,
        }
    }

    fn abc() -> (Vec<DsrPrediction>, BTreeMap<String, f64>) {
        let preds = vec![pred("A", 2000.0), pred("B", 2000.0), pred("C", 1500.0)];
        let powers = [("A", 2.0), ("B", 1.0), ("C", 1.0)].into_iter().map(|(k, v)| (k.to_owned(), v)).collect();
        (preds, powers)
    }

    fn event(target: f64) -> DsrEvent {
        DsrEvent {
            secondary_s: 1800.0,
            ..DsrEvent::new(0.0, target)
        }
    }

    #[test]
    fn picks_the_biggest_eligible_fridge() {
        let (preds, powers) = abc();
        let s = select_dsr_candidates(&preds, &powers, &event(2.0), 0.0).unwrap();
        assert_eq!(s.chosen, ["A"]);
        assert!(s.feasible);
        assert_eq!(s.shed_kw, 2.0);
    }

    #[test]
    fn infeasible_when_eligible_power_runs_out() {
        let (preds, powers) = abc();
        let s = select_dsr_candidates(&preds, &powers, &event(4.0), 0.0).unwrap();
        assert!(!s.feasible);
        assert_eq!(s.chosen, ["A", "B"]);
    }

    #[test]
    fn zero_target_needs_nobody() {
        let (preds, powers) = abc();
        let s = select_dsr_candidates(&preds, &powers, &event(0.0), 0.0).unwrap();
        assert!(s.chosen.is_empty());
        assert!(s.feasible);
    }

    #[test]
    fn margin_and_ties() {
        let (preds, powers) = abc();
        // 2000 - 300 < 1800: nobody qualifies.
        let s = select_dsr_candidates(&preds, &powers, &event(1.0), 300.0).unwrap();
        assert!(s.chosen.is_empty() && !s.feasible);
        let preds = vec![pred("Z", 2500.0), pred("Y", 2500.0), pred("X", 3000.0)];
        let powers = ["X", "Y", "Z"].iter().map(|k| (k.to_string(), 1.0)).collect();
        let s = select_dsr_candidates(&preds, &powers, &event(3.0), 0.0).unwrap();
        assert_eq!(s.chosen, ["X", "Y", "Z"]);
        assert!(matches!(
            select_dsr_candidates(&[pred("Q", 1.0)], &BTreeMap::new(), &event(1.0), 0.0),
            Err(PipelineError::MissingPower(_))
        ));
    }
}
