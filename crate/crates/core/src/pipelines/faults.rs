use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dsr::{nominal_val_fraction, window_failure};
use super::ingest::load_work_orders;
use super::{
    annotate_meta, fridge_streams, open_writer, InferFailure, LearnOutcome, LearnRequest, PipelineError, StoredModel, TEST_SPLIT,
    TRAIN_SPLIT,
};
use crate::docstore::{Document, Store};
use crate::neural::{predict, train, HeadKind, LossKind, NetworkSpec, Output, Target, TrainingExample};
use crate::telemetry::{derive_features, Setpoints, TELEMETRY_COLLECTION};
use crate::wrangler::{
    assemble_window, balance_classes, clean_records, merge_faults, split_dataset, CleanerConfig, FaultConfig, FaultExample,
    FaultLabel, FAULT_COLLECTION,
};

pub const FAULT_PREDICTIONS_COLLECTION: &str = "fault_predictions";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultWrangleSummary {
    pub merged: usize,
    pub balanced: usize,
    pub skipped_orders: usize,
    pub unmatched_orders: usize,
    pub rejected_windows: usize,
    pub train: usize,
    pub test: usize,
}

/// Cleans the raw telemetry the same way the DSR wrangle does, labels
/// windows from the work orders, balances the classes and splits each class
/// separately so both sides stay balanced.
pub fn wrangle_faults(
    store_path: &Path,
    cleaner: &CleanerConfig,
    setpoints: Setpoints,
    config: &FaultConfig,
    test_fraction: f64,
    seed: u64,
) -> Result<FaultWrangleSummary, PipelineError> {
    let (raw, orders) = {
        let store = Store::open_reader(store_path)?;
        (super::load_telemetry(&store, TELEMETRY_COLLECTION)?, load_work_orders(&store))
    };
    if raw.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let (cleaned, _) = clean_records(raw, cleaner)?;
    let cleaned = derive_features(cleaned, setpoints)?;
    let merge = merge_faults(&cleaned, &orders, config)?;
    let merged = merge.examples.len();
    let balanced = match balance_classes(merge.examples, seed) {
        Ok(b) => b,
        Err(crate::wrangler::WranglerError::SingleClass) => return Err(PipelineError::SingleClass),
        Err(e) => return Err(e.into()),
    };

    let mut test = BTreeSet::new();
    for label in [FaultLabel::NoFault, FaultLabel::Fault] {
        let ids: Vec<String> = balanced.iter().filter(|e| e.label == label).map(|e| e.id.clone()).collect();
        let split = split_dataset(&ids, test_fraction, nominal_val_fraction(test_fraction), seed)?;
        test.extend(split.test);
    }
    let docs: Vec<Document> = balanced
        .iter()
        .map(|e| {
            let mut doc = e.to_document();
            doc.set("split", json!(if test.contains(&e.id) { TEST_SPLIT } else { TRAIN_SPLIT }));
            doc
        })
        .collect();
    open_writer(store_path)?.replace_collection(FAULT_COLLECTION, docs)?;
    let summary = FaultWrangleSummary {
        merged,
        balanced: balanced.len(),
        skipped_orders: merge.skipped_orders,
        unmatched_orders: merge.unmatched_orders,
        rejected_windows: merge.rejected_windows,
        train: balanced.len() - test.len(),
        test: test.len(),
    };
    log::info!("fault wrangle: {summary:?}");
    Ok(summary)
}

/// Trains a two-class softmax model with cross-entropy on the fault examples
/// selected by the request's pipeline. The selection must be balanced.
pub fn learn_faults(store_path: &Path, request: &LearnRequest, max_gap_s: f64) -> Result<LearnOutcome, PipelineError> {
    let examples = {
        let store = Store::open_reader(store_path)?;
        store
            .aggregate(FAULT_COLLECTION, &request.pipeline)?
            .iter()
            .map(FaultExample::from_document)
            .collect::<Result<Vec<_>, _>>()?
    };
    let Some(first) = examples.first() else {
        return Err(PipelineError::EmptyDataset);
    };
    let positives = examples.iter().filter(|e| e.label == FaultLabel::Fault).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(PipelineError::SingleClass);
    }
    if positives != negatives {
        return Err(PipelineError::BalanceRequired { positives, negatives });
    }
    let features = first.feature_names.clone();
    let window_len = first.observed.len();
    if examples.iter().any(|e| e.feature_names != features || e.observed.len() != window_len) {
        return Err(PipelineError::InvalidArgument("selected examples disagree on window shape".into()));
    }
    let fault_name = examples
        .iter()
        .find(|e| e.label == FaultLabel::Fault)
        .map_or_else(String::new, |e| e.fault_name.clone());
    let data: Vec<TrainingExample> = examples
        .iter()
        .map(|e| TrainingExample {
            x: e.observed.clone(),
            target: Target::Class(e.label.class()),
        })
        .collect();
    let net = request.net;
    let spec = NetworkSpec::stacked(net.kind, net.hidden, net.depth, HeadKind::Softmax, window_len, features.len());
    let hyper = crate::neural::TrainHyper {
        loss: LossKind::Cce,
        lead_seconds: 0.0,
        ..request.hyper.clone()
    };
    let (artifact, _) = train(&spec, &data, &hyper)?;
    let (mut meta, bytes) = artifact.to_blob();
    annotate_meta(
        &mut meta,
        &request.name,
        "faults",
        &request.pipeline,
        &[
            ("classes", json!(["no_fault", fault_name])),
            ("horizon_seconds", json!(first.horizon_seconds)),
            ("feature_names", json!(features)),
            ("max_gap_s", json!(max_gap_s)),
            ("n_examples", json!(data.len())),
            ("architecture", json!(net.describe())),
        ],
    );
    let model_id = open_writer(store_path)?.put_model(meta, &bytes)?;
    log::info!("stored fault model {} ({}) as {model_id}", request.name, net.describe());
    Ok(LearnOutcome {
        model_id,
        artifact,
        n_examples: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPrediction {
    pub fridge_id: String,
    /// Probability of a fault within the model's horizon after `as_of_ts`.
    pub p_fault: f64,
    pub model_id: String,
    pub as_of_ts: f64,
}

impl FaultPrediction {
    pub fn to_document(&self) -> Document {
        let mut doc = Document::with_id(format!("{}:{}:{}", self.model_id, self.fridge_id, self.as_of_ts));
        for (k, v) in serde_json::to_value(self).expect("finite prediction").as_object().expect("struct") {
            doc.set(k.clone(), v.clone());
        }
        doc
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FaultInference {
    pub predictions: Vec<FaultPrediction>,
    pub failures: Vec<InferFailure>,
}

/// Fault probability per fridge from the window ending at `as_of_ts`.
pub fn infer_faults(store: &Store, model_id: &str, fridge_ids: &[String], as_of_ts: f64) -> Result<FaultInference, PipelineError> {
    let model = StoredModel::load(store, model_id)?;
    if model.artifact.spec.head != HeadKind::Softmax {
        return Err(PipelineError::InvalidArgument(format!("model `{model_id}` is not a classifier")));
    }
    let features = model.features()?;
    let mut out = FaultInference::default();
    let streams = fridge_streams(store, fridge_ids)?;
    for fridge in fridge_ids {
        let stream = &streams[fridge];
        match assemble_window(&stream, as_of_ts, model.artifact.spec.seq_len, &features, model.max_gap_s()) {
            Ok((_, x)) => {
                let Output::Probs(p) = predict(&model.artifact, &x)? else {
                    unreachable!("softmax head")
                };
                out.predictions.push(FaultPrediction {
                    fridge_id: fridge.clone(),
                    p_fault: p[FaultLabel::Fault.class()],
                    model_id: model_id.to_owned(),
                    as_of_ts,
                });
            }
            Err(e) => out.failures.push(InferFailure {
                fridge_id: fridge.clone(),
                reason: window_failure(e).into(),
            }),
        }
    }
    Ok(out)
}
