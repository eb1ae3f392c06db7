use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{with_lead, CandidateSelection, PipelineError, StoredModel};
use crate::docstore::{AggregationPipeline, Document, Store};
use crate::neural::{evaluate, mae_loss, HeadKind, Target, TrainingExample};
use crate::wrangler::{DefrostExample, FaultExample, DEFROST_COLLECTION, FAULT_COLLECTION};

pub const REPORTS_COLLECTION: &str = "reports";
/// Per-example test predictions behind the report's numbers.
pub const TEST_PREDICTIONS_COLLECTION: &str = "test_predictions";

/// One model scored on its held-out examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model_id: String,
    pub lead_seconds: Option<f64>,
    pub n_test: usize,
    pub mae: f64,
    /// MAE of always predicting the training-target mean.
    pub baseline_mae: Option<f64>,
    pub accuracy: Option<f64>,
    pub cce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsrRow {
    pub name: String,
    pub architecture: String,
    pub epochs: usize,
    /// Final-epoch training MAE, seconds.
    pub train_mae: f64,
    pub n_train: usize,
    pub test: EvalSummary,
    /// The same architecture trained and tested with the window ending
    /// `ahead_lead_seconds` earlier.
    pub ahead: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRow {
    pub name: String,
    pub architecture: String,
    pub epochs: usize,
    pub train_cce: f64,
    pub n_train: usize,
    pub test: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub base_lead_seconds: f64,
    pub ahead_lead_seconds: f64,
    pub dsr: Vec<DsrRow>,
    pub faults: Vec<FaultRow>,
    pub selection: Option<CandidateSelection>,
}

impl Report {
    pub fn to_document(&self) -> Document {
        let mut doc = Document::with_id("report");
        for (k, v) in serde_json::to_value(self).expect("finite report").as_object().expect("struct") {
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

fn prediction_doc(model_id: &str, example_id: &str, y: f64, y_hat: f64) -> Document {
    let mut doc = Document::with_id(format!("{model_id}:{example_id}"));
    doc.set("model_id", json!(model_id));
    doc.set("example_id", json!(example_id));
    doc.set("y", json!(y));
    doc.set("y_hat", json!(y_hat));
    doc
}

/// Scores a stored model on the examples `test_pipeline` selects (at the
/// model's own lead, for regression) and returns the per-example predictions.
pub fn evaluate_model(store: &Store, model_id: &str, test_pipeline: &AggregationPipeline) -> Result<(EvalSummary, Vec<Document>), PipelineError> {
    let model = StoredModel::load(store, model_id)?;
    let (ids, data, lead): (Vec<String>, Vec<TrainingExample>, Option<f64>) = match model.artifact.spec.head {
        HeadKind::Linear => {
            let lead = model.lead_seconds();
            let examples = store
                .aggregate(DEFROST_COLLECTION, &with_lead(test_pipeline, lead)?)?
                .iter()
                .map(DefrostExample::from_document)
                .collect::<Result<Vec<_>, _>>()?;
            let data = examples
                .iter()
                .map(|e| TrainingExample {
                    x: e.observed.clone(),
                    target: Target::Value(e.target_seconds),
                })
                .collect();
            (examples.into_iter().map(|e| e.id).collect(), data, Some(lead))
        }
        HeadKind::Softmax => {
            let examples = store
                .aggregate(FAULT_COLLECTION, test_pipeline)?
                .iter()
                .map(FaultExample::from_document)
                .collect::<Result<Vec<_>, _>>()?;
            let data = examples
                .iter()
                .map(|e| TrainingExample {
                    x: e.observed.clone(),
                    target: Target::Class(e.label.class()),
                })
                .collect();
            (examples.into_iter().map(|e| e.id).collect(), data, None)
        }
    };
    if data.is_empty() {
        return Err(PipelineError::NotFound(format!("test examples for model `{model_id}`")));
    }
    let metrics = evaluate(&model.artifact, &data)?;
    let baseline_mae = match lead {
        Some(_) => Some(mae_loss(&metrics.y, &vec![model.artifact.normalization.target_mean; metrics.n])?),
        None => None,
    };
    let predictions = ids
        .iter()
        .zip(metrics.y.iter().zip(&metrics.y_hat))
        .map(|(id, (y, y_hat))| prediction_doc(model_id, id, *y, *y_hat))
        .collect();
    Ok((
        EvalSummary {
            model_id: model_id.to_owned(),
            lead_seconds: lead,
            n_test: metrics.n,
            mae: metrics.mae,
            baseline_mae,
            accuracy: metrics.accuracy,
            cce: metrics.cce,
        },
        predictions,
    ))
}

fn n_examples(model: &StoredModel) -> usize {
    model.meta.get("n_examples").and_then(|v| v.as_u64()).unwrap_or(0) as usize
}

fn architecture(model: &StoredModel) -> String {
    model.meta.get_str("architecture").unwrap_or("?").to_owned()
}

/// What to put in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRequest<'a> {
    pub dsr_models: &'a [String],
    pub base_lead_seconds: f64,
    pub ahead_lead_seconds: f64,
    pub dsr_test_pipeline: &'a AggregationPipeline,
    pub fault_models: &'a [String],
    pub fault_test_pipeline: &'a AggregationPipeline,
    pub selection: Option<CandidateSelection>,
}

/// Builds the report from the latest model of each name. A DSR row needs the
/// base-lead model; its ahead column is filled when the ahead-lead model exists.
pub fn build_report(store: &Store, request: &ReportRequest<'_>) -> Result<(Report, Vec<Document>), PipelineError> {
    let mut predictions = Vec::new();
    let mut dsr = Vec::new();
    for name in request.dsr_models {
        let base = StoredModel::latest(store, name, Some(request.base_lead_seconds))?;
        let (test, p) = evaluate_model(store, &base.model_id, request.dsr_test_pipeline)?;
        predictions.extend(p);
        let ahead = match StoredModel::latest(store, name, Some(request.ahead_lead_seconds)) {
            Ok(m) if request.ahead_lead_seconds != request.base_lead_seconds => {
                let (summary, p) = evaluate_model(store, &m.model_id, request.dsr_test_pipeline)?;
                predictions.extend(p);
                Some(summary)
            }
            Ok(_) => None,
            Err(PipelineError::NotFound(_)) => None,
            Err(e) => return Err(e),
        };
        dsr.push(DsrRow {
            name: name.clone(),
            architecture: architecture(&base),
            epochs: base.artifact.train_loss.len(),
            train_mae: base.artifact.train_loss.last().copied().unwrap_or(f64::NAN),
            n_train: n_examples(&base),
            test,
            ahead,
        });
    }
    let mut faults = Vec::new();
    for name in request.fault_models {
        let model = StoredModel::latest(store, name, None)?;
        let (test, p) = evaluate_model(store, &model.model_id, request.fault_test_pipeline)?;
        predictions.extend(p);
        faults.push(FaultRow {
            name: name.clone(),
            architecture: architecture(&model),
            epochs: model.artifact.train_loss.len(),
            train_cce: model.artifact.train_loss.last().copied().unwrap_or(f64::NAN),
            n_train: n_examples(&model),
            test,
        });
    }
    let report = Report {
        base_lead_seconds: request.base_lead_seconds,
        ahead_lead_seconds: request.ahead_lead_seconds,
        dsr,
        faults,
        selection: request.selection.clone(),
    };
    Ok((report, predictions))
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// The report as fixed-width text tables.
pub fn render_table(report: &Report) -> String {
    let mut s = String::new();
    if !report.dsr.is_empty() {
        let ahead = format!("Ahead {}s MAE", report.ahead_lead_seconds);
        let _ = writeln!(
            s,
            "{:<12} {:<14} {:>18} {:>10} {:>14} {:>12} {:>8} {:>7}",
            "DSR model", "architecture", "Train MAE (epochs)", "Test MAE", ahead, "Baseline MAE", "n_train", "n_test"
        );
        for r in &report.dsr {
            let _ = writeln!(
                s,
                "{:<12} {:<14} {:>18} {:>10.1} {:>14} {:>12} {:>8} {:>7}",
                r.name,
                r.architecture,
                format!("{:.1} ({})", r.train_mae, r.epochs),
                r.test.mae,
                opt(r.ahead.as_ref().map(|a| a.mae), 1),
                opt(r.test.baseline_mae, 1),
                r.n_train,
                r.test.n_test
            );
        }
    }
    if !report.faults.is_empty() {
        if !s.is_empty() {
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{:<12} {:<14} {:>18} {:>10} {:>10} {:>8} {:>7}",
            "Fault model", "architecture", "Train CCE (epochs)", "Test acc", "Test CCE", "n_train", "n_test"
        );
        for r in &report.faults {
            let _ = writeln!(
                s,
                "{:<12} {:<14} {:>18} {:>10} {:>10} {:>8} {:>7}",
                r.name,
                r.architecture,
                format!("{:.3} ({})", r.train_cce, r.epochs),
                opt(r.test.accuracy, 3),
                opt(r.test.cce, 3),
                r.n_train,
                r.test.n_test
            );
        }
    }
    if let Some(sel) = &report.selection {
        if !s.is_empty() {
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "DSR event at {}: target {:.2} kW, shed {:.2} kW from {} fridge(s), feasible: {}",
            sel.event.start_ts,
            sel.event.target_shed_kw,
            sel.shed_kw,
            sel.chosen.len(),
            sel.feasible
        );
        if !sel.chosen.is_empty() {
            let _ = writeln!(s, "  switched off: {}", sel.chosen.join(", "));
        }
    }
    s
}
