use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::{open_writer, PipelineError};
use crate::docstore::{Document, Store};
use crate::telemetry::{self, TelemetryRecord, TELEMETRY_COLLECTION};
use crate::wrangler::{WorkOrder, WORK_ORDER_COLLECTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub telemetry: usize,
    pub work_orders: usize,
}

pub fn work_order_document(index: usize, order: &WorkOrder) -> Document {
    let mut doc = Document::with_id(format!("wo{index:06}"));
    doc.set("raw_text", json!(order.raw_text));
    doc.set("timestamp", json!(order.timestamp));
    doc
}

pub(crate) fn load_work_orders(store: &Store) -> Vec<WorkOrder> {
    store
        .documents(WORK_ORDER_COLLECTION)
        .iter()
        .filter_map(|d| {
            Some(WorkOrder {
                raw_text: d.get_str("raw_text")?.to_owned(),
                timestamp: d.get_f64("timestamp")?,
            })
        })
        .collect()
}

/// Replaces the raw telemetry and work-order collections. Records keep their
/// input order; repeated (fridge, timestamp) keys are suffixed so the
/// cleaner, not the store, decides what a duplicate is.
pub fn ingest_records(store_path: &Path, records: &[TelemetryRecord], work_orders: &[WorkOrder]) -> Result<IngestSummary, PipelineError> {
    let mut seen = std::collections::HashMap::new();
    let docs = records
        .iter()
        .map(|r| {
            let mut doc = telemetry::to_document(r);
            let n = seen.entry(telemetry::record_id(&r.fridge_id, r.timestamp)).or_insert(0usize);
            if *n > 0 {
                let id = format!("{}#{n}", doc.id().expect("record ids are set"));
                doc.set(crate::docstore::ID_FIELD, json!(id));
            }
            *n += 1;
            doc
        });
    let orders: Vec<Document> = work_orders.iter().enumerate().map(|(i, o)| work_order_document(i, o)).collect();
    let mut store = open_writer(store_path)?;
    let summary = IngestSummary {
        telemetry: store.replace_collection(TELEMETRY_COLLECTION, docs)?,
        work_orders: store.replace_collection(WORK_ORDER_COLLECTION, orders)?,
    };
    log::info!("ingested {} readings and {} work orders", summary.telemetry, summary.work_orders);
    Ok(summary)
}
