//! Embedded, file-backed document store.
//!
//! Each collection lives in `<store>/<name>.ndjson`, one canonical (sorted-key)
//! JSON document per line. A store has at most one writer at a time, enforced
//! through `<store>/.lock`; readers open snapshots without locking. Queries go
//! through a MongoDB-subset [`AggregationPipeline`].

mod document;
mod eval;
mod models;
mod ordered;
mod pipeline;
mod store;

use thiserror::Error;

pub use document::{compare_same_kind, sort_order, values_equal, Document, ID_FIELD};
pub use eval::run_pipeline;
pub use models::{blob_checksum, content_id, ModelBlobManifest, CHUNKS_COLLECTION, CHUNK_SIZE, MODELS_COLLECTION};
pub use ordered::OrderedJson;
pub use pipeline::{
    Accumulator, AggregationPipeline, CompareOp, Condition, FieldOp, Filter, GroupKey, Operand, ProjectSpec, Projection,
    SortDir, Stage,
};
pub use store::{IndexKind, IndexSpec, Store, COLLECTION_EXT, LOCK_FILE};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store is locked by another writer (pid {pid:?})")]
    LockHeld { pid: Option<u32> },
    #[error("collection `{collection}` is corrupt at line {line}: {message}")]
    CorruptCollection {
        collection: String,
        line: usize,
        message: String,
    },
    #[error("duplicate _id `{id}` in collection `{collection}`")]
    DuplicateId { collection: String, id: String },
    #[error("pipeline stage {stage}: {message}")]
    BadPipeline { stage: usize, message: String },
    #[error("pipeline stage {stage}: field `{path}` holds a non-scalar value")]
    BadFieldPath { stage: usize, path: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("checksum mismatch for model `{model_id}`")]
    ChecksumMismatch { model_id: String },
    #[error("store handle is read-only")]
    ReadOnly,
    #[error("invalid collection name `{0}`")]
    InvalidName(String),
    #[error("invalid document: {0}")]
    InvalidDocument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::fs;

    fn doc(v: serde_json::Value) -> Document {
        Document::from_value(v).unwrap()
    }

    #[test]
    fn empty_directory_has_no_collections() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(store.collection_names().is_empty());
    }

    #[test]
    fn loads_existing_ndjson_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("telemetry.ndjson"),
            "{\"_id\":\"a\"}\n{\"_id\":\"b\"}\n{\"_id\":\"c\"}\n",
        )
        .unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.collection_names(), ["telemetry"]);
        assert_eq!(store.count("telemetry"), 3);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.ndjson"), "{\"_id\":\"a\"}\n{oops\n{\"_id\":\"c\"}\n").unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.count("t"), 0);
        match store.check() {
            Err(StoreError::CorruptCollection { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected corrupt collection, got {other:?}"),
        }
    }

    #[test]
    fn torn_trailing_write_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("t.ndjson"), "{\"_id\":\"a\"}\n{\"_id\":\"b\",\"x\":").unwrap();
        let store = Store::open_reader(dir.path()).unwrap();
        assert_eq!(store.count("t"), 1);
    }

    #[test]
    fn second_writer_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let first = Store::open(dir.path()).unwrap();
        assert!(matches!(Store::open(dir.path()), Err(StoreError::LockHeld { .. })));
        let lock = fs::read_to_string(dir.path().join(LOCK_FILE)).unwrap();
        assert_eq!(lock, std::process::id().to_string());
        // Readers never contend.
        Store::open_reader(dir.path()).unwrap();
        drop(first);
        Store::open(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_from_dead_process_is_reclaimed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOCK_FILE), "4294967290").unwrap();
        Store::open(dir.path()).unwrap();
    }

    #[test]
    fn insert_assigns_ids_and_rejects_duplicates_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        let n = store
            .insert_many("c", vec![doc(json!({"_id": "x", "v": 1})), doc(json!({"v": 2}))])
            .unwrap();
        assert_eq!(n, 2);
        assert!(store.documents("c")[1].id().is_some());

        let err = store
            .insert_many("c", vec![doc(json!({"_id": "y"})), doc(json!({"_id": "x"}))])
            .unwrap_err();
        assert!(matches!(err, StoreError::DuplicateId { .. }));
        assert_eq!(store.count("c"), 2);
        drop(store);
        assert_eq!(Store::open_reader(dir.path()).unwrap().count("c"), 2);
    }

    #[test]
    fn reader_cannot_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut reader = Store::open_reader(dir.path()).unwrap();
        assert!(matches!(reader.insert_many("c", vec![Document::new()]), Err(StoreError::ReadOnly)));
    }

    #[test]
    fn index_survives_reopen_and_tracks_inserts() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut store = Store::open(dir.path()).unwrap();
            store.insert_many("c", vec![doc(json!({"k": 1})), doc(json!({"k": 2}))]).unwrap();
            store.create_index("c", "k").unwrap();
            store.insert_many("c", vec![doc(json!({"k": 1.0}))]).unwrap();
            assert_eq!(store.find_eq("c", "k", &json!(1)).len(), 2);
        }
        let store = Store::open_reader(dir.path()).unwrap();
        assert_eq!(store.indexes("c").len(), 1);
        assert_eq!(store.find_eq("c", "k", &json!(1)).len(), 2);
    }

    #[test]
    fn replace_collection_rewrites_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store.insert_many("c", vec![doc(json!({"_id": "a"}))]).unwrap();
        store.replace_collection("c", vec![doc(json!({"_id": "b"})), doc(json!({"_id": "c"}))]).unwrap();
        drop(store);
        let store = Store::open_reader(dir.path()).unwrap();
        let ids: Vec<&str> = store.documents("c").iter().filter_map(Document::id).collect();
        assert_eq!(ids, ["b", "c"]);
    }
}
