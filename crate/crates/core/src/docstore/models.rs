//! Chunked binary blobs for serialized models: a manifest in `models`, the
//! bytes split across documents in `model_chunks`.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{Document, Store, StoreError};

pub const MODELS_COLLECTION: &str = "models";
pub const CHUNKS_COLLECTION: &str = "model_chunks";
/// Upper bound on the bytes held by one chunk document.
pub const CHUNK_SIZE: usize = 4 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlobManifest {
    pub model_id: String,
    pub chunk_ids: Vec<String>,
    pub total_bytes: u64,
    pub checksum: u64,
    pub meta: Document,
}

impl ModelBlobManifest {
    fn to_document(&self) -> Document {
        let mut doc = Document::with_id(self.model_id.clone());
        doc.set("chunk_ids", json!(self.chunk_ids));
        doc.set("total_bytes", json!(self.total_bytes));
        doc.set("checksum", json!(format!("{:016x}", self.checksum)));
        doc.set("meta", self.meta.clone().into_value());
        doc
    }

    fn from_document(doc: &Document) -> Result<Self, StoreError> {
        let bad = |what: &str| StoreError::InvalidDocument(format!("model manifest {}: bad {what}", doc.id().unwrap_or("?")));
        let chunk_ids = doc
            .get("chunk_ids")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("chunk_ids"))?
            .iter()
            .map(|v| v.as_str().map(str::to_owned).ok_or_else(|| bad("chunk_ids")))
            .collect::<Result<Vec<_>, _>>()?;
        let checksum = doc
            .get_str("checksum")
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .ok_or_else(|| bad("checksum"))?;
        Ok(Self {
            model_id: doc.id().ok_or_else(|| bad("_id"))?.to_owned(),
            chunk_ids,
            total_bytes: doc.get("total_bytes").and_then(Value::as_u64).ok_or_else(|| bad("total_bytes"))?,
            checksum,
            meta: doc
                .get("meta")
                .cloned()
                .and_then(Document::from_value)
                .ok_or_else(|| bad("meta"))?,
        })
    }
}

/// First eight bytes of the SHA-256 digest, big-endian.
pub fn blob_checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Content address of a model: identical meta and weights give the same id.
pub fn content_id(meta: &Document, weights: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(meta.to_canonical_json().as_bytes());
    hasher.update([0u8]);
    hasher.update(weights);
    let digest = hasher.finalize();
    digest[..12].iter().map(|b| format!("{b:02x}")).collect()
}

impl Store {
    /// Stores `weights` with `meta` and returns the content-derived model id.
    /// Storing identical content twice returns the existing id.
    pub fn put_model(&mut self, meta: Document, weights: &[u8]) -> Result<String, StoreError> {
        let model_id = content_id(&meta, weights);
        if self.get(MODELS_COLLECTION, &model_id).is_some() {
            return Ok(model_id);
        }
        let chunks: Vec<&[u8]> = if weights.is_empty() {
            vec![&[]]
        } else {
            weights.chunks(CHUNK_SIZE).collect()
        };
        let mut chunk_ids = Vec::with_capacity(chunks.len());
        let mut chunk_docs = Vec::with_capacity(chunks.len());
        for (n, chunk) in chunks.into_iter().enumerate() {
            let id = format!("{model_id}:{n}");
            let mut doc = Document::with_id(id.clone());
            doc.set("model_id", json!(model_id));
            doc.set("n", json!(n));
            doc.set("data", json!(BASE64.encode(chunk)));
            chunk_ids.push(id);
            chunk_docs.push(doc);
        }
        let manifest = ModelBlobManifest {
            model_id: model_id.clone(),
            chunk_ids,
            total_bytes: weights.len() as u64,
            checksum: blob_checksum(weights),
            meta,
        };
        // Chunks first: a manifest is only visible once its bytes are.
        self.insert_many(CHUNKS_COLLECTION, chunk_docs)?;
        self.insert_many(MODELS_COLLECTION, vec![manifest.to_document()])?;
        Ok(model_id)
    }

    pub fn model_manifest(&self, model_id: &str) -> Result<ModelBlobManifest, StoreError> {
        let doc = self
            .get(MODELS_COLLECTION, model_id)
            .ok_or_else(|| StoreError::NotFound(format!("model `{model_id}`")))?;
        ModelBlobManifest::from_document(doc)
    }

    pub fn get_model(&self, model_id: &str) -> Result<(Document, Vec<u8>), StoreError> {
        let manifest = self.model_manifest(model_id)?;
        let mismatch = || StoreError::ChecksumMismatch {
            model_id: model_id.to_owned(),
        };
        let mut bytes = Vec::with_capacity(manifest.total_bytes as usize);
        for chunk_id in &manifest.chunk_ids {
            let chunk = self
                .get(CHUNKS_COLLECTION, chunk_id)
                .ok_or_else(|| StoreError::NotFound(format!("model chunk `{chunk_id}`")))?;
            let data = chunk.get_str("data").ok_or_else(mismatch)?;
            let decoded = BASE64.decode(data).map_err(|_| mismatch())?;
            bytes.extend_from_slice(&decoded);
        }
        if bytes.len() as u64 != manifest.total_bytes || blob_checksum(&bytes) != manifest.checksum {
            return Err(mismatch());
        }
        Ok((manifest.meta, bytes))
    }

    /// Manifests whose `meta.name` equals `name`, in insertion order.
    pub fn models_named(&self, name: &str) -> Vec<ModelBlobManifest> {
        self.documents(MODELS_COLLECTION)
            .iter()
            .filter(|d| d.get_str("meta.name") == Some(name))
            .filter_map(|d| ModelBlobManifest::from_document(d).ok())
            .collect()
    }
}
