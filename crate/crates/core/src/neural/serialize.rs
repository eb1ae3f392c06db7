//! Weight blobs: little-endian f64, row-major, tensors in manifest order,
//! described by a versioned meta document.

use serde_json::{json, Value};

use super::spec::{NetworkParams, NetworkSpec};
use super::NeuralError;
use crate::docstore::Document;

pub const FORMAT_VERSION: &str = "nn-format/1";

pub fn serialize_model(spec: &NetworkSpec, params: &NetworkParams) -> (Document, Vec<u8>) {
    let mut meta = Document::new();
    meta.set("format", json!(FORMAT_VERSION));
    meta.set("spec", serde_json::to_value(spec).expect("spec serializes"));
    let manifest: Vec<Value> = spec
        .manifest()
        .into_iter()
        .map(|(name, shape)| json!({"name": name, "shape": shape}))
        .collect();
    meta.set("manifest", Value::Array(manifest));
    let bytes = params.tensors().iter().flat_map(|t| t.iter()).flat_map(|v| v.to_le_bytes()).collect();
    (meta, bytes)
}

pub fn deserialize_model(meta: &Document, bytes: &[u8]) -> Result<(NetworkSpec, NetworkParams), NeuralError> {
    match meta.get_str("format") {
        Some(FORMAT_VERSION) => {}
        other => return Err(NeuralError::VersionMismatch(other.unwrap_or("<missing>").to_owned())),
    }
    let spec: NetworkSpec = meta
        .get("spec")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| NeuralError::BadMeta("missing or malformed `spec`".into()))?;
    spec.validate()?;
    let declared: Vec<(String, Vec<usize>)> = meta
        .get("manifest")
        .and_then(Value::as_array)
        .ok_or_else(|| NeuralError::BadMeta("missing `manifest`".into()))?
        .iter()
        .map(|e| {
            let name = e.get("name")?.as_str()?.to_owned();
            let shape = serde_json::from_value(e.get("shape")?.clone()).ok()?;
            Some((name, shape))
        })
        .collect::<Option<_>>()
        .ok_or_else(|| NeuralError::BadMeta("malformed `manifest`".into()))?;
    if declared != spec.manifest() {
        return Err(NeuralError::ManifestShapeMismatch("manifest disagrees with the network spec".into()));
    }
    let expected = 8 * spec.parameter_count();
    if bytes.len() != expected {
        return Err(NeuralError::ManifestShapeMismatch(format!(
            "expected {expected} weight bytes, got {}",
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = NetworkParams::zeros(&spec);
    params.assign_flat(&flat)?;
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::spec::{HeadKind, LayerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> (NetworkSpec, NetworkParams) {
        let spec = NetworkSpec::stacked(LayerKind::Lstm, 3, 2, HeadKind::Softmax, 4, 2);
        let params = NetworkParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(4));
        (spec, params)
    }

    #[test]
    fn roundtrip_is_identity() {
        let (spec, params) = net();
        let (meta, bytes) = serialize_model(&spec, &params);
        assert_eq!(bytes.len(), 8 * spec.parameter_count());
        assert_eq!(deserialize_model(&meta, &bytes).unwrap(), (spec, params));
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let (spec, params) = net();
        let (mut meta, bytes) = serialize_model(&spec, &params);
        assert!(matches!(
            deserialize_model(&meta, &bytes[..bytes.len() - 8]),
            Err(NeuralError::ManifestShapeMismatch(_))
        ));
        meta.set("format", json!("nn-format/0"));
        assert!(matches!(deserialize_model(&meta, &bytes), Err(NeuralError::VersionMismatch(_))));
    }
}
