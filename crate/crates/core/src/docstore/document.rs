use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Key under which every stored document carries its identifier.
pub const ID_FIELD: &str = "_id";

/// A JSON object with sorted keys.
///
/// Stored documents always carry a string `_id`; documents produced by
/// `$group` or `$project` may carry any `_id` value or none at all.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Document(Map<String, Value>);

impl Document {
    pub fn new() -> Self {
        Self(Map::new())
    }

    pub fn with_id(id: impl Into<String>) -> Self {
        let mut doc = Self::new();
        doc.set(ID_FIELD, Value::String(id.into()));
        doc
    }

    /// Wraps a JSON value; `None` unless it is an object.
    pub fn from_value(value: Value) -> Option<Self> {
        match value {
            Value::Object(map) => Some(Self(map)),
            _ => None,
        }
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.0
    }

    pub fn as_map_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.0
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }

    /// The string `_id`, if present.
    pub fn id(&self) -> Option<&str> {
        self.0.get(ID_FIELD).and_then(Value::as_str)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    /// Resolves a dotted path through nested objects.
    pub fn get_path(&self, path: &str) -> Option<&Value> {
        lookup_path(&self.0, path)
    }

    pub fn set(&mut self, key: impl Into<String>, value: Value) {
        self.0.insert(key.into(), value);
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.0.remove(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.get_path(key).and_then(Value::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get_path(key).and_then(Value::as_f64)
    }

    /// Canonical single-line JSON (keys sorted).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&self.0).expect("a JSON map always serializes")
    }
}

impl From<Map<String, Value>> for Document {
    fn from(map: Map<String, Value>) -> Self {
        Self(map)
    }
}

impl fmt::Display for Document {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_json())
    }
}

pub(crate) fn lookup_path<'a>(map: &'a Map<String, Value>, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut current = map.get(parts.next()?)?;
    for part in parts {
        current = current.as_object()?.get(part)?;
    }
    Some(current)
}

/// Equality with numeric values compared by value across integer/float.
pub fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => match (x.as_i64(), y.as_i64()) {
            (Some(i), Some(j)) => i == j,
            _ => match (x.as_u64(), y.as_u64()) {
                (Some(i), Some(j)) => i == j,
                _ => x.as_f64() == y.as_f64(),
            },
        },
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_equal(a, b))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len()
                && x.iter()
                    .all(|(k, v)| y.get(k).is_some_and(|w| values_equal(v, w)))
        }
        _ => a == b,
    }
}

/// Ordering for same-kind scalars: numbers by value, strings lexicographically.
/// Anything else (including cross-type pairs) is incomparable.
pub fn compare_same_kind(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            if let (Some(i), Some(j)) = (x.as_i64(), y.as_i64()) {
                return Some(i.cmp(&j));
            }
            x.as_f64()?.partial_cmp(&y.as_f64()?)
        }
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn type_rank(v: Option<&Value>) -> u8 {
    match v {
        None | Some(Value::Null) => 0,
        Some(Value::Number(_)) => 1,
        Some(Value::String(_)) => 2,
        Some(Value::Bool(_)) => 3,
        Some(Value::Array(_)) | Some(Value::Object(_)) => 4,
    }
}

/// Total order over scalar sort keys: missing/null < numbers < strings < booleans.
pub fn sort_order(a: Option<&Value>, b: Option<&Value>) -> Ordering {
    let (ra, rb) = (type_rank(a), type_rank(b));
    if ra != rb {
        return ra.cmp(&rb);
    }
    match (a, b) {
        (Some(Value::Bool(x)), Some(Value::Bool(y))) => x.cmp(y),
        (Some(x), Some(y)) => compare_same_kind(x, y).unwrap_or(Ordering::Equal),
        _ => Ordering::Equal,
    }
}

/// Hashable key for a value; integers and floats with equal values share a key.
pub(crate) fn value_key(v: &Value) -> String {
    let mut out = String::new();
    write_value_key(v, &mut out);
    out
}

fn write_value_key(v: &Value, out: &mut String) {
    use std::fmt::Write;
    match v {
        Value::Null => out.push('z'),
        Value::Bool(b) => out.push(if *b { 'T' } else { 'F' }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "n{i};");
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "n{u};");
            } else {
                let f = n.as_f64().unwrap_or(f64::NAN);
                if f.fract() == 0.0 && f.abs() < 9.0e15 {
                    let _ = write!(out, "n{};", f as i64);
                } else {
                    let _ = write!(out, "n{f:e};");
                }
            }
        }
        Value::String(s) => {
            let _ = write!(out, "s{}:{s}", s.len());
        }
        Value::Array(items) => {
            out.push('[');
            for item in items {
                write_value_key(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (k, item) in map {
                let _ = write!(out, "{}:{k}", k.len());
                write_value_key(item, out);
            }
            out.push('}');
        }
    }
}

pub(crate) fn is_scalar(v: &Value) -> bool {
    !matches!(v, Value::Array(_) | Value::Object(_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_json_sorts_keys() {
        let doc = Document::from_value(json!({"b": 1, "a": {"z": 1, "y": 2}, "_id": "x"})).unwrap();
        assert_eq!(doc.to_canonical_json(), r#"{"_id":"x","a":{"y":2,"z":1},"b":1}"#);
    }

    #[test]
    fn integers_and_floats_compare_by_value() {
        assert!(values_equal(&json!(2), &json!(2.0)));
        assert!(!values_equal(&json!(2), &json!("2")));
        assert_eq!(compare_same_kind(&json!(1), &json!(1.5)), Some(Ordering::Less));
        assert_eq!(compare_same_kind(&json!("a"), &json!(1)), None);
    }

    #[test]
    fn value_keys_normalise_numbers() {
        assert_eq!(value_key(&json!(2)), value_key(&json!(2.0)));
        assert_ne!(value_key(&json!(2)), value_key(&json!("2")));
        assert_ne!(value_key(&json!(["ab"])), value_key(&json!(["a", "b"])));
    }

    #[test]
    fn dotted_paths_resolve() {
        let doc = Document::from_value(json!({"a": {"b": {"c": 3}}})).unwrap();
        assert_eq!(doc.get_path("a.b.c"), Some(&json!(3)));
        assert_eq!(doc.get_path("a.x"), None);
    }
}
