//! Stage-by-stage evaluation of an [`AggregationPipeline`] over in-memory documents.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Number, Value};

use super::document::{compare_same_kind, is_scalar, lookup_path, sort_order, value_key, values_equal};
use super::pipeline::*;
use super::{Document, StoreError};

pub fn run_pipeline(docs: Vec<Document>, pipeline: &AggregationPipeline) -> Result<Vec<Document>, StoreError> {
    run_stages(docs, &pipeline.stages, 0)
}

/// Applies `stages`, numbering them from `first_index` in errors.
pub(crate) fn run_stages(docs: Vec<Document>, stages: &[Stage], first_index: usize) -> Result<Vec<Document>, StoreError> {
    let mut current = docs;
    for (offset, stage) in stages.iter().enumerate() {
        current = apply_stage(current, stage, first_index + offset)?;
    }
    Ok(current)
}

fn apply_stage(docs: Vec<Document>, stage: &Stage, index: usize) -> Result<Vec<Document>, StoreError> {
    Ok(match stage {
        Stage::Match(filter) => docs.into_iter().filter(|d| matches_filter(d, filter)).collect(),
        Stage::Project(spec) => docs.iter().map(|d| project(d, spec)).collect(),
        Stage::Sort(keys) => sort_docs(docs, keys, index)?,
        Stage::Limit(n) => docs.into_iter().take(clamp_usize(*n)).collect(),
        Stage::Skip(n) => docs.into_iter().skip(clamp_usize(*n)).collect(),
        Stage::Group { key, accumulators } => group(&docs, key, accumulators, index)?,
        Stage::Sample { size, seed } => sample(docs, clamp_usize(*size), *seed),
    })
}

fn clamp_usize(n: u64) -> usize {
    usize::try_from(n).unwrap_or(usize::MAX)
}

pub fn matches_filter(doc: &Document, filter: &Filter) -> bool {
    filter.clauses.iter().all(|(path, cond)| {
        let value = doc.get_path(path);
        match cond {
            Condition::Equals(lit) => value.is_some_and(|v| values_equal(v, lit)),
            Condition::Ops(ops) => ops.iter().all(|op| field_op_holds(value, op)),
        }
    })
}

fn field_op_holds(value: Option<&Value>, op: &FieldOp) -> bool {
    use std::cmp::Ordering::*;
    match (op, value) {
        (FieldOp::Exists(want), v) => v.is_some() == *want,
        (_, None) => false,
        (FieldOp::In(items), Some(v)) => items.iter().any(|item| values_equal(v, item)),
        (FieldOp::Compare(CompareOp::Eq, lit), Some(v)) => values_equal(v, lit),
        (FieldOp::Compare(CompareOp::Ne, lit), Some(v)) => !values_equal(v, lit),
        (FieldOp::Compare(c, lit), Some(v)) => match compare_same_kind(v, lit) {
            None => false,
            Some(ord) => match c {
                CompareOp::Gt => ord == Greater,
                CompareOp::Gte => ord != Less,
                CompareOp::Lt => ord == Less,
                CompareOp::Lte => ord != Greater,
                CompareOp::Eq | CompareOp::Ne => unreachable!(),
            },
        },
    }
}

fn set_path(map: &mut Map<String, Value>, path: &str, value: Value) {
    match path.split_once('.') {
        None => {
            map.insert(path.to_owned(), value);
        }
        Some((head, rest)) => {
            let child = map
                .entry(head.to_owned())
                .or_insert_with(|| Value::Object(Map::new()));
            if !child.is_object() {
                *child = Value::Object(Map::new());
            }
            set_path(child.as_object_mut().expect("just ensured object"), rest, value);
        }
    }
}

fn remove_path(map: &mut Map<String, Value>, path: &str) {
    match path.split_once('.') {
        None => {
            map.remove(path);
        }
        Some((head, rest)) => {
            if let Some(Value::Object(child)) = map.get_mut(head) {
                remove_path(child, rest);
            }
        }
    }
}

fn project(doc: &Document, spec: &ProjectSpec) -> Document {
    let exclusion = spec.fields.iter().all(|(_, p)| *p == Projection::Exclude);
    if exclusion {
        let mut out = doc.as_map().clone();
        for (path, _) in &spec.fields {
            remove_path(&mut out, path);
        }
        return out.into();
    }
    let mut out = Map::new();
    let keep_id = !spec
        .fields
        .iter()
        .any(|(p, f)| p == "_id" && *f == Projection::Exclude);
    if keep_id {
        if let Some(id) = doc.get("_id") {
            out.insert("_id".to_owned(), id.clone());
        }
    }
    for (path, projection) in &spec.fields {
        let source = match projection {
            Projection::Include => path.as_str(),
            Projection::Field(src) => src.as_str(),
            Projection::Exclude => continue,
        };
        if let Some(v) = lookup_path(doc.as_map(), source) {
            set_path(&mut out, path, v.clone());
        }
    }
    out.into()
}

fn sort_docs(docs: Vec<Document>, keys: &[(String, SortDir)], index: usize) -> Result<Vec<Document>, StoreError> {
    for doc in &docs {
        for (path, _) in keys {
            if doc.get_path(path).is_some_and(|v| !is_scalar(v)) {
                return Err(StoreError::BadFieldPath {
                    stage: index,
                    path: path.clone(),
                });
            }
        }
    }
    let mut docs = docs;
    docs.sort_by(|a, b| {
        for (path, dir) in keys {
            let ord = sort_order(a.get_path(path), b.get_path(path));
            let ord = if *dir == SortDir::Desc { ord.reverse() } else { ord };
            if ord.is_ne() {
                return ord;
            }
        }
        std::cmp::Ordering::Equal
    });
    Ok(docs)
}

fn group_key_value(doc: &Document, key: &GroupKey, index: usize) -> Result<Value, StoreError> {
    match key {
        GroupKey::Literal(v) => Ok(v.clone()),
        GroupKey::Field(path) => match doc.get_path(path) {
            None => Ok(Value::Null),
            Some(v) if is_scalar(v) => Ok(v.clone()),
            Some(_) => Err(StoreError::BadFieldPath {
                stage: index,
                path: path.clone(),
            }),
        },
        GroupKey::Compound(parts) => {
            let mut out = Map::new();
            for (name, part) in parts {
                out.insert(name.clone(), group_key_value(doc, part, index)?);
            }
            Ok(Value::Object(out))
        }
    }
}

/// Running numeric sum that stays integral while every addend is an integer.
#[derive(Debug, Clone, Copy)]
enum NumSum {
    Int(i64),
    Float(f64),
}

impl NumSum {
    fn add(self, n: &Number) -> NumSum {
        match (self, n.as_i64()) {
            (NumSum::Int(acc), Some(i)) => match acc.checked_add(i) {
                Some(s) => NumSum::Int(s),
                None => NumSum::Float(acc as f64 + i as f64),
            },
            (NumSum::Int(acc), None) => NumSum::Float(acc as f64 + n.as_f64().unwrap_or(0.0)),
            (NumSum::Float(acc), _) => NumSum::Float(acc + n.as_f64().unwrap_or(0.0)),
        }
    }

    fn into_value(self) -> Value {
        match self {
            NumSum::Int(i) => Value::Number(i.into()),
            NumSum::Float(f) => Number::from_f64(f).map_or(Value::Null, Value::Number),
        }
    }
}

enum AccState {
    Sum(NumSum),
    Avg { total: f64, count: u64 },
    Extreme(Option<Value>),
    Count(i64),
}

fn new_state(acc: &Accumulator) -> AccState {
    match acc {
        Accumulator::Sum(_) => AccState::Sum(NumSum::Int(0)),
        Accumulator::Avg(_) => AccState::Avg { total: 0.0, count: 0 },
        Accumulator::Min(_) | Accumulator::Max(_) => AccState::Extreme(None),
        Accumulator::Count => AccState::Count(0),
    }
}

fn accumulate(state: &mut AccState, acc: &Accumulator, doc: &Document, index: usize) -> Result<(), StoreError> {
    match (state, acc) {
        (AccState::Sum(sum), Accumulator::Sum(Operand::Const(n))) => *sum = sum.add(n),
        (AccState::Sum(sum), Accumulator::Sum(Operand::Field(path))) => {
            if let Some(Value::Number(n)) = doc.get_path(path) {
                *sum = sum.add(n);
            }
        }
        (AccState::Avg { total, count }, Accumulator::Avg(path)) => {
            if let Some(Value::Number(n)) = doc.get_path(path) {
                *total += n.as_f64().unwrap_or(0.0);
                *count += 1;
            }
        }
        (AccState::Extreme(best), Accumulator::Min(path) | Accumulator::Max(path)) => {
            let want_max = matches!(acc, Accumulator::Max(_));
            match doc.get_path(path) {
                None | Some(Value::Null) => {}
                Some(v) if !is_scalar(v) => {
                    return Err(StoreError::BadFieldPath {
                        stage: index,
                        path: path.clone(),
                    })
                }
                Some(v) => {
                    let replace = match best {
                        None => true,
                        Some(b) => {
                            let ord = sort_order(Some(v), Some(b));
                            if want_max {
                                ord.is_gt()
                            } else {
                                ord.is_lt()
                            }
                        }
                    };
                    if replace {
                        *best = Some(v.clone());
                    }
                }
            }
        }
        (AccState::Count(n), Accumulator::Count) => *n += 1,
        _ => unreachable!("state built from the same accumulator"),
    }
    Ok(())
}

fn finish(state: AccState) -> Value {
    match state {
        AccState::Sum(s) => s.into_value(),
        AccState::Avg { count: 0, .. } => Value::Null,
        AccState::Avg { total, count } => Number::from_f64(total / count as f64).map_or(Value::Null, Value::Number),
        AccState::Extreme(v) => v.unwrap_or(Value::Null),
        AccState::Count(n) => Value::Number(n.into()),
    }
}

/// Groups appear in order of first occurrence.
fn group(
    docs: &[Document],
    key: &GroupKey,
    accumulators: &[(String, Accumulator)],
    index: usize,
) -> Result<Vec<Document>, StoreError> {
    let mut slots: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<(Value, Vec<AccState>)> = Vec::new();
    for doc in docs {
        let id = group_key_value(doc, key, index)?;
        let slot = *slots.entry(value_key(&id)).or_insert_with(|| {
            groups.push((id, accumulators.iter().map(|(_, a)| new_state(a)).collect()));
            groups.len() - 1
        });
        let states = &mut groups[slot].1;
        for (state, (_, acc)) in states.iter_mut().zip(accumulators) {
            accumulate(state, acc, doc, index)?;
        }
    }
    Ok(groups
        .into_iter()
        .map(|(id, states)| {
            let mut out = Map::new();
            out.insert("_id".to_owned(), id);
            for (state, (name, _)) in states.into_iter().zip(accumulators) {
                out.insert(name.clone(), finish(state));
            }
            out.into()
        })
        .collect())
}

/// Seeded Fisher-Yates prefix: position `i` swaps with a uniform draw from
/// `i..len` for the first `min(size, len)` positions.
fn sample(mut docs: Vec<Document>, size: usize, seed: u64) -> Vec<Document> {
    let len = docs.len();
    let take = size.min(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..take {
        let j = rng.gen_range(i..len);
        docs.swap(i, j);
    }
    docs.truncate(take);
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn docs(values: Vec<Value>) -> Vec<Document> {
        values.into_iter().map(|v| Document::from_value(v).unwrap()).collect()
    }

    fn run(values: Vec<Value>, pipeline: &str) -> Vec<Value> {
        let p = AggregationPipeline::parse(pipeline).unwrap();
        run_pipeline(docs(values), &p)
            .unwrap()
            .into_iter()
            .map(Document::into_value)
            .collect()
    }

    #[test]
    fn match_by_literal() {
        let out = run(
            vec![json!({"s": "A"}), json!({"s": "B"}), json!({"s": "A"})],
            r#"[{"$match": {"s": "A"}}]"#,
        );
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn sort_then_limit_picks_minimum() {
        let out = run(
            vec![json!({"t": 5}), json!({"t": 2}), json!({"t": 9})],
            r#"[{"$sort": {"t": 1}}, {"$limit": 1}]"#,
        );
        assert_eq!(out, vec![json!({"t": 2})]);
    }

    #[test]
    fn group_counts_per_key() {
        let out = run(
            vec![json!({"s": "A"}), json!({"s": "B"}), json!({"s": "A"})],
            r#"[{"$group": {"_id": "$s", "n": {"$sum": 1}}}]"#,
        );
        assert_eq!(out, vec![json!({"_id": "A", "n": 2}), json!({"_id": "B", "n": 1})]);
    }

    #[test]
    fn missing_fields_fail_every_comparison_but_exists() {
        let input = vec![json!({"a": 1}), json!({"b": 1})];
        assert_eq!(run(input.clone(), r#"[{"$match": {"a": {"$ne": 5}}}]"#).len(), 1);
        assert_eq!(run(input.clone(), r#"[{"$match": {"a": {"$lt": 5}}}]"#).len(), 1);
        assert_eq!(run(input.clone(), r#"[{"$match": {"a": {"$exists": false}}}]"#), vec![json!({"b": 1})]);
        assert_eq!(run(input, r#"[{"$match": {"a": null}}]"#).len(), 0);
    }

    #[test]
    fn cross_type_comparisons_are_false() {
        let input = vec![json!({"a": "10"}), json!({"a": 10.0})];
        assert_eq!(run(input.clone(), r#"[{"$match": {"a": {"$gte": 5}}}]"#), vec![json!({"a": 10.0})]);
        assert_eq!(run(input, r#"[{"$match": {"a": 10}}]"#), vec![json!({"a": 10.0})]);
    }

    #[test]
    fn sort_is_stable_and_rejects_non_scalars() {
        let out = run(
            vec![json!({"k": 1, "i": 0}), json!({"k": 0, "i": 1}), json!({"k": 1, "i": 2}), json!({"i": 3})],
            r#"[{"$sort": {"k": -1}}]"#,
        );
        let order: Vec<i64> = out.iter().map(|d| d["i"].as_i64().unwrap()).collect();
        assert_eq!(order, [0, 2, 1, 3]);

        let p = AggregationPipeline::parse(r#"[{"$sort": {"k": 1}}]"#).unwrap();
        let err = run_pipeline(docs(vec![json!({"k": [1]})]), &p).unwrap_err();
        assert!(matches!(err, StoreError::BadFieldPath { .. }));
    }

    #[test]
    fn group_rejects_non_scalar_keys() {
        let p = AggregationPipeline::parse(r#"[{"$group": {"_id": "$k"}}]"#).unwrap();
        let err = run_pipeline(docs(vec![json!({"k": {"x": 1}})]), &p).unwrap_err();
        assert!(matches!(err, StoreError::BadFieldPath { .. }));
    }

    #[test]
    fn accumulators() {
        let out = run(
            vec![json!({"g": 1, "v": 2}), json!({"g": 1, "v": 4.5}), json!({"g": 1}), json!({"g": 2, "v": "x"})],
            r#"[{"$group": {"_id": "$g", "s": {"$sum": "$v"}, "a": {"$avg": "$v"},
                "lo": {"$min": "$v"}, "hi": {"$max": "$v"}, "c": {"$count": {}}}}]"#,
        );
        assert_eq!(
            out,
            vec![
                json!({"_id": 1, "s": 6.5, "a": 3.25, "lo": 2, "hi": 4.5, "c": 3}),
                json!({"_id": 2, "s": 0, "a": null, "lo": "x", "hi": "x", "c": 1}),
            ]
        );
    }

    #[test]
    fn projection_modes() {
        let input = vec![json!({"_id": "1", "a": {"b": 1, "c": 2}, "d": 3})];
        assert_eq!(
            run(input.clone(), r#"[{"$project": {"a.b": 1, "x": "$d"}}]"#),
            vec![json!({"_id": "1", "a": {"b": 1}, "x": 3})]
        );
        assert_eq!(
            run(input.clone(), r#"[{"$project": {"_id": 0, "d": 1}}]"#),
            vec![json!({"d": 3})]
        );
        assert_eq!(
            run(input, r#"[{"$project": {"a.c": 0, "d": 0}}]"#),
            vec![json!({"_id": "1", "a": {"b": 1}})]
        );
    }

    #[test]
    fn sample_is_seeded_prefix_without_duplicates() {
        let input: Vec<Value> = (0..20).map(|i| json!({"i": i})).collect();
        let a = run(input.clone(), r#"[{"$sample": {"size": 5, "seed": 3}}]"#);
        let b = run(input.clone(), r#"[{"$sample": {"size": 5, "seed": 3}}]"#);
        let c = run(input.clone(), r#"[{"$sample": {"size": 5, "seed": 4}}]"#);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut ids: Vec<i64> = a.iter().map(|d| d["i"].as_i64().unwrap()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        assert_eq!(run(input, r#"[{"$sample": {"size": 50, "seed": 3}}]"#).len(), 20);
    }
}
