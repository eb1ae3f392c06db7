//! Shared fixtures for the integration tests: a brute-force aggregation
//! evaluator written directly against `serde_json::Value`, and random
//! document / pipeline generators.

#![allow(dead_code)]

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Number, Value};

// ---------------------------------------------------------------------------
// value semantics

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    let mut cur = doc;
    for part in path.split('.') {
        cur = cur.as_object()?.get(part)?;
    }
    Some(cur)
}

fn scalar(v: &Value) -> bool {
    !(v.is_array() || v.is_object())
}

fn num_eq(a: &Number, b: &Number) -> bool {
    match (a.as_i64(), b.as_i64()) {
        (Some(x), Some(y)) => x == y,
        _ => a.as_f64() == b.as_f64(),
    }
}

fn deep_eq(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => num_eq(x, y),
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| deep_eq(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| deep_eq(v, w)))
        }
        _ => a == b,
    }
}

fn num_cmp(a: &Number, b: &Number) -> Option<Ordering> {
    match (a.as_i64(), b.as_i64()) {
        (Some(x), Some(y)) => Some(x.cmp(&y)),
        _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
    }
}

fn same_kind_cmp(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => num_cmp(x, y),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

fn rank(v: Option<&Value>) -> u8 {
    match v {
        None | Some(Value::Null) => 0,
        Some(Value::Number(_)) => 1,
        Some(Value::String(_)) => 2,
        Some(Value::Bool(_)) => 3,
        _ => 4,
    }
}

fn total_cmp(a: Option<&Value>, b: Option<&Value>) -> Ordering {
    rank(a).cmp(&rank(b)).then_with(|| match (a, b) {
        (Some(Value::Bool(x)), Some(Value::Bool(y))) => x.cmp(y),
        (Some(x), Some(y)) => same_kind_cmp(x, y).unwrap_or(Ordering::Equal),
        _ => Ordering::Equal,
    })
}

// ---------------------------------------------------------------------------
// stages

fn op_holds(v: Option<&Value>, op: &str, arg: &Value) -> bool {
    if op == "$exists" {
        let want = match arg {
            Value::Bool(b) => *b,
            Value::Number(n) => n.as_f64() != Some(0.0),
            _ => unreachable!("generator only emits booleans"),
        };
        return v.is_some() == want;
    }
    let Some(v) = v else { return false };
    match op {
        "$eq" => deep_eq(v, arg),
        "$ne" => !deep_eq(v, arg),
        "$in" => arg.as_array().expect("$in array").iter().any(|a| deep_eq(v, a)),
        "$gt" => same_kind_cmp(v, arg) == Some(Ordering::Greater),
        "$lt" => same_kind_cmp(v, arg) == Some(Ordering::Less),
        "$gte" => matches!(same_kind_cmp(v, arg), Some(Ordering::Greater | Ordering::Equal)),
        "$lte" => matches!(same_kind_cmp(v, arg), Some(Ordering::Less | Ordering::Equal)),
        other => panic!("oracle does not know {other}"),
    }
}

fn matches(doc: &Value, filter: &Map<String, Value>) -> bool {
    filter.iter().all(|(path, cond)| {
        let v = lookup(doc, path);
        match cond.as_object() {
            Some(ops) if !ops.is_empty() && ops.keys().all(|k| k.starts_with('$')) => {
                ops.iter().all(|(op, arg)| op_holds(v, op, arg))
            }
            _ => v.is_some_and(|v| deep_eq(v, cond)),
        }
    })
}

fn put(out: &mut Map<String, Value>, path: &str, value: Value) {
    match path.split_once('.') {
        None => {
            out.insert(path.into(), value);
        }
        Some((head, rest)) => {
            let child = out.entry(head.to_owned()).or_insert_with(|| Value::Object(Map::new()));
            if !child.is_object() {
                *child = Value::Object(Map::new());
            }
            put(child.as_object_mut().unwrap(), rest, value);
        }
    }
}

fn strip(out: &mut Map<String, Value>, path: &str) {
    match path.split_once('.') {
        None => {
            out.remove(path);
        }
        Some((head, rest)) => {
            if let Some(Value::Object(c)) = out.get_mut(head) {
                strip(c, rest);
            }
        }
    }
}

fn is_exclude(v: &Value) -> bool {
    matches!(v, Value::Bool(false)) || v.as_f64() == Some(0.0)
}

fn project(doc: &Value, spec: &Map<String, Value>) -> Value {
    if spec.values().all(is_exclude) {
        let mut out = doc.as_object().unwrap().clone();
        for path in spec.keys() {
            strip(&mut out, path);
        }
        return Value::Object(out);
    }
    let mut out = Map::new();
    if !spec.get("_id").is_some_and(is_exclude) {
        if let Some(id) = doc.get("_id") {
            out.insert("_id".into(), id.clone());
        }
    }
    for (path, how) in spec {
        let src = match how {
            Value::String(s) => &s[1..],
            v if is_exclude(v) => continue,
            _ => path.as_str(),
        };
        if let Some(v) = lookup(doc, src) {
            put(&mut out, path, v.clone());
        }
    }
    Value::Object(out)
}

fn sort(docs: Vec<Value>, keys: &Map<String, Value>) -> Result<Vec<Value>, String> {
    for d in &docs {
        for k in keys.keys() {
            if lookup(d, k).is_some_and(|v| !scalar(v)) {
                return Err(format!("non-scalar sort key {k}"));
            }
        }
    }
    let mut docs = docs;
    // Vec::sort_by is stable, which is what the store promises too.
    docs.sort_by(|a, b| {
        keys.iter()
            .map(|(k, dir)| {
                let o = total_cmp(lookup(a, k), lookup(b, k));
                if dir.as_i64() == Some(-1) {
                    o.reverse()
                } else {
                    o
                }
            })
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    });
    Ok(docs)
}

fn key_of(doc: &Value, spec: &Value) -> Result<Value, String> {
    match spec {
        Value::String(s) if s.len() > 1 && s.starts_with('$') => match lookup(doc, &s[1..]) {
            None => Ok(Value::Null),
            Some(v) if scalar(v) => Ok(v.clone()),
            Some(_) => Err(format!("non-scalar group key {s}")),
        },
        Value::Object(parts) => {
            let mut out = Map::new();
            for (k, p) in parts {
                out.insert(k.clone(), key_of(doc, p)?);
            }
            Ok(Value::Object(out))
        }
        lit => Ok(lit.clone()),
    }
}

enum Acc {
    Sum { int: Option<i64>, float: f64 },
    Avg(f64, u64),
    Best(Option<Value>),
    Count(i64),
}

fn group(docs: &[Value], spec: &Map<String, Value>) -> Result<Vec<Value>, String> {
    let id_spec = &spec["_id"];
    let accs: Vec<(&String, &str, &Value)> = spec
        .iter()
        .filter(|(k, _)| *k != "_id")
        .map(|(k, v)| {
            let (op, arg) = v.as_object().unwrap().iter().next().unwrap();
            (k, op.as_str(), arg)
        })
        .collect();
    let mut groups: Vec<(Value, Vec<Acc>)> = Vec::new();
    for d in docs {
        let id = key_of(d, id_spec)?;
        let slot = match groups.iter().position(|(g, _)| deep_eq(g, &id)) {
            Some(i) => i,
            None => {
                let fresh = accs
                    .iter()
                    .map(|(_, op, _)| match *op {
                        "$sum" => Acc::Sum { int: Some(0), float: 0.0 },
                        "$avg" => Acc::Avg(0.0, 0),
                        "$min" | "$max" => Acc::Best(None),
                        "$count" => Acc::Count(0),
                        o => panic!("oracle does not know {o}"),
                    })
                    .collect();
                groups.push((id, fresh));
                groups.len() - 1
            }
        };
        for ((_, op, arg), acc) in accs.iter().zip(groups[slot].1.iter_mut()) {
            let field = arg.as_str().map(|s| &s[1..]);
            match acc {
                Acc::Sum { int, float } => {
                    let n = match (arg, field) {
                        (Value::Number(n), _) => Some(n.clone()),
                        (_, Some(f)) => lookup(d, f).and_then(|v| v.as_number().cloned()),
                        _ => None,
                    };
                    if let Some(n) = n {
                        match (*int, n.as_i64()) {
                            (Some(a), Some(b)) if a.checked_add(b).is_some() => *int = Some(a + b),
                            (Some(a), _) => {
                                *float = a as f64 + n.as_f64().unwrap();
                                *int = None;
                            }
                            (None, _) => *float += n.as_f64().unwrap(),
                        }
                    }
                }
                Acc::Avg(total, count) => {
                    if let Some(Value::Number(n)) = lookup(d, field.unwrap()) {
                        *total += n.as_f64().unwrap();
                        *count += 1;
                    }
                }
                Acc::Best(best) => match lookup(d, field.unwrap()) {
                    None | Some(Value::Null) => {}
                    Some(v) if !scalar(v) => return Err(format!("non-scalar {op} operand")),
                    Some(v) => {
                        let better = best.as_ref().is_none_or(|b| {
                            let o = total_cmp(Some(v), Some(b));
                            if *op == "$max" {
                                o.is_gt()
                            } else {
                                o.is_lt()
                            }
                        });
                        if better {
                            *best = Some(v.clone());
                        }
                    }
                },
                Acc::Count(n) => *n += 1,
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(id, states)| {
            let mut out = Map::new();
            out.insert("_id".into(), id);
            for ((name, _, _), s) in accs.iter().zip(states) {
                let v = match s {
                    Acc::Sum { int: Some(i), .. } => json!(i),
                    Acc::Sum { int: None, float } => Number::from_f64(float).map_or(Value::Null, Value::Number),
                    Acc::Avg(_, 0) => Value::Null,
                    Acc::Avg(t, c) => Number::from_f64(t / c as f64).map_or(Value::Null, Value::Number),
                    Acc::Best(b) => b.unwrap_or(Value::Null),
                    Acc::Count(n) => json!(n),
                };
                out.insert((*name).clone(), v);
            }
            Value::Object(out)
        })
        .collect())
}

fn sample(mut docs: Vec<Value>, size: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = docs.len();
    for i in 0..size.min(n) {
        let j = rng.gen_range(i..n);
        docs.swap(i, j);
    }
    docs.truncate(size.min(n));
    docs
}

/// Evaluates a pipeline by brute force. Errors are reported as strings; only
/// their presence matters to callers.
pub fn brute_force(docs: &[Value], pipeline: &Value) -> Result<Vec<Value>, String> {
    let mut cur = docs.to_vec();
    for stage in pipeline.as_array().expect("array pipeline") {
        let (name, body) = stage.as_object().unwrap().iter().next().unwrap();
        cur = match name.as_str() {
            "$match" => cur.into_iter().filter(|d| matches(d, body.as_object().unwrap())).collect(),
            "$project" => cur.iter().map(|d| project(d, body.as_object().unwrap())).collect(),
            "$sort" => sort(cur, body.as_object().unwrap())?,
            "$limit" => cur.into_iter().take(body.as_u64().unwrap() as usize).collect(),
            "$skip" => cur.into_iter().skip(body.as_u64().unwrap() as usize).collect(),
            "$group" => group(&cur, body.as_object().unwrap())?,
            "$sample" => sample(cur, body["size"].as_u64().unwrap() as usize, body["seed"].as_u64().unwrap()),
            other => panic!("oracle does not know {other}"),
        };
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// generators

const WORDS: [&str; 6] = ["apple", "Banana", "cherry", "date", "apple pie", ""];

fn random_number(rng: &mut impl Rng) -> Value {
    if rng.gen_bool(0.5) {
        json!(rng.gen_range(-5i64..20))
    } else {
        // Halves keep float arithmetic exact-ish but still exercise rounding.
        json!(f64::from(rng.gen_range(-40i32..40)) / 2.0 + if rng.gen_bool(0.2) { 0.1 } else { 0.0 })
    }
}

/// One random document. Fields vary in presence and type on purpose.
pub fn random_doc(i: usize, rng: &mut impl Rng) -> Value {
    let mut d = Map::new();
    d.insert("_id".into(), json!(format!("d{i:04}")));
    match rng.gen_range(0..10) {
        0 => {}
        1 => {
            d.insert("g".into(), Value::Null);
        }
        2 => {
            d.insert("g".into(), json!(WORDS[rng.gen_range(0..3)]));
        }
        3 => {
            d.insert("g".into(), json!(f64::from(rng.gen_range(0..5))));
        }
        _ => {
            d.insert("g".into(), json!(rng.gen_range(0i64..5)));
        }
    }
    if rng.gen_bool(0.9) {
        d.insert("v".into(), random_number(rng));
    }
    if rng.gen_bool(0.8) {
        d.insert("s".into(), json!(WORDS[rng.gen_range(0..WORDS.len())]));
    }
    match rng.gen_range(0..6) {
        0 => {}
        1 => {
            d.insert("nested".into(), json!(7));
        }
        _ => {
            let mut n = Map::new();
            if rng.gen_bool(0.8) {
                n.insert("x".into(), random_number(rng));
            }
            if rng.gen_bool(0.7) {
                n.insert("y".into(), json!(WORDS[rng.gen_range(0..WORDS.len())]));
            }
            d.insert("nested".into(), Value::Object(n));
        }
    }
    if rng.gen_bool(0.7) {
        d.insert("flag".into(), json!(rng.gen_bool(0.5)));
    }
    if rng.gen_bool(0.03) {
        d.insert("t".into(), json!([1, 2]));
    }
    Value::Object(d)
}

const SCALAR_PATHS: [&str; 6] = ["g", "v", "s", "nested.x", "nested.y", "flag"];

fn literal_for(path: &str, rng: &mut impl Rng) -> Value {
    match path {
        "g" => {
            if rng.gen_bool(0.8) {
                json!(rng.gen_range(0i64..5))
            } else {
                json!(WORDS[rng.gen_range(0..3)])
            }
        }
        "s" | "nested.y" => json!(WORDS[rng.gen_range(0..WORDS.len())]),
        "flag" => json!(rng.gen_bool(0.5)),
        "t" => json!([1, 2]),
        _ => random_number(rng),
    }
}

fn random_match(rng: &mut impl Rng) -> Value {
    let mut m = Map::new();
    for _ in 0..rng.gen_range(1..=2) {
        let path = *["g", "v", "s", "nested.x", "nested.y", "flag", "t", "nested"].choose(rng).unwrap();
        let cond = match rng.gen_range(0..9) {
            0 | 1 => literal_for(path, rng),
            2 => json!({ "$ne": literal_for(path, rng) }),
            3 => json!({ "$in": [literal_for(path, rng), literal_for(path, rng), Value::Null] }),
            4 => json!({ "$exists": rng.gen_bool(0.5) }),
            5 => json!({ "$gt": literal_for(path, rng), "$lte": literal_for(path, rng) }),
            6 => json!({ "$gte": literal_for(path, rng) }),
            7 => json!({ "$lt": literal_for(path, rng) }),
            _ => json!({ "$eq": literal_for(path, rng) }),
        };
        m.insert(path.into(), cond);
    }
    json!({ "$match": m })
}

fn random_project(rng: &mut impl Rng) -> Value {
    let mut p = Map::new();
    match rng.gen_range(0..3) {
        0 => {
            for f in ["v", "s", "nested.x", "flag"] {
                if rng.gen_bool(0.5) {
                    p.insert(f.into(), json!(0));
                }
            }
            if p.is_empty() {
                p.insert("s".into(), json!(false));
            }
        }
        _ => {
            for f in ["g", "v", "nested.y"] {
                if rng.gen_bool(0.5) {
                    p.insert(f.into(), json!(1));
                }
            }
            if rng.gen_bool(0.5) {
                p.insert("alias".into(), json!(format!("${}", SCALAR_PATHS.choose(rng).unwrap())));
            }
            if rng.gen_bool(0.3) {
                p.insert("_id".into(), json!(0));
            }
            p.insert("s".into(), json!(true));
        }
    }
    json!({ "$project": p })
}

fn random_group(rng: &mut impl Rng) -> Value {
    let mut g = Map::new();
    let key = match rng.gen_range(0..5) {
        0 => Value::Null,
        1 => json!({ "a": "$g", "b": "$flag" }),
        2 => json!("$s"),
        3 => json!("$nested.y"),
        _ => json!("$g"),
    };
    g.insert("_id".into(), key);
    let pick = |rng: &mut dyn rand::RngCore| ["$v", "$nested.x", "$s", "$g", "$flag"][rng.gen_range(0..5)];
    g.insert("total".into(), json!({ "$sum": pick(rng) }));
    if rng.gen_bool(0.5) {
        g.insert("n".into(), json!({ "$sum": 1 }));
    }
    if rng.gen_bool(0.5) {
        g.insert("mean".into(), json!({ "$avg": pick(rng) }));
    }
    if rng.gen_bool(0.5) {
        g.insert("lo".into(), json!({ "$min": pick(rng) }));
    }
    if rng.gen_bool(0.5) {
        g.insert("hi".into(), json!({ "$max": pick(rng) }));
    }
    if rng.gen_bool(0.5) {
        g.insert("count".into(), json!({ "$count": {} }));
    }
    json!({ "$group": g })
}

fn random_sort(rng: &mut impl Rng) -> Value {
    let mut s = Map::new();
    for _ in 0..rng.gen_range(1..=3) {
        let path = if rng.gen_bool(0.03) { "t" } else { SCALAR_PATHS.choose(rng).unwrap() };
        s.insert(path.into(), json!(if rng.gen_bool(0.5) { 1 } else { -1 }));
    }
    // `_id` last makes most orders total, but ties must still be stable.
    if rng.gen_bool(0.5) {
        s.insert("_id".into(), json!(1));
    }
    json!({ "$sort": s })
}

/// A random pipeline of one to five stages.
pub fn random_pipeline(rng: &mut impl Rng) -> Value {
    let n = rng.gen_range(1..=5);
    let stages: Vec<Value> = (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=2 => random_match(rng),
            3 => random_project(rng),
            4 | 5 => random_sort(rng),
            6 => json!({ "$limit": rng.gen_range(0..300) }),
            7 => json!({ "$skip": rng.gen_range(0..300) }),
            8 => random_group(rng),
            _ => json!({ "$sample": { "size": rng.gen_range(0..400), "seed": rng.gen_range(0..1000) } }),
        })
        .collect();
    Value::Array(stages)
}

pub fn random_docs(n: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_doc(i, &mut rng)).collect()
}
