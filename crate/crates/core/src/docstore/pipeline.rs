//! Aggregation pipeline grammar: a MongoDB-style JSON array of single-key stage
//! objects.

use serde_json::{Number, Value};

use super::ordered::OrderedJson;
use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Ne,
    Gt,
    Gte,
    Lt,
    Lte,
}

impl CompareOp {
    fn keyword(self) -> &'static str {
        match self {
            CompareOp::Eq => "$eq",
            CompareOp::Ne => "$ne",
            CompareOp::Gt => "$gt",
            CompareOp::Gte => "$gte",
            CompareOp::Lt => "$lt",
            CompareOp::Lte => "$lte",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldOp {
    Compare(CompareOp, Value),
    In(Vec<Value>),
    Exists(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    /// `{field: literal}`
    Equals(Value),
    /// `{field: {$op: v, ...}}`, all operators must hold.
    Ops(Vec<FieldOp>),
}

/// Implicit AND over `(path, condition)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Filter {
    pub clauses: Vec<(String, Condition)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Include,
    Exclude,
    /// `alias: "$path"`
    Field(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectSpec {
    pub fields: Vec<(String, Projection)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SortDir {
    Asc,
    Desc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupKey {
    Literal(Value),
    Field(String),
    Compound(Vec<(String, GroupKey)>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Const(Number),
    Field(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Accumulator {
    Sum(Operand),
    Avg(String),
    Min(String),
    Max(String),
    Count,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Match(Filter),
    Project(ProjectSpec),
    Sort(Vec<(String, SortDir)>),
    Limit(u64),
    Skip(u64),
    Group {
        key: GroupKey,
        accumulators: Vec<(String, Accumulator)>,
    },
    Sample {
        size: u64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregationPipeline {
    pub stages: Vec<Stage>,
}

fn bad(stage: usize, msg: impl Into<String>) -> StoreError {
    StoreError::BadPipeline {
        stage,
        message: msg.into(),
    }
}

fn field_ref(value: &OrderedJson) -> Option<String> {
    match value {
        OrderedJson::String(s) if s.len() > 1 && s.starts_with('$') => Some(s[1..].to_owned()),
        _ => None,
    }
}

fn non_negative(value: &OrderedJson) -> Option<u64> {
    match value {
        OrderedJson::Number(n) => n.as_u64().or_else(|| {
            n.as_f64()
                .filter(|f| *f >= 0.0 && f.fract() == 0.0 && *f < u64::MAX as f64)
                .map(|f| f as u64)
        }),
        _ => None,
    }
}

impl AggregationPipeline {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self { stages }
    }

    pub fn parse(text: &str) -> Result<Self, StoreError> {
        let tree: OrderedJson = serde_json::from_str(text).map_err(|e| bad(0, e.to_string()))?;
        Self::from_ordered(&tree)
    }

    /// Parses from an already decoded value. Key order inside `$sort` follows
    /// the map's iteration order, which for `serde_json::Value` is sorted.
    pub fn from_value(value: &Value) -> Result<Self, StoreError> {
        Self::from_ordered(&OrderedJson::from_value(value))
    }

    pub fn from_ordered(tree: &OrderedJson) -> Result<Self, StoreError> {
        let OrderedJson::Array(items) = tree else {
            return Err(bad(0, "pipeline must be a JSON array"));
        };
        let stages = items
            .iter()
            .enumerate()
            .map(|(i, item)| parse_stage(i, item))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { stages })
    }

    pub fn to_ordered(&self) -> OrderedJson {
        OrderedJson::Array(self.stages.iter().map(stage_to_ordered).collect())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&self.to_ordered()).expect("ordered JSON serializes")
    }
}

fn parse_stage(index: usize, item: &OrderedJson) -> Result<Stage, StoreError> {
    let entries = item
        .as_object()
        .ok_or_else(|| bad(index, "stage must be an object"))?;
    let [(name, body)] = entries else {
        return Err(bad(index, "stage object must have exactly one key"));
    };
    match name.as_str() {
        "$match" => parse_match(index, body).map(Stage::Match),
        "$project" => parse_project(index, body).map(Stage::Project),
        "$sort" => {
            let keys = body
                .as_object()
                .ok_or_else(|| bad(index, "$sort expects an object"))?;
            if keys.is_empty() {
                return Err(bad(index, "$sort needs at least one key"));
            }
            keys.iter()
                .map(|(path, dir)| {
                    let dir = match dir {
                        OrderedJson::Number(n) if n.as_f64() == Some(1.0) => SortDir::Asc,
                        OrderedJson::Number(n) if n.as_f64() == Some(-1.0) => SortDir::Desc,
                        _ => return Err(bad(index, format!("sort direction for `{path}` must be 1 or -1"))),
                    };
                    Ok((path.clone(), dir))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Stage::Sort)
        }
        "$limit" => non_negative(body)
            .map(Stage::Limit)
            .ok_or_else(|| bad(index, "$limit expects a non-negative integer")),
        "$skip" => non_negative(body)
            .map(Stage::Skip)
            .ok_or_else(|| bad(index, "$skip expects a non-negative integer")),
        "$group" => parse_group(index, body),
        "$sample" => {
            let spec = body
                .as_object()
                .ok_or_else(|| bad(index, "$sample expects {size, seed}"))?;
            let mut size = None;
            let mut seed = 0;
            for (k, v) in spec {
                match k.as_str() {
                    "size" => size = non_negative(v),
                    "seed" => {
                        seed = non_negative(v).ok_or_else(|| bad(index, "$sample seed must be a non-negative integer"))?
                    }
                    other => return Err(bad(index, format!("unknown $sample option `{other}`"))),
                }
            }
            let size = size.ok_or_else(|| bad(index, "$sample requires a non-negative `size`"))?;
            Ok(Stage::Sample { size, seed })
        }
        other => Err(bad(index, format!("unknown stage `{other}`"))),
    }
}

fn parse_match(index: usize, body: &OrderedJson) -> Result<Filter, StoreError> {
    let entries = body
        .as_object()
        .ok_or_else(|| bad(index, "$match expects an object"))?;
    let mut clauses = Vec::with_capacity(entries.len());
    for (path, cond) in entries {
        if path.starts_with('$') {
            return Err(bad(index, format!("unsupported top-level operator `{path}`")));
        }
        let condition = match cond.as_object() {
            Some(ops) if !ops.is_empty() && ops.iter().all(|(k, _)| k.starts_with('$')) => {
                let ops = ops
                    .iter()
                    .map(|(op, v)| parse_field_op(index, op, v))
                    .collect::<Result<Vec<_>, _>>()?;
                Condition::Ops(ops)
            }
            Some(ops) if ops.iter().any(|(k, _)| k.starts_with('$')) => {
                return Err(bad(index, format!("cannot mix operators and fields under `{path}`")))
            }
            _ => Condition::Equals(cond.to_value()),
        };
        clauses.push((path.clone(), condition));
    }
    Ok(Filter { clauses })
}

fn parse_field_op(index: usize, op: &str, value: &OrderedJson) -> Result<FieldOp, StoreError> {
    let cmp = |c| Ok(FieldOp::Compare(c, value.to_value()));
    match op {
        "$eq" => cmp(CompareOp::Eq),
        "$ne" => cmp(CompareOp::Ne),
        "$gt" => cmp(CompareOp::Gt),
        "$gte" => cmp(CompareOp::Gte),
        "$lt" => cmp(CompareOp::Lt),
        "$lte" => cmp(CompareOp::Lte),
        "$in" => match value.to_value() {
            Value::Array(items) => Ok(FieldOp::In(items)),
            _ => Err(bad(index, "$in expects an array")),
        },
        "$exists" => match value {
            OrderedJson::Bool(b) => Ok(FieldOp::Exists(*b)),
            OrderedJson::Number(n) => Ok(FieldOp::Exists(n.as_f64() != Some(0.0))),
            _ => Err(bad(index, "$exists expects a boolean")),
        },
        other => Err(bad(index, format!("unknown operator `{other}`"))),
    }
}

fn parse_project(index: usize, body: &OrderedJson) -> Result<ProjectSpec, StoreError> {
    let entries = body
        .as_object()
        .ok_or_else(|| bad(index, "$project expects an object"))?;
    if entries.is_empty() {
        return Err(bad(index, "$project needs at least one field"));
    }
    let mut fields = Vec::with_capacity(entries.len());
    for (path, spec) in entries {
        let projection = match spec {
            OrderedJson::Bool(true) => Projection::Include,
            OrderedJson::Bool(false) => Projection::Exclude,
            OrderedJson::Number(n) => {
                if n.as_f64() == Some(0.0) {
                    Projection::Exclude
                } else {
                    Projection::Include
                }
            }
            other => match field_ref(other) {
                Some(src) => Projection::Field(src),
                None => return Err(bad(index, format!("unsupported projection for `{path}`"))),
            },
        };
        fields.push((path.clone(), projection));
    }
    let excludes_other = fields
        .iter()
        .any(|(p, f)| *f == Projection::Exclude && p != "_id");
    let includes = fields.iter().any(|(_, f)| *f != Projection::Exclude);
    if excludes_other && includes {
        return Err(bad(index, "cannot mix inclusion and exclusion in $project"));
    }
    Ok(ProjectSpec { fields })
}

fn parse_group_key(index: usize, value: &OrderedJson) -> Result<GroupKey, StoreError> {
    if let Some(path) = field_ref(value) {
        return Ok(GroupKey::Field(path));
    }
    match value {
        OrderedJson::Object(entries) => entries
            .iter()
            .map(|(k, v)| Ok((k.clone(), parse_group_key(index, v)?)))
            .collect::<Result<Vec<_>, _>>()
            .map(GroupKey::Compound),
        OrderedJson::Array(_) => Err(bad(index, "group _id cannot be an array")),
        scalar => Ok(GroupKey::Literal(scalar.to_value())),
    }
}

fn parse_group(index: usize, body: &OrderedJson) -> Result<Stage, StoreError> {
    let entries = body
        .as_object()
        .ok_or_else(|| bad(index, "$group expects an object"))?;
    let mut key = None;
    let mut accumulators = Vec::new();
    for (name, spec) in entries {
        if name == "_id" {
            key = Some(parse_group_key(index, spec)?);
            continue;
        }
        let acc = spec
            .as_object()
            .and_then(|e| match e {
                [(op, arg)] => Some((op.as_str(), arg)),
                _ => None,
            })
            .ok_or_else(|| bad(index, format!("accumulator `{name}` must be a single-operator object")))?;
        let path_arg = |arg: &OrderedJson| {
            field_ref(arg).ok_or_else(|| bad(index, format!("accumulator `{name}` expects a \"$field\" reference")))
        };
        let accumulator = match acc {
            ("$sum", OrderedJson::Number(n)) => Accumulator::Sum(Operand::Const(n.clone())),
            ("$sum", arg) => Accumulator::Sum(Operand::Field(path_arg(arg)?)),
            ("$avg", arg) => Accumulator::Avg(path_arg(arg)?),
            ("$min", arg) => Accumulator::Min(path_arg(arg)?),
            ("$max", arg) => Accumulator::Max(path_arg(arg)?),
            ("$count", OrderedJson::Object(o)) if o.is_empty() => Accumulator::Count,
            (op, _) => return Err(bad(index, format!("unsupported accumulator `{op}`"))),
        };
        accumulators.push((name.clone(), accumulator));
    }
    let key = key.ok_or_else(|| bad(index, "$group requires an _id"))?;
    Ok(Stage::Group { key, accumulators })
}

fn obj(entries: Vec<(String, OrderedJson)>) -> OrderedJson {
    OrderedJson::Object(entries)
}

fn single(key: &str, value: OrderedJson) -> OrderedJson {
    obj(vec![(key.to_owned(), value)])
}

fn dollar(path: &str) -> OrderedJson {
    OrderedJson::String(format!("${path}"))
}

fn group_key_to_ordered(key: &GroupKey) -> OrderedJson {
    match key {
        GroupKey::Literal(v) => OrderedJson::from_value(v),
        GroupKey::Field(p) => dollar(p),
        GroupKey::Compound(parts) => obj(parts
            .iter()
            .map(|(k, v)| (k.clone(), group_key_to_ordered(v)))
            .collect()),
    }
}

fn stage_to_ordered(stage: &Stage) -> OrderedJson {
    match stage {
        Stage::Match(filter) => single(
            "$match",
            obj(filter
                .clauses
                .iter()
                .map(|(path, cond)| {
                    let value = match cond {
                        Condition::Equals(v) => OrderedJson::from_value(v),
                        Condition::Ops(ops) => obj(ops
                            .iter()
                            .map(|op| match op {
                                FieldOp::Compare(c, v) => (c.keyword().to_owned(), OrderedJson::from_value(v)),
                                FieldOp::In(items) => (
                                    "$in".to_owned(),
                                    OrderedJson::Array(items.iter().map(OrderedJson::from_value).collect()),
                                ),
                                FieldOp::Exists(b) => ("$exists".to_owned(), OrderedJson::Bool(*b)),
                            })
                            .collect()),
                    };
                    (path.clone(), value)
                })
                .collect()),
        ),
        Stage::Project(spec) => single(
            "$project",
            obj(spec
                .fields
                .iter()
                .map(|(path, p)| {
                    let v = match p {
                        Projection::Include => OrderedJson::Number(1.into()),
                        Projection::Exclude => OrderedJson::Number(0.into()),
                        Projection::Field(src) => dollar(src),
                    };
                    (path.clone(), v)
                })
                .collect()),
        ),
        Stage::Sort(keys) => single(
            "$sort",
            obj(keys
                .iter()
                .map(|(path, dir)| {
                    let d: i64 = if *dir == SortDir::Asc { 1 } else { -1 };
                    (path.clone(), OrderedJson::Number(d.into()))
                })
                .collect()),
        ),
        Stage::Limit(n) => single("$limit", OrderedJson::Number((*n).into())),
        Stage::Skip(n) => single("$skip", OrderedJson::Number((*n).into())),
        Stage::Group { key, accumulators } => {
            let mut entries = vec![("_id".to_owned(), group_key_to_ordered(key))];
            for (name, acc) in accumulators {
                let spec = match acc {
                    Accumulator::Sum(Operand::Const(n)) => single("$sum", OrderedJson::Number(n.clone())),
                    Accumulator::Sum(Operand::Field(p)) => single("$sum", dollar(p)),
                    Accumulator::Avg(p) => single("$avg", dollar(p)),
                    Accumulator::Min(p) => single("$min", dollar(p)),
                    Accumulator::Max(p) => single("$max", dollar(p)),
                    Accumulator::Count => single("$count", obj(vec![])),
                };
                entries.push((name.clone(), spec));
            }
            single("$group", obj(entries))
        }
        Stage::Sample { size, seed } => single(
            "$sample",
            obj(vec![
                ("size".to_owned(), OrderedJson::Number((*size).into())),
                ("seed".to_owned(), OrderedJson::Number((*seed).into())),
            ]),
        ),
    }
}
