use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde_json::Value;

use super::document::{value_key, Document, ID_FIELD};
use super::eval::{matches_filter, run_stages};
use super::ordered::OrderedJson;
use super::pipeline::{AggregationPipeline, CompareOp, Condition, FieldOp, Stage};
use super::StoreError;

pub const COLLECTION_EXT: &str = "ndjson";
pub const INDEX_EXT: &str = "indexes.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Hash,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSpec {
    pub field_path: String,
    pub kind: IndexKind,
}

#[derive(Debug, Default)]
struct HashIndex {
    entries: HashMap<String, Vec<usize>>,
}

impl HashIndex {
    fn build(path: &str, docs: &[Document]) -> Self {
        let mut index = Self::default();
        for (pos, doc) in docs.iter().enumerate() {
            index.add(path, doc, pos);
        }
        index
    }

    fn add(&mut self, path: &str, doc: &Document, pos: usize) {
        if let Some(v) = doc.get_path(path) {
            self.entries.entry(value_key(v)).or_default().push(pos);
        }
    }
}

#[derive(Debug, Default)]
struct Collection {
    docs: Vec<Document>,
    ids: HashMap<String, usize>,
    indexes: BTreeMap<String, HashIndex>,
}

impl Collection {
    fn push(&mut self, doc: Document) {
        let pos = self.docs.len();
        let id = doc.id().expect("stored documents carry a string _id").to_owned();
        for (path, index) in &mut self.indexes {
            index.add(path, &doc, pos);
        }
        self.ids.insert(id, pos);
        self.docs.push(doc);
    }
}

#[derive(Debug)]
struct WriterLock {
    path: PathBuf,
}

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn pid_alive(pid: u32) -> bool {
    if cfg!(target_os = "linux") {
        Path::new("/proc").join(pid.to_string()).exists()
    } else {
        true
    }
}

impl WriterLock {
    fn acquire(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    f.sync_all()?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if pid != std::process::id() && !pid_alive(pid) => {
                            log::warn!("removing stale lock held by dead process {pid}");
                            let _ = fs::remove_file(&path);
                        }
                        _ => return Err(StoreError::LockHeld { pid: holder }),
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(StoreError::LockHeld { pid: None })
    }
}

/// A handle over every collection in a store directory.
///
/// Collections are parsed on first access, so a task pays only for what it
/// reads. Writers hold the store's lock file for the handle's lifetime;
/// readers see each collection as fully flushed when they first touch it
/// (or after [`refresh`](Store::refresh)).
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    lock: Option<WriterLock>,
    collections: BTreeMap<String, OnceLock<Collection>>,
}

static ID_COUNTER: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    let n = ID_COUNTER.fetch_add(1, Ordering::Relaxed);
    format!("{nanos:x}-{:x}-{n:x}", std::process::id())
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Store {
    /// Opens `path` as the single writer, creating it if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = path.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let lock = WriterLock::acquire(&root)?;
        let mut store = Self {
            root,
            lock: Some(lock),
            collections: BTreeMap::new(),
        };
        store.load_all()?;
        Ok(store)
    }

    /// Like [`Store::open`], retrying while another writer holds the lock.
    pub fn open_wait(path: impl AsRef<Path>, timeout: Duration) -> Result<Self, StoreError> {
        let start = Instant::now();
        loop {
            match Self::open(path.as_ref()) {
                Err(StoreError::LockHeld { .. }) if start.elapsed() < timeout => {
                    std::thread::sleep(Duration::from_millis(20));
                }
                other => return other,
            }
        }
    }

    /// Opens a read-only snapshot; never touches the lock file.
    pub fn open_reader(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = path.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(StoreError::NotFound(format!("store directory {}", root.display())));
        }
        let mut store = Self {
            root,
            lock: None,
            collections: BTreeMap::new(),
        };
        store.load_all()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_writer(&self) -> bool {
        self.lock.is_some()
    }

    /// Forgets everything loaded so far; collections are re-read on next use.
    pub fn refresh(&mut self) -> Result<(), StoreError> {
        self.collections.clear();
        self.load_all()
    }

    /// Parses every collection now, surfacing any corruption.
    pub fn check(&self) -> Result<(), StoreError> {
        for name in self.collections.keys() {
            self.loaded(name)?;
        }
        Ok(())
    }

    fn loaded(&self, name: &str) -> Result<Option<&Collection>, StoreError> {
        let Some(cell) = self.collections.get(name) else {
            return Ok(None);
        };
        if cell.get().is_none() {
            let _ = cell.set(self.load_collection(name)?);
        }
        Ok(cell.get())
    }

    /// Accessors without a `Result` treat an unreadable collection as empty.
    fn coll(&self, name: &str) -> Option<&Collection> {
        match self.loaded(name) {
            Ok(c) => c,
            Err(e) => {
                log::error!("{e}");
                None
            }
        }
    }

    fn coll_mut(&mut self, name: &str) -> Result<&mut Collection, StoreError> {
        if !self.collections.contains_key(name) {
            self.collections.insert(name.to_owned(), OnceLock::from(Collection::default()));
        }
        self.loaded(name)?;
        Ok(self.collections.get_mut(name).and_then(OnceLock::get_mut).expect("loaded above"))
    }

    fn collection_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.{COLLECTION_EXT}"))
    }

    fn index_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.{INDEX_EXT}"))
    }

    fn load_all(&mut self) -> Result<(), StoreError> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(COLLECTION_EXT) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if valid_name(stem) {
                        names.push(stem.to_owned());
                    }
                }
            }
        }
        for name in names {
            self.collections.insert(name, OnceLock::new());
        }
        Ok(())
    }

    /// Feeds every complete document of a collection file to `f`, in order.
    fn read_file(&self, name: &str, mut f: impl FnMut(usize, Document) -> Result<(), StoreError>) -> Result<(), StoreError> {
        let corrupt = |line: usize, message: String| StoreError::CorruptCollection {
            collection: name.to_owned(),
            line,
            message,
        };
        let file = match File::open(self.collection_path(name)) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        let mut reader = BufReader::with_capacity(1 << 20, file);
        let mut buf = String::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            if reader.read_line(&mut buf)? == 0 {
                break;
            }
            line_no += 1;
            let complete = buf.ends_with('\n');
            let text = buf.trim();
            if text.is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<OrderedJson>(text).map(|o| o.to_value());
            let value = match parsed {
                Ok(v) => v,
                // A trailing line without a newline is a write still in flight.
                Err(_) if !complete => break,
                Err(e) => return Err(corrupt(line_no, e.to_string())),
            };
            let doc = Document::from_value(value).ok_or_else(|| corrupt(line_no, "not a JSON object".into()))?;
            if doc.id().is_none() {
                return Err(corrupt(line_no, "missing string _id".into()));
            }
            f(line_no, doc)?;
        }
        Ok(())
    }

    fn index_manifest(&self, name: &str) -> Result<Vec<String>, StoreError> {
        let index_path = self.index_path(name);
        if !index_path.exists() {
            return Ok(Vec::new());
        }
        serde_json::from_str(&fs::read_to_string(&index_path)?).map_err(|e| StoreError::CorruptCollection {
            collection: name.to_owned(),
            line: 0,
            message: format!("index manifest: {e}"),
        })
    }

    fn load_collection(&self, name: &str) -> Result<Collection, StoreError> {
        let mut collection = Collection::default();
        self.read_file(name, |line, doc| {
            if collection.ids.contains_key(doc.id().expect("checked by read_file")) {
                return Err(StoreError::CorruptCollection {
                    collection: name.to_owned(),
                    line,
                    message: format!("duplicate _id `{}`", doc.id().unwrap_or_default()),
                });
            }
            collection.push(doc);
            Ok(())
        })?;
        for path in self.index_manifest(name)? {
            let index = HashIndex::build(&path, &collection.docs);
            collection.indexes.insert(path, index);
        }
        Ok(collection)
    }

    /// Visits every document of a collection without caching it: the way to
    /// read collections too large to hold as documents.
    pub fn scan(&self, collection: &str, mut f: impl FnMut(&Document)) -> Result<usize, StoreError> {
        let mut n = 0;
        match self.collections.get(collection).and_then(OnceLock::get) {
            Some(c) => c.docs.iter().for_each(|d| {
                n += 1;
                f(d)
            }),
            None if self.collections.contains_key(collection) => self.read_file(collection, |_, d| {
                n += 1;
                f(&d);
                Ok(())
            })?,
            None => {}
        }
        Ok(n)
    }

    fn require_writer(&self) -> Result<(), StoreError> {
        if self.lock.is_some() {
            Ok(())
        } else {
            Err(StoreError::ReadOnly)
        }
    }

    pub fn collection_names(&self) -> Vec<String> {
        self.collections.keys().cloned().collect()
    }

    pub fn count(&self, collection: &str) -> usize {
        self.scan(collection, |_| ()).unwrap_or_else(|e| {
            log::error!("{e}");
            0
        })
    }

    /// All documents of a collection in insertion order; empty when absent.
    pub fn documents(&self, collection: &str) -> &[Document] {
        self.coll(collection).map_or(&[], |c| c.docs.as_slice())
    }

    /// Like [`Store::documents`], but reports a corrupt collection.
    pub fn try_documents(&self, collection: &str) -> Result<&[Document], StoreError> {
        Ok(self.loaded(collection)?.map_or(&[], |c| c.docs.as_slice()))
    }

    pub fn get(&self, collection: &str, id: &str) -> Option<&Document> {
        let c = self.coll(collection)?;
        c.ids.get(id).map(|&pos| &c.docs[pos])
    }

    pub fn indexes(&self, collection: &str) -> Vec<IndexSpec> {
        self.coll(collection).map_or_else(Vec::new, |c| {
            c.indexes
                .keys()
                .map(|p| IndexSpec {
                    field_path: p.clone(),
                    kind: IndexKind::Hash,
                })
                .collect()
        })
    }

    /// Appends documents all-or-nothing, assigning `_id`s where missing.
    pub fn insert_many(&mut self, collection: &str, docs: Vec<Document>) -> Result<usize, StoreError> {
        self.require_writer()?;
        if !valid_name(collection) {
            return Err(StoreError::InvalidName(collection.to_owned()));
        }
        let existing = self.loaded(collection)?;
        let mut seen = std::collections::HashSet::new();
        let mut prepared = Vec::with_capacity(docs.len());
        let mut payload = String::new();
        for mut doc in docs {
            let id = match doc.get(ID_FIELD) {
                Some(Value::String(s)) => s.clone(),
                None => {
                    let id = fresh_id();
                    doc.set(ID_FIELD, Value::String(id.clone()));
                    id
                }
                Some(other) => {
                    return Err(StoreError::InvalidDocument(format!("_id must be a string, got {other}")));
                }
            };
            if existing.is_some_and(|c| c.ids.contains_key(&id)) || !seen.insert(id.clone()) {
                return Err(StoreError::DuplicateId {
                    collection: collection.to_owned(),
                    id,
                });
            }
            payload.push_str(&doc.to_canonical_json());
            payload.push('\n');
            prepared.push(doc);
        }
        if prepared.is_empty() {
            return Ok(0);
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.collection_path(collection))?;
        file.write_all(payload.as_bytes())?;
        file.sync_data()?;
        let count = prepared.len();
        let target = self.coll_mut(collection)?;
        for doc in prepared {
            target.push(doc);
        }
        Ok(count)
    }

    /// Atomically rewrites a collection with `docs` (temp file + rename).
    /// Documents are streamed to disk and not kept in memory; the collection
    /// is re-read on next access.
    pub fn replace_collection(&mut self, collection: &str, docs: impl IntoIterator<Item = Document>) -> Result<usize, StoreError> {
        self.require_writer()?;
        if !valid_name(collection) {
            return Err(StoreError::InvalidName(collection.to_owned()));
        }
        let tmp = self.root.join(format!(".{collection}.{COLLECTION_EXT}.tmp"));
        let written = (|| {
            let mut out = io::BufWriter::with_capacity(1 << 20, File::create(&tmp)?);
            let mut ids = std::collections::HashSet::new();
            for mut doc in docs {
                if doc.id().is_none() {
                    if doc.get(ID_FIELD).is_some() {
                        return Err(StoreError::InvalidDocument("_id must be a string".into()));
                    }
                    doc.set(ID_FIELD, Value::String(fresh_id()));
                }
                let id = doc.id().expect("set above");
                if !ids.insert(id.to_owned()) {
                    return Err(StoreError::DuplicateId {
                        collection: collection.to_owned(),
                        id: id.to_owned(),
                    });
                }
                serde_json::to_writer(&mut out, doc.as_map()).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
            }
            let file = out.into_inner().map_err(|e| e.into_error())?;
            file.sync_all()?;
            Ok(ids.len())
        })();
        let count = match written {
            Ok(n) => n,
            Err(e) => {
                let _ = fs::remove_file(&tmp);
                return Err(e);
            }
        };
        fs::rename(&tmp, self.collection_path(collection))?;
        self.collections.insert(collection.to_owned(), OnceLock::new());
        Ok(count)
    }

    pub fn drop_collection(&mut self, collection: &str) -> Result<bool, StoreError> {
        self.require_writer()?;
        let existed = self.collections.remove(collection).is_some();
        for path in [self.collection_path(collection), self.index_path(collection)] {
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
        Ok(existed)
    }

    /// Declares a hash index on `field_path`; persisted alongside the
    /// collection. An index on a collection not yet loaded is built on load.
    pub fn create_index(&mut self, collection: &str, field_path: &str) -> Result<(), StoreError> {
        self.require_writer()?;
        if !valid_name(collection) {
            return Err(StoreError::InvalidName(collection.to_owned()));
        }
        if !self.collection_path(collection).exists() {
            File::create(self.collection_path(collection))?;
        }
        let mut paths = self.index_manifest(collection)?;
        if !paths.iter().any(|p| p == field_path) {
            paths.push(field_path.to_owned());
            paths.sort();
        }
        let cell = self.collections.entry(collection.to_owned()).or_default();
        if let Some(target) = cell.get_mut() {
            if !target.indexes.contains_key(field_path) {
                let index = HashIndex::build(field_path, &target.docs);
                target.indexes.insert(field_path.to_owned(), index);
            }
        }
        let tmp = self.root.join(format!(".{collection}.{INDEX_EXT}.tmp"));
        fs::write(&tmp, serde_json::to_string(&paths).expect("strings serialize"))?;
        fs::rename(&tmp, self.index_path(collection))?;
        Ok(())
    }

    /// Documents whose `field_path` equals `value`, in insertion order.
    /// Served from a hash index when one exists, otherwise by a full scan.
    pub fn find_eq(&self, collection: &str, field_path: &str, value: &Value) -> Vec<Document> {
        self.find_eq_refs(collection, field_path, value)
            .into_iter()
            .cloned()
            .collect()
    }

    fn find_eq_refs(&self, collection: &str, field_path: &str, value: &Value) -> Vec<&Document> {
        let Some(c) = self.coll(collection) else {
            return Vec::new();
        };
        match c.indexes.get(field_path) {
            Some(index) => index
                .entries
                .get(&value_key(value))
                .map(|positions| positions.iter().map(|&p| &c.docs[p]).collect())
                .unwrap_or_default(),
            None => c
                .docs
                .iter()
                .filter(|d| d.get_path(field_path).is_some_and(|v| super::values_equal(v, value)))
                .collect(),
        }
    }

    /// Runs an aggregation pipeline. A leading `$match` with an equality on an
    /// indexed field narrows the candidates through the index first.
    pub fn aggregate(&self, collection: &str, pipeline: &AggregationPipeline) -> Result<Vec<Document>, StoreError> {
        let Some(c) = self.loaded(collection)? else {
            return run_stages(Vec::new(), &pipeline.stages, 0);
        };
        let (start, rest) = match pipeline.stages.first() {
            Some(Stage::Match(filter)) => {
                let indexed = filter.clauses.iter().find_map(|(path, cond)| {
                    let lit = match cond {
                        Condition::Equals(v) => Some(v),
                        Condition::Ops(ops) => ops.iter().find_map(|op| match op {
                            FieldOp::Compare(CompareOp::Eq, v) => Some(v),
                            _ => None,
                        }),
                    }?;
                    c.indexes.contains_key(path).then(|| (path, lit))
                });
                let candidates = match indexed {
                    Some((path, lit)) => self.find_eq_refs(collection, path, lit),
                    None => c.docs.iter().collect(),
                };
                let matched = candidates
                    .into_iter()
                    .filter(|d| matches_filter(d, filter))
                    .cloned()
                    .collect();
                (matched, 1)
            }
            _ => (c.docs.clone(), 0),
        };
        run_stages(start, &pipeline.stages[rest..], rest)
    }
}
