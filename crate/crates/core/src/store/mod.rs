//! Vertical-row persistence.
//!
//! Every property value is one [`PropertyRow`] keyed by document, property,
//! value and a duplicate ordinal; rows also carry the [`SliceId`] the
//! organization manager assigned to the property, which is the unit that
//! [`Backend::fetch`] retrieves. Schema definitions, enforcement records,
//! slice assignments and memberships are kept apart from the rows as
//! metadata. Content bytes live in a separate LOB store.
//!
//! [`Store`] is the reference [`Backend`]. It keeps the committed state as a
//! [`StoreImage`] and either lives purely in memory or mirrors every committed
//! batch to a directory (`store.hl1` plus `content/<doc-id>`).

pub mod format;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::model::{Bag, DocumentId, DocumentKind, Schema, Value};
use crate::schema::SchemaRegistry;

pub const CHECKPOINT_FILE: &str = "store.hl1";
pub const CONTENT_DIR: &str = "content";

/// Per-document property group; slice 0 is the default slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SliceId(pub u32);

impl SliceId {
    pub const DEFAULT: SliceId = SliceId(0);
}

/// Identity of a property row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub doc: DocumentId,
    pub prop: String,
    pub value: Value,
    /// Distinguishes duplicate values of one property: 0, 1, ...
    pub dup: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyRow {
    pub doc: DocumentId,
    pub slice: SliceId,
    pub prop: String,
    pub value: Value,
    pub dup: u32,
}

impl PropertyRow {
    pub fn key(&self) -> RowKey {
        RowKey { doc: self.doc, prop: self.prop.clone(), value: self.value.clone(), dup: self.dup }
    }

    /// Rows for one property bag, numbering duplicates from zero.
    pub fn for_bag(doc: DocumentId, slice: SliceId, prop: &str, bag: &Bag) -> Vec<PropertyRow> {
        bag.counted()
            .into_iter()
            .flat_map(|(value, n)| {
                (0..n as u32).map(move |dup| PropertyRow {
                    doc,
                    slice,
                    prop: prop.to_owned(),
                    value: value.clone(),
                    dup,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetadataRecord {
    SchemaDef(Schema),
    Enforcement { doc: DocumentId, schema: String },
    SliceAssignment { doc: DocumentId, prop: String, slice: SliceId },
    DocumentRecord { doc: DocumentId, kind: DocumentKind },
    Membership { collection: DocumentId, member: DocumentId },
}

/// Everything the store knows about one document apart from its rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocMeta {
    pub kind: DocumentKind,
    pub enforced: Vec<String>,
    pub assignments: BTreeMap<String, SliceId>,
    pub members: BTreeSet<DocumentId>,
}

impl DocMeta {
    pub fn new(kind: DocumentKind) -> Self {
        DocMeta {
            kind,
            enforced: Vec::new(),
            assignments: BTreeMap::new(),
            members: BTreeSet::new(),
        }
    }
}

/// Descriptor of a document's content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentRef {
    pub doc: DocumentId,
    pub length: u64,
    pub tokens: BTreeSet<String>,
}

impl ContentRef {
    pub fn for_bytes(doc: DocumentId, bytes: &[u8]) -> Self {
        ContentRef { doc, length: bytes.len() as u64, tokens: tokenize(bytes) }
    }
}

/// Content index tokens: maximal runs of alphanumeric characters, lowercased.
/// Bytes that are not valid UTF-8 act as separators.
pub fn tokenize(bytes: &[u8]) -> BTreeSet<String> {
    String::from_utf8_lossy(bytes)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// One step of an atomic write batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchOp {
    PutRow(PropertyRow),
    DeleteRow(RowKey),
    PutMeta(MetadataRecord),
    DeleteMeta(MetadataRecord),
    /// Replace every row of one slice of a document.
    ReplaceSlice {
        doc: DocumentId,
        slice: SliceId,
        rows: Vec<PropertyRow>,
    },
    /// Insert or overwrite a document's metadata wholesale.
    ReplaceDocument {
        doc: DocumentId,
        meta: DocMeta,
    },
    /// Remove a document with its rows, metadata, memberships and content.
    DeleteDocument(DocumentId),
}

#[derive(Debug, Clone, Default)]
pub struct FetchRequest {
    pub slices: BTreeSet<SliceId>,
    /// Also serve the slices these properties are assigned to.
    pub properties: BTreeSet<String>,
    /// Serve every slice of the document.
    pub all: bool,
}

impl FetchRequest {
    pub fn slices(slices: impl IntoIterator<Item = SliceId>) -> Self {
        FetchRequest { slices: slices.into_iter().collect(), ..Default::default() }
    }

    pub fn properties<'a>(props: impl IntoIterator<Item = &'a str>) -> Self {
        FetchRequest {
            properties: props.into_iter().map(str::to_owned).collect(),
            ..Default::default()
        }
    }

    pub fn all() -> Self {
        FetchRequest { all: true, ..Default::default() }
    }
}

/// The result of one fetch round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub meta: DocMeta,
    /// Slices whose complete row set is included.
    pub slices: BTreeSet<SliceId>,
    pub rows: Vec<PropertyRow>,
}

/// The complete committed state of a store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreImage {
    /// In registration order.
    pub schemas: Vec<Schema>,
    pub docs: BTreeMap<DocumentId, DocMeta>,
    pub rows: BTreeMap<RowKey, SliceId>,
    pub content: BTreeMap<DocumentId, ContentRef>,
}

fn storage(msg: impl Into<String>) -> Error {
    Error::StorageFailure(msg.into())
}

impl StoreImage {
    pub fn rows(&self) -> impl Iterator<Item = PropertyRow> + '_ {
        self.rows.iter().map(|(k, s)| PropertyRow {
            doc: k.doc,
            slice: *s,
            prop: k.prop.clone(),
            value: k.value.clone(),
            dup: k.dup,
        })
    }

    fn doc_rows(&self, doc: DocumentId) -> impl Iterator<Item = (&RowKey, &SliceId)> + '_ {
        // No prop, value or ordinal sorts below these.
        let first = RowKey { doc, prop: String::new(), value: Value::Text(String::new()), dup: 0 };
        self.rows.range(first..).take_while(move |(k, _)| k.doc == doc)
    }

    /// Metadata in canonical order: schemas, then per document its record,
    /// enforcements, slice assignments and memberships.
    pub fn metadata_records(&self) -> Vec<MetadataRecord> {
        let mut out: Vec<MetadataRecord> =
            self.schemas.iter().cloned().map(MetadataRecord::SchemaDef).collect();
        for (&doc, m) in &self.docs {
            out.push(MetadataRecord::DocumentRecord { doc, kind: m.kind });
            out.extend(
                m.enforced.iter().map(|s| MetadataRecord::Enforcement { doc, schema: s.clone() }),
            );
            out.extend(m.assignments.iter().map(|(p, &slice)| MetadataRecord::SliceAssignment {
                doc,
                prop: p.clone(),
                slice,
            }));
            out.extend(
                m.members
                    .iter()
                    .map(|&member| MetadataRecord::Membership { collection: doc, member }),
            );
        }
        out
    }

    /// Reassembles a document's property bags from its rows.
    pub fn properties_of(&self, doc: DocumentId) -> BTreeMap<String, Bag> {
        let mut out: BTreeMap<String, Bag> = BTreeMap::new();
        for (k, _) in self.doc_rows(doc) {
            out.entry(k.prop.clone()).or_default().insert(k.value.clone());
        }
        out
    }

    fn doc_mut(&mut self, doc: DocumentId) -> Result<&mut DocMeta> {
        self.docs.get_mut(&doc).ok_or(Error::UnknownDocument(doc))
    }

    fn put_meta(&mut self, rec: &MetadataRecord) -> Result<()> {
        match rec {
            MetadataRecord::SchemaDef(s) => {
                if self.schemas.iter().any(|e| e.name == s.name) {
                    return Err(Error::DuplicateName(s.name.clone()));
                }
                self.schemas.push(s.clone());
            }
            MetadataRecord::DocumentRecord { doc, kind } => match self.docs.get(doc) {
                Some(m) if m.kind != *kind => {
                    return Err(storage(format!("document {doc} cannot change kind")))
                }
                Some(_) => {}
                None => {
                    self.docs.insert(*doc, DocMeta::new(*kind));
                }
            },
            MetadataRecord::Enforcement { doc, schema } => {
                let m = self.doc_mut(*doc)?;
                if !m.enforced.contains(schema) {
                    m.enforced.push(schema.clone());
                }
            }
            MetadataRecord::SliceAssignment { doc, prop, slice } => {
                let m = self.doc_mut(*doc)?;
                match m.assignments.get(prop) {
                    Some(s) if s != slice => {
                        return Err(storage(format!(
                            "slice assignment of {prop:?} on {doc} is immutable"
                        )))
                    }
                    _ => {
                        m.assignments.insert(prop.clone(), *slice);
                    }
                }
            }
            MetadataRecord::Membership { collection, member } => {
                self.doc_mut(*collection)?.members.insert(*member);
            }
        }
        Ok(())
    }

    fn delete_meta(&mut self, rec: &MetadataRecord) -> Result<()> {
        match rec {
            MetadataRecord::SchemaDef(s) => {
                return Err(storage(format!("schema {:?} cannot be deleted", s.name)))
            }
            MetadataRecord::SliceAssignment { doc, prop, .. } => {
                return Err(storage(format!("slice assignment of {prop:?} on {doc} is immutable")))
            }
            MetadataRecord::DocumentRecord { doc, .. } => self.delete_document(*doc),
            MetadataRecord::Enforcement { doc, schema } => {
                if let Some(m) = self.docs.get_mut(doc) {
                    m.enforced.retain(|s| s != schema);
                }
            }
            MetadataRecord::Membership { collection, member } => {
                if let Some(m) = self.docs.get_mut(collection) {
                    m.members.remove(member);
                }
            }
        }
        Ok(())
    }

    fn delete_document(&mut self, doc: DocumentId) {
        self.docs.remove(&doc);
        let keys: Vec<RowKey> = self.doc_rows(doc).map(|(k, _)| k.clone()).collect();
        for k in keys {
            self.rows.remove(&k);
        }
        for m in self.docs.values_mut() {
            m.members.remove(&doc);
        }
        self.content.remove(&doc);
    }

    pub fn apply(&mut self, op: &BatchOp) -> Result<()> {
        match op {
            BatchOp::PutRow(row) => {
                self.rows.insert(row.key(), row.slice);
            }
            BatchOp::DeleteRow(key) => {
                self.rows.remove(key);
            }
            BatchOp::PutMeta(rec) => self.put_meta(rec)?,
            BatchOp::DeleteMeta(rec) => self.delete_meta(rec)?,
            BatchOp::ReplaceSlice { doc, slice, rows } => {
                let stale: Vec<RowKey> = self
                    .doc_rows(*doc)
                    .filter(|(_, s)| *s == slice)
                    .map(|(k, _)| k.clone())
                    .collect();
                for k in stale {
                    self.rows.remove(&k);
                }
                for row in rows {
                    if row.doc != *doc || row.slice != *slice {
                        return Err(storage("row does not belong to the replaced slice"));
                    }
                    self.rows.insert(row.key(), row.slice);
                }
            }
            BatchOp::ReplaceDocument { doc, meta } => {
                if let Some(old) = self.docs.get(doc) {
                    if old.kind != meta.kind {
                        return Err(storage(format!("document {doc} cannot change kind")));
                    }
                    for (p, s) in &old.assignments {
                        if meta.assignments.get(p) != Some(s) {
                            return Err(storage(format!(
                                "slice assignment of {p:?} on {doc} is immutable"
                            )));
                        }
                    }
                }
                self.docs.insert(*doc, meta.clone());
            }
            BatchOp::DeleteDocument(doc) => self.delete_document(*doc),
        }
        Ok(())
    }

    /// Checks every cross-record invariant of the image.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Error::CorruptStore(m);
        let mut registry = SchemaRegistry::new();
        for s in &self.schemas {
            registry
                .define_schema(s.clone())
                .map_err(|e| corrupt(format!("schema {:?}: {e}", s.name)))?;
        }
        for (doc, m) in &self.docs {
            for (i, s) in m.enforced.iter().enumerate() {
                if !registry.contains(s) {
                    return Err(corrupt(format!("{doc} enforces unknown schema {s:?}")));
                }
                if m.enforced[..i].contains(s) {
                    return Err(corrupt(format!("{doc} enforces {s:?} twice")));
                }
            }
            if !m.members.is_empty() && m.kind != DocumentKind::Collection {
                return Err(corrupt(format!("{doc} has members but is not a collection")));
            }
            if let Some(missing) = m.members.iter().find(|id| !self.docs.contains_key(id)) {
                return Err(corrupt(format!("{doc} has missing member {missing}")));
            }
        }
        let mut prev: Option<&RowKey> = None;
        for (k, slice) in &self.rows {
            let m = self
                .docs
                .get(&k.doc)
                .ok_or_else(|| corrupt(format!("row for unknown document {}", k.doc)))?;
            if m.assignments.get(&k.prop) != Some(slice) {
                return Err(corrupt(format!(
                    "row {:?} on {} is not in its assigned slice",
                    k.prop, k.doc
                )));
            }
            let same_value =
                prev.is_some_and(|p| p.doc == k.doc && p.prop == k.prop && p.value == k.value);
            let expected_dup = if same_value { prev.unwrap().dup + 1 } else { 0 };
            if k.dup != expected_dup {
                return Err(corrupt(format!(
                    "duplicate ordinals of {:?} on {} have gaps",
                    k.prop, k.doc
                )));
            }
            prev = Some(k);
        }
        for (doc, c) in &self.content {
            if c.doc != *doc {
                return Err(corrupt("content record keyed under the wrong document".into()));
            }
            match self.docs.get(doc) {
                Some(m) if m.kind == DocumentKind::Content => {}
                _ => return Err(corrupt(format!("content for non-content document {doc}"))),
            }
        }
        Ok(())
    }

    fn fetch(&self, doc: DocumentId, req: &FetchRequest) -> Result<Fetched> {
        let meta = self.docs.get(&doc).ok_or(Error::UnknownDocument(doc))?.clone();
        let mut slices = req.slices.clone();
        slices.extend(req.properties.iter().filter_map(|p| meta.assignments.get(p)));
        if req.all {
            slices.extend(meta.assignments.values());
        }
        let rows = self
            .doc_rows(doc)
            .filter(|(_, s)| slices.contains(s))
            .map(|(k, s)| PropertyRow {
                doc,
                slice: *s,
                prop: k.prop.clone(),
                value: k.value.clone(),
                dup: k.dup,
            })
            .collect();
        Ok(Fetched { meta, slices, rows })
    }
}

/// Instrumentation counters of a backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackendCounters {
    /// Slice fetch round trips.
    pub fetches: u64,
    /// Existence probes.
    pub probes: u64,
    /// Committed write batches.
    pub batches: u64,
    pub scans: u64,
    pub content_writes: u64,
    pub content_reads: u64,
}

/// A persistence backend. Backends store and retrieve; they never evaluate
/// query predicates.
pub trait Backend: Send + Sync {
    /// Applies `ops` atomically: either all of them become visible (and
    /// durable, for persistent backends) or none do.
    fn apply(&self, ops: &[BatchOp]) -> Result<()>;
    /// One round trip returning the requested slices plus all metadata.
    fn fetch(&self, doc: DocumentId, req: &FetchRequest) -> Result<Fetched>;
    fn contains(&self, doc: DocumentId) -> Result<bool>;
    fn scan_all(&self) -> Result<Vec<(DocumentId, DocumentKind)>>;
    fn schemas(&self) -> Result<Vec<Schema>>;
    /// Every (collection, member) pair.
    fn memberships(&self) -> Result<Vec<(DocumentId, DocumentId)>>;
    fn content_write(&self, doc: DocumentId, data: &mut dyn Read) -> Result<ContentRef>;
    fn content_read(&self, doc: DocumentId) -> Result<Vec<u8>>;
    fn content_ref(&self, doc: DocumentId) -> Result<Option<ContentRef>>;
    /// Writes a complete copy of the committed state into `dir`.
    fn checkpoint(&self, dir: &Path) -> Result<()>;
    fn counters(&self) -> BackendCounters;
}

#[derive(Default)]
struct Counters {
    fetches: AtomicU64,
    probes: AtomicU64,
    batches: AtomicU64,
    scans: AtomicU64,
    content_writes: AtomicU64,
    content_reads: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

enum Lobs {
    Memory(RwLock<BTreeMap<DocumentId, Vec<u8>>>),
    Dir(PathBuf),
}

/// Reference backend: an in-memory image, optionally mirrored to a directory.
pub struct Store {
    image: RwLock<StoreImage>,
    lobs: Lobs,
    root: Option<PathBuf>,
    writer: Mutex<()>,
    counters: Counters,
    fail_next_commit: AtomicBool,
}

fn write_atomic(path: &Path, bytes: &[u8], fail_midway: bool) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    if fail_midway {
        f.write_all(&bytes[..bytes.len() / 2])?;
        return Err(storage("injected failure before commit"));
    }
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // Directory fsync is best effort; not every platform allows opening one.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

fn content_path(root: &Path, doc: DocumentId) -> PathBuf {
    root.join(CONTENT_DIR).join(doc.to_string())
}

/// Reads a checkpoint directory into an image plus LOB bytes. Content files
/// are authoritative for their document's content descriptor.
fn load_dir(dir: &Path) -> Result<(StoreImage, BTreeMap<DocumentId, Vec<u8>>)> {
    let bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
    let mut image = format::decode(&bytes)?;
    let mut lobs = BTreeMap::new();
    for (doc, c) in image.content.iter_mut() {
        let data = fs::read(content_path(dir, *doc))
            .map_err(|e| Error::CorruptStore(format!("content of {doc} unreadable: {e}")))?;
        *c = ContentRef::for_bytes(*doc, &data);
        lobs.insert(*doc, data);
    }
    Ok((image, lobs))
}

fn write_dir(dir: &Path, image: &StoreImage, lobs: &BTreeMap<DocumentId, Vec<u8>>) -> Result<()> {
    fs::create_dir_all(dir.join(CONTENT_DIR))?;
    for (doc, data) in lobs {
        write_atomic(&content_path(dir, *doc), data, false)?;
    }
    write_atomic(&dir.join(CHECKPOINT_FILE), &format::encode(image), false)
}

impl Store {
    fn with(image: StoreImage, lobs: Lobs, root: Option<PathBuf>) -> Self {
        Store {
            image: RwLock::new(image),
            lobs,
            root,
            writer: Mutex::new(()),
            counters: Counters::default(),
            fail_next_commit: AtomicBool::new(false),
        }
    }

    pub fn in_memory() -> Self {
        Store::with(StoreImage::default(), Lobs::Memory(RwLock::default()), None)
    }

    /// Creates an empty directory-backed store. Fails if one already exists.
    pub fn create(dir: &Path) -> Result<Self> {
        if dir.join(CHECKPOINT_FILE).exists() {
            return Err(storage(format!("a store already exists at {}", dir.display())));
        }
        fs::create_dir_all(dir.join(CONTENT_DIR))?;
        write_atomic(&dir.join(CHECKPOINT_FILE), &format::encode(&StoreImage::default()), false)?;
        Ok(Store::with(StoreImage::default(), Lobs::Dir(dir.to_owned()), Some(dir.to_owned())))
    }

    /// Opens a directory-backed store; every committed batch is written back.
    pub fn open(dir: &Path) -> Result<Self> {
        let (image, _) = load_dir(dir)?;
        fs::create_dir_all(dir.join(CONTENT_DIR))?;
        Ok(Store::with(image, Lobs::Dir(dir.to_owned()), Some(dir.to_owned())))
    }

    /// Loads a checkpoint directory into a memory-only store.
    pub fn open_in_memory(dir: &Path) -> Result<Self> {
        let (image, lobs) = load_dir(dir)?;
        Ok(Store::with(image, Lobs::Memory(RwLock::new(lobs)), None))
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// A copy of the committed state.
    pub fn image(&self) -> StoreImage {
        self.image.read().clone()
    }

    /// Makes the next commit fail after partially writing its temp file.
    pub fn fail_next_commit(&self) {
        self.fail_next_commit.store(true, Ordering::SeqCst);
    }

    /// Convenience form of [`Backend::apply`]: metadata, then deletes, then rows.
    pub fn put_rows(
        &self,
        rows: Vec<PropertyRow>,
        deletes: Vec<RowKey>,
        meta: Vec<MetadataRecord>,
    ) -> Result<()> {
        let ops: Vec<BatchOp> = meta
            .into_iter()
            .map(BatchOp::PutMeta)
            .chain(deletes.into_iter().map(BatchOp::DeleteRow))
            .chain(rows.into_iter().map(BatchOp::PutRow))
            .collect();
        self.apply(&ops)
    }

    pub fn fetch_slices(
        &self,
        doc: DocumentId,
        slices: impl IntoIterator<Item = SliceId>,
    ) -> Result<Fetched> {
        self.fetch(doc, &FetchRequest::slices(slices))
    }

    fn commit(&self, next: StoreImage) -> Result<()> {
        if let Some(root) = &self.root {
            let fail = self.fail_next_commit.swap(false, Ordering::SeqCst);
            write_atomic(&root.join(CHECKPOINT_FILE), &format::encode(&next), fail)?;
        } else if self.fail_next_commit.swap(false, Ordering::SeqCst) {
            return Err(storage("injected failure before commit"));
        }
        *self.image.write() = next;
        bump(&self.counters.batches);
        Ok(())
    }

    fn lob_bytes(&self, doc: DocumentId) -> Result<Vec<u8>> {
        match &self.lobs {
            Lobs::Memory(m) => Ok(m.read().get(&doc).cloned().unwrap_or_default()),
            Lobs::Dir(root) => {
                if !self.image.read().content.contains_key(&doc) {
                    return Ok(Vec::new());
                }
                match fs::read(content_path(root, doc)) {
                    Ok(b) => Ok(b),
                    Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
                    Err(e) => Err(e.into()),
                }
            }
        }
    }

    fn content_doc(&self, doc: DocumentId) -> Result<()> {
        match self.image.read().docs.get(&doc) {
            None => Err(Error::UnknownDocument(doc)),
            Some(m) if m.kind != DocumentKind::Content => {
                Err(Error::WrongKind { id: doc, actual: m.kind, expected: DocumentKind::Content })
            }
            Some(_) => Ok(()),
        }
    }
}

impl Backend for Store {
    fn apply(&self, ops: &[BatchOp]) -> Result<()> {
        if ops.is_empty() {
            return Ok(());
        }
        let _w = self.writer.lock();
        let mut next = self.image.read().clone();
        let mut deleted = Vec::new();
        for op in ops {
            next.apply(op)?;
            if let BatchOp::DeleteDocument(d) = op {
                deleted.push(*d);
            }
        }
        next.validate().map_err(|e| storage(format!("batch rejected: {e}")))?;
        self.commit(next)?;
        for doc in deleted {
            match &self.lobs {
                Lobs::Memory(m) => {
                    m.write().remove(&doc);
                }
                Lobs::Dir(root) => {
                    let _ = fs::remove_file(content_path(root, doc));
                }
            }
        }
        Ok(())
    }

    fn fetch(&self, doc: DocumentId, req: &FetchRequest) -> Result<Fetched> {
        bump(&self.counters.fetches);
        self.image.read().fetch(doc, req)
    }

    fn contains(&self, doc: DocumentId) -> Result<bool> {
        bump(&self.counters.probes);
        Ok(self.image.read().docs.contains_key(&doc))
    }

    fn scan_all(&self) -> Result<Vec<(DocumentId, DocumentKind)>> {
        bump(&self.counters.scans);
        Ok(self.image.read().docs.iter().map(|(d, m)| (*d, m.kind)).collect())
    }

    fn schemas(&self) -> Result<Vec<Schema>> {
        Ok(self.image.read().schemas.clone())
    }

    fn memberships(&self) -> Result<Vec<(DocumentId, DocumentId)>> {
        Ok(self
            .image
            .read()
            .docs
            .iter()
            .flat_map(|(c, m)| m.members.iter().map(move |d| (*c, *d)))
            .collect())
    }

    fn content_write(&self, doc: DocumentId, data: &mut dyn Read) -> Result<ContentRef> {
        let mut bytes = Vec::new();
        data.read_to_end(&mut bytes)?;
        let _w = self.writer.lock();
        self.content_doc(doc)?;
        let cref = ContentRef::for_bytes(doc, &bytes);
        let mut next = self.image.read().clone();
        next.content.insert(doc, cref.clone());
        match &self.lobs {
            Lobs::Memory(m) => {
                self.commit(next)?;
                m.write().insert(doc, bytes);
            }
            Lobs::Dir(root) => {
                write_atomic(&content_path(root, doc), &bytes, false)?;
                self.commit(next)?;
            }
        }
        bump(&self.counters.content_writes);
        Ok(cref)
    }

    fn content_read(&self, doc: DocumentId) -> Result<Vec<u8>> {
        self.content_doc(doc)?;
        bump(&self.counters.content_reads);
        self.lob_bytes(doc)
    }

    fn content_ref(&self, doc: DocumentId) -> Result<Option<ContentRef>> {
        Ok(self.image.read().content.get(&doc).cloned())
    }

    fn checkpoint(&self, dir: &Path) -> Result<()> {
        let _w = self.writer.lock();
        let image = self.image.read().clone();
        let mut lobs = BTreeMap::new();
        for doc in image.content.keys() {
            lobs.insert(*doc, self.lob_bytes(*doc)?);
        }
        write_dir(dir, &image, &lobs)
    }

    fn counters(&self) -> BackendCounters {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        BackendCounters {
            fetches: get(&c.fetches),
            probes: get(&c.probes),
            batches: get(&c.batches),
            scans: get(&c.scans),
            content_writes: get(&c.content_writes),
            content_reads: get(&c.content_reads),
        }
    }
}
