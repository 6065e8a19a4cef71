//! The document cache and the public mutation API.
//!
//! Applications only ever hold a [`Handle`] (a document id plus a reference to
//! the engine). Every access resolves the id through the cache, which holds
//! one internal document per cached id. An internal document materializes
//! its property slices on demand: reading a property fetches the whole slice
//! it belongs to, in one backend round trip. Mutations commit into the cache
//! under the document's lock and are written back by [`Engine::flush`] or by
//! the background flusher.
//!
//! Lock order, outermost first: structure lock, flush lock, one document
//! lock, registry, subscription hub, then the small leaf maps (cache table,
//! pending and tombstone sets, membership index). Code never waits for a
//! document lock while holding the cache table; eviction only try-locks.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use parking_lot::{Mutex, RwLock};

use crate::coordination::{DocView, Hub, Interest};
use crate::error::{Error, Result};
use crate::model::{
    validate_name, Bag, DocumentId, DocumentKind, DocumentSnapshot, IdGenerator, PropertySource,
    Schema, Value,
};
use crate::query::{self, DocAccess, QueryExpr, QueryPlan, RepoView};
use crate::schema::SchemaRegistry;
use crate::store::{
    Backend, BackendCounters, BatchOp, ContentRef, DocMeta, FetchRequest, PropertyRow, SliceId,
    Store,
};

#[cfg(test)]
mod tests;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Soft limit: dirty or locked documents may push the cache above it.
    pub max_cached_docs: usize,
    pub flush_interval: Duration,
    /// Run the background writeback thread.
    pub background_flush: bool,
    /// Mint deterministic ids from this seed instead of random ones.
    pub seed: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_cached_docs: 1024,
            flush_interval: Duration::from_millis(500),
            background_flush: true,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    SetProperty(String, Bag),
    AddValues(String, Vec<Value>),
    /// Removes one occurrence per listed value; absent values are ignored.
    RemoveValues(String, Vec<Value>),
    RemoveProperty(String),
    AddMember(DocumentId),
    RemoveMember(DocumentId),
}

impl Mutation {
    pub fn property(&self) -> Option<&str> {
        match self {
            Mutation::SetProperty(p, _)
            | Mutation::AddValues(p, _)
            | Mutation::RemoveValues(p, _)
            | Mutation::RemoveProperty(p) => Some(p),
            Mutation::AddMember(_) | Mutation::RemoveMember(_) => None,
        }
    }

    fn apply_to(&self, current: &Bag) -> Bag {
        match self {
            Mutation::SetProperty(_, bag) => bag.clone(),
            Mutation::AddValues(_, vs) => {
                let mut b = current.clone();
                for v in vs {
                    b.insert(v.clone());
                }
                b
            }
            Mutation::RemoveValues(_, vs) => {
                let mut b = current.clone();
                for v in vs {
                    b.remove_one(v);
                }
                b
            }
            Mutation::RemoveProperty(_) => Bag::new(),
            Mutation::AddMember(_) | Mutation::RemoveMember(_) => current.clone(),
        }
    }
}

/// What a committed change touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangeSummary {
    pub created: bool,
    pub deleted: bool,
    pub properties: BTreeSet<String>,
    pub enforced: Vec<String>,
    pub unenforced: Vec<String>,
    /// The document's own member set changed (collections only).
    pub members: bool,
    /// The document joined or left a collection.
    pub membership: bool,
    pub content: bool,
}

/// Published after every in-memory commit; `seq` strictly increases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitEvent {
    pub doc: DocumentId,
    pub seq: u64,
    pub summary: ChangeSummary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub backend: BackendCounters,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub evictions: u64,
    /// Flushes that wrote a batch.
    pub flushes: u64,
    pub cached_docs: usize,
    pub dirty_docs: usize,
}

struct DocState {
    kind: DocumentKind,
    enforced: Vec<String>,
    assignments: BTreeMap<String, SliceId>,
    members: BTreeSet<DocumentId>,
    /// Non-empty bags of materialized properties only.
    props: BTreeMap<String, Bag>,
    loaded: BTreeSet<SliceId>,
    /// Every slice is materialized (documents created by this engine).
    complete: bool,
    dirty: BTreeSet<SliceId>,
    meta_dirty: bool,
    persisted: bool,
    version: u64,
}

impl DocState {
    fn fresh(kind: DocumentKind) -> Self {
        DocState {
            kind,
            enforced: Vec::new(),
            assignments: BTreeMap::new(),
            members: BTreeSet::new(),
            props: BTreeMap::new(),
            loaded: BTreeSet::new(),
            complete: true,
            dirty: BTreeSet::new(),
            meta_dirty: false,
            persisted: false,
            version: 0,
        }
    }

    fn is_dirty(&self) -> bool {
        self.meta_dirty || !self.dirty.is_empty() || !self.persisted
    }

    fn slice_loaded(&self, s: SliceId) -> bool {
        self.complete || self.loaded.contains(&s)
    }

    fn prop_loaded(&self, p: &str) -> bool {
        self.assignments.get(p).is_none_or(|s| self.slice_loaded(*s))
    }

    fn meta(&self) -> DocMeta {
        DocMeta {
            kind: self.kind,
            enforced: self.enforced.clone(),
            assignments: self.assignments.clone(),
            members: self.members.clone(),
        }
    }

    fn rows_of(&self, doc: DocumentId, slice: SliceId) -> Vec<PropertyRow> {
        self.props
            .iter()
            .filter(|(p, _)| self.assignments.get(*p) == Some(&slice))
            .flat_map(|(p, bag)| PropertyRow::for_bag(doc, slice, p, bag))
            .collect()
    }

    fn snapshot(&self, id: DocumentId) -> DocumentSnapshot {
        DocumentSnapshot {
            id,
            kind: self.kind,
            properties: self.props.clone(),
            enforced: self.enforced.clone(),
            members: self.members.clone(),
        }
    }

    fn merge(&mut self, rows: Vec<PropertyRow>, slices: BTreeSet<SliceId>) {
        for r in rows {
            if !self.loaded.contains(&r.slice) {
                self.props.entry(r.prop).or_default().insert(r.value);
            }
        }
        self.loaded.extend(slices);
    }
}

impl PropertySource for DocState {
    fn values_of(&self, name: &str) -> &Bag {
        self.props.get(name).unwrap_or(Bag::empty_ref())
    }
}

#[derive(Default)]
struct IDoc {
    /// `None` until the document's metadata has been fetched.
    state: Option<DocState>,
    evicted: bool,
    deleted: bool,
}

struct DocEntry {
    doc: Mutex<IDoc>,
    last_used: AtomicU64,
}

impl DocEntry {
    fn new(doc: IDoc, now: u64) -> Arc<Self> {
        Arc::new(DocEntry { doc: Mutex::new(doc), last_used: AtomicU64::new(now) })
    }
}

/// Properties that must be materialized before an operation runs.
#[derive(Default, Clone)]
struct Need {
    props: BTreeSet<String>,
    all: bool,
}

impl Need {
    fn meta() -> Self {
        Need::default()
    }

    fn all() -> Self {
        Need { all: true, ..Default::default() }
    }

    fn props(props: impl IntoIterator<Item = String>) -> Self {
        Need { props: props.into_iter().collect(), all: false }
    }

    fn with_interest(mut self, interest: Option<&Interest>) -> Self {
        if let Some(i) = interest {
            self.props.extend(i.props.iter().cloned());
        }
        self
    }
}

pub(crate) struct Shared {
    backend: Arc<dyn Backend>,
    config: EngineConfig,
    registry: RwLock<SchemaRegistry>,
    cache: Mutex<HashMap<DocumentId, Arc<DocEntry>>>,
    flush_lock: Mutex<()>,
    /// Held exclusively by delete; shared by membership changes.
    structure: RwLock<()>,
    ids: Mutex<IdGenerator>,
    tombstones: Mutex<HashSet<DocumentId>>,
    /// Created in the cache, not yet written to the backend.
    pending_new: Mutex<BTreeSet<DocumentId>>,
    /// member -> collections containing it
    containing: Mutex<HashMap<DocumentId, BTreeSet<DocumentId>>>,
    pub(crate) hub: Hub,
    clock: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    flushes: AtomicU64,
    crashed: AtomicBool,
    flusher: Mutex<Option<Sender<()>>>,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Read access for plan evaluation against one cached document.
struct StateAccess<'a> {
    id: DocumentId,
    st: &'a DocState,
    members: &'a HashMap<DocumentId, BTreeSet<DocumentId>>,
    tokens: Option<&'a BTreeSet<String>>,
}

impl DocAccess for StateAccess<'_> {
    fn values_of(&self, prop: &str) -> &Bag {
        self.st.values_of(prop)
    }

    fn has_schema(&self, name: &str) -> bool {
        self.st.enforced.iter().any(|s| s == name)
    }

    fn member_of(&self, collection: DocumentId) -> bool {
        self.members.get(&collection).is_some_and(|m| m.contains(&self.id))
    }

    fn content_contains(&self, token: &str) -> bool {
        self.tokens.is_some_and(|t| t.contains(token))
    }
}

impl Shared {
    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed)
    }

    fn entry(&self, id: DocumentId) -> Result<Arc<DocEntry>> {
        if self.tombstones.lock().contains(&id) {
            return Err(Error::UnknownDocument(id));
        }
        let now = self.tick();
        let mut table = self.cache.lock();
        let e = table.entry(id).or_insert_with(|| DocEntry::new(IDoc::default(), now)).clone();
        e.last_used.store(now, Ordering::Relaxed);
        Ok(e)
    }

    fn drop_entry(&self, id: DocumentId, e: &Arc<DocEntry>) {
        let mut table = self.cache.lock();
        if table.get(&id).is_some_and(|x| Arc::ptr_eq(x, e)) {
            table.remove(&id);
        }
    }

    fn fetch_slices(
        &self,
        id: DocumentId,
        st: &mut DocState,
        slices: BTreeSet<SliceId>,
    ) -> Result<()> {
        let f = self.backend.fetch(id, &FetchRequest::slices(slices))?;
        bump(&self.misses);
        st.merge(f.rows, f.slices);
        Ok(())
    }

    fn materialize(&self, id: DocumentId, doc: &mut IDoc, need: &Need) -> Result<()> {
        let Some(st) = doc.state.as_mut() else {
            let req = FetchRequest {
                slices: BTreeSet::new(),
                properties: need.props.clone(),
                all: need.all,
            };
            let f = self.backend.fetch(id, &req)?;
            bump(&self.misses);
            let mut st = DocState {
                kind: f.meta.kind,
                enforced: f.meta.enforced,
                assignments: f.meta.assignments,
                members: f.meta.members,
                complete: false,
                persisted: true,
                ..DocState::fresh(f.meta.kind)
            };
            st.merge(f.rows, f.slices);
            doc.state = Some(st);
            return Ok(());
        };
        let missing: BTreeSet<SliceId> = if st.complete {
            BTreeSet::new()
        } else if need.all {
            st.assignments.values().filter(|s| !st.loaded.contains(s)).copied().collect()
        } else {
            need.props
                .iter()
                .filter_map(|p| st.assignments.get(p))
                .filter(|s| !st.loaded.contains(s))
                .copied()
                .collect()
        };
        if missing.is_empty() {
            bump(&self.hits);
            return Ok(());
        }
        self.fetch_slices(id, st, missing)
    }

    /// Runs `f` on the document's state under its lock, after materializing
    /// what `need` asks for.
    fn with_doc<R>(
        &self,
        id: DocumentId,
        need: &Need,
        f: impl FnOnce(&mut DocState) -> Result<R>,
    ) -> Result<R> {
        loop {
            let e = self.entry(id)?;
            let mut g = e.doc.lock();
            if g.evicted {
                continue;
            }
            if g.deleted {
                return Err(Error::UnknownDocument(id));
            }
            if let Err(err) = self.materialize(id, &mut g, need) {
                if g.state.is_none() {
                    g.evicted = true;
                    drop(g);
                    self.drop_entry(id, &e);
                }
                return Err(err);
            }
            let r = f(g.state.as_mut().expect("materialized"));
            drop(g);
            self.evict_if_needed();
            return r;
        }
    }

    fn view(&self, id: DocumentId, st: &DocState, interest: &Interest) -> Result<DocView> {
        let props = interest
            .props
            .iter()
            .filter_map(|p| st.props.get(p).map(|b| (p.clone(), b.clone())))
            .collect();
        let tokens = if interest.content && st.kind == DocumentKind::Content {
            self.backend.content_ref(id)?.map(|c| c.tokens)
        } else {
            None
        };
        Ok(DocView {
            id,
            kind: st.kind,
            props,
            enforced: st.enforced.clone(),
            member_of: self.containing.lock().get(&id).cloned().unwrap_or_default(),
            tokens,
        })
    }

    fn views(
        &self,
        id: DocumentId,
        st: &DocState,
        interest: Option<&Interest>,
    ) -> Result<Option<DocView>> {
        interest.map(|i| self.view(id, st, i)).transpose()
    }

    fn exists(&self, id: DocumentId) -> Result<bool> {
        if self.tombstones.lock().contains(&id) {
            return Ok(false);
        }
        if self.pending_new.lock().contains(&id) {
            return Ok(true);
        }
        self.backend.contains(id)
    }

    fn create(&self, kind: DocumentKind) -> Result<DocumentId> {
        let id = self.ids.lock().mint();
        let interest = self.hub.interest();
        let e = DocEntry::new(
            IDoc { state: Some(DocState::fresh(kind)), ..Default::default() },
            self.tick(),
        );
        let g = e.doc.lock();
        self.pending_new.lock().insert(id);
        self.cache.lock().insert(id, e.clone());
        let after = self.views(id, g.state.as_ref().expect("fresh"), interest.as_ref())?;
        self.hub.publish(
            id,
            None,
            after.as_ref(),
            ChangeSummary { created: true, ..Default::default() },
        );
        drop(g);
        self.evict_if_needed();
        Ok(id)
    }

    fn mutate(&self, id: DocumentId, m: Mutation) -> Result<()> {
        match m {
            Mutation::AddMember(x) => self.change_membership(id, x, true),
            Mutation::RemoveMember(x) => self.change_membership(id, x, false),
            _ => self.change_property(id, m),
        }
    }

    fn change_property(&self, id: DocumentId, m: Mutation) -> Result<()> {
        let name = m.property().expect("property mutation").to_owned();
        validate_name(&name)?;
        let interest = self.hub.interest();
        let need = Need::props([name.clone()]).with_interest(interest.as_ref());
        self.with_doc(id, &need, |st| {
            let current = st.props.get(&name).cloned().unwrap_or_default();
            let next = m.apply_to(&current);
            if next == current {
                return Ok(());
            }
            let slice = {
                let registry = self.registry.read();
                let v = registry.check_property(&st.enforced, &name, !current.is_empty(), &next);
                if !v.is_empty() {
                    return Err(Error::SchemaViolation(v));
                }
                match st.assignments.get(&name) {
                    Some(s) => *s,
                    None => registry.assign_slice(&st.enforced, &name),
                }
            };
            let newly = !st.assignments.contains_key(&name);
            if newly && !st.slice_loaded(slice) {
                if st.assignments.values().any(|s| *s == slice) {
                    self.fetch_slices(id, st, BTreeSet::from([slice]))?;
                } else {
                    st.loaded.insert(slice);
                }
            }
            let before = self.views(id, st, interest.as_ref())?;
            if newly {
                st.assignments.insert(name.clone(), slice);
                st.meta_dirty = true;
            }
            if next.is_empty() {
                st.props.remove(&name);
            } else {
                st.props.insert(name.clone(), next);
            }
            st.dirty.insert(slice);
            st.version += 1;
            let after = self.views(id, st, interest.as_ref())?;
            let summary =
                ChangeSummary { properties: BTreeSet::from([name.clone()]), ..Default::default() };
            self.hub.publish(id, before.as_ref(), after.as_ref(), summary);
            Ok(())
        })
    }

    fn change_membership(&self, coll: DocumentId, member: DocumentId, add: bool) -> Result<()> {
        let guard = self.structure.read();
        if add && !self.exists(member)? {
            return Err(Error::UnknownDocument(member));
        }
        let interest = self.hub.interest();
        let need = Need::meta().with_interest(interest.as_ref());
        let changed = self.with_doc(coll, &need, |st| {
            if st.kind != DocumentKind::Collection {
                return Err(Error::WrongKind {
                    id: coll,
                    actual: st.kind,
                    expected: DocumentKind::Collection,
                });
            }
            let changed = if add { st.members.insert(member) } else { st.members.remove(&member) };
            if !changed {
                return Ok(false);
            }
            st.meta_dirty = true;
            st.version += 1;
            {
                let mut idx = self.containing.lock();
                let set = idx.entry(member).or_default();
                if add {
                    set.insert(coll);
                } else {
                    set.remove(&coll);
                    if set.is_empty() {
                        idx.remove(&member);
                    }
                }
            }
            let after = self.views(coll, st, interest.as_ref())?;
            let summary = ChangeSummary { members: true, ..Default::default() };
            self.hub.publish(coll, after.as_ref(), after.as_ref(), summary);
            Ok(true)
        })?;
        if !changed || interest.is_none() {
            return Ok(());
        }
        // The member's match status for membership queries changed too.
        let need = Need::meta().with_interest(interest.as_ref());
        let r = self.with_doc(member, &need, |st| {
            let after = self.view(member, st, interest.as_ref().expect("interest"))?;
            let mut before = after.clone();
            if add {
                before.member_of.remove(&coll);
            } else {
                before.member_of.insert(coll);
            }
            let summary = ChangeSummary { membership: true, ..Default::default() };
            self.hub.publish(member, Some(&before), Some(&after), summary);
            Ok(())
        });
        drop(guard);
        match r {
            Err(Error::UnknownDocument(_)) => Ok(()),
            r => r,
        }
    }

    fn enforce(&self, id: DocumentId, name: &str) -> Result<bool> {
        let props: Vec<String> =
            self.registry.read().require(name)?.properties().map(str::to_owned).collect();
        let interest = self.hub.interest();
        let need = Need::props(props).with_interest(interest.as_ref());
        self.with_doc(id, &need, |st| {
            if st.enforced.iter().any(|s| s == name) {
                return Ok(false);
            }
            let violations = self.registry.read().conforms(&*st, name)?;
            if !violations.is_empty() {
                return Err(Error::NotConforming(violations));
            }
            let before = self.views(id, st, interest.as_ref())?;
            st.enforced.push(name.to_owned());
            st.meta_dirty = true;
            st.version += 1;
            let after = self.views(id, st, interest.as_ref())?;
            let summary = ChangeSummary { enforced: vec![name.to_owned()], ..Default::default() };
            self.hub.publish(id, before.as_ref(), after.as_ref(), summary);
            Ok(true)
        })
    }

    fn unenforce(&self, id: DocumentId, name: &str) -> Result<bool> {
        let interest = self.hub.interest();
        let need = Need::meta().with_interest(interest.as_ref());
        self.with_doc(id, &need, |st| {
            if !st.enforced.iter().any(|s| s == name) {
                return Ok(false);
            }
            let before = self.views(id, st, interest.as_ref())?;
            st.enforced.retain(|s| s != name);
            st.meta_dirty = true;
            st.version += 1;
            let after = self.views(id, st, interest.as_ref())?;
            let summary = ChangeSummary { unenforced: vec![name.to_owned()], ..Default::default() };
            self.hub.publish(id, before.as_ref(), after.as_ref(), summary);
            Ok(true)
        })
    }

    fn write_content(&self, id: DocumentId, data: &mut dyn Read) -> Result<ContentRef> {
        let (kind, persisted) =
            self.with_doc(id, &Need::meta(), |st| Ok((st.kind, st.persisted)))?;
        if kind != DocumentKind::Content {
            return Err(Error::WrongKind { id, actual: kind, expected: DocumentKind::Content });
        }
        if !persisted {
            // The content store only accepts documents the backend knows.
            self.flush()?;
        }
        let interest = self.hub.interest();
        let need = Need::meta().with_interest(interest.as_ref());
        self.with_doc(id, &need, |st| {
            let before = self.views(id, st, interest.as_ref())?;
            let r = self.backend.content_write(id, data)?;
            let after = self.views(id, st, interest.as_ref())?;
            let summary = ChangeSummary { content: true, ..Default::default() };
            self.hub.publish(id, before.as_ref(), after.as_ref(), summary);
            Ok(r)
        })
    }

    fn read_content(&self, id: DocumentId) -> Result<Vec<u8>> {
        let (kind, persisted) =
            self.with_doc(id, &Need::meta(), |st| Ok((st.kind, st.persisted)))?;
        if kind != DocumentKind::Content {
            return Err(Error::WrongKind { id, actual: kind, expected: DocumentKind::Content });
        }
        if !persisted {
            return Ok(Vec::new());
        }
        self.backend.content_read(id)
    }

    fn delete(&self, id: DocumentId) -> Result<()> {
        let _structure = self.structure.write();
        let _flush = self.flush_lock.lock();
        let interest = self.hub.interest();
        let need = Need::meta().with_interest(interest.as_ref());
        let (before, was_member_of, members) = loop {
            let e = self.entry(id)?;
            let mut g = e.doc.lock();
            if g.evicted {
                continue;
            }
            if g.deleted {
                return Err(Error::UnknownDocument(id));
            }
            if let Err(err) = self.materialize(id, &mut g, &need) {
                if g.state.is_none() {
                    g.evicted = true;
                    drop(g);
                    self.drop_entry(id, &e);
                }
                return Err(err);
            }
            let st = g.state.as_ref().expect("materialized");
            let before = self.views(id, st, interest.as_ref())?;
            self.backend.apply(&[BatchOp::DeleteDocument(id)])?;
            let members = st.members.clone();
            g.deleted = true;
            g.state = None;
            drop(g);
            self.drop_entry(id, &e);
            self.tombstones.lock().insert(id);
            self.pending_new.lock().remove(&id);
            let mut idx = self.containing.lock();
            let was_member_of = idx.remove(&id).unwrap_or_default();
            for m in &members {
                if let Some(set) = idx.get_mut(m) {
                    set.remove(&id);
                    if set.is_empty() {
                        idx.remove(m);
                    }
                }
            }
            break (before, was_member_of, members);
        };
        let _ = members;
        // Cached collections must forget the member; the backend already has.
        for c in was_member_of {
            let Some(e) = self.cache.lock().get(&c).cloned() else { continue };
            let mut g = e.doc.lock();
            if let Some(st) = g.state.as_mut() {
                st.members.remove(&id);
            }
        }
        let summary = ChangeSummary { deleted: true, ..Default::default() };
        self.hub.publish(id, before.as_ref(), None, summary);
        Ok(())
    }

    fn flush(&self) -> Result<bool> {
        let _flush = self.flush_lock.lock();
        let mut meta_ops = Vec::new();
        let mut row_ops = Vec::new();
        let mut flushed: Vec<(Arc<DocEntry>, DocumentId, u64)> = Vec::new();
        let mut seen = HashSet::new();
        let mut queue: Vec<(DocumentId, Arc<DocEntry>)> =
            self.cache.lock().iter().map(|(id, e)| (*id, e.clone())).collect();
        while let Some((id, e)) = queue.pop() {
            if !seen.insert(id) {
                continue;
            }
            let g = e.doc.lock();
            if g.evicted || g.deleted {
                continue;
            }
            let Some(st) = g.state.as_ref() else { continue };
            if !st.is_dirty() {
                continue;
            }
            if st.meta_dirty || !st.persisted {
                meta_ops.push(BatchOp::ReplaceDocument { doc: id, meta: st.meta() });
                // Members created after the table was listed must be in this batch too.
                let pending = self.pending_new.lock().clone();
                for m in st.members.iter().filter(|m| pending.contains(m) && !seen.contains(*m)) {
                    if let Some(me) = self.cache.lock().get(m).cloned() {
                        queue.push((*m, me));
                    }
                }
            }
            for s in &st.dirty {
                row_ops.push(BatchOp::ReplaceSlice {
                    doc: id,
                    slice: *s,
                    rows: st.rows_of(id, *s),
                });
            }
            flushed.push((e.clone(), id, st.version));
        }
        if flushed.is_empty() {
            return Ok(false);
        }
        meta_ops.extend(row_ops);
        self.backend.apply(&meta_ops)?;
        bump(&self.flushes);
        let mut pending = self.pending_new.lock();
        for (e, id, version) in flushed {
            pending.remove(&id);
            let mut g = e.doc.lock();
            if let Some(st) = g.state.as_mut() {
                st.persisted = true;
                if st.version == version {
                    st.dirty.clear();
                    st.meta_dirty = false;
                }
            }
        }
        Ok(true)
    }

    fn evict_if_needed(&self) -> usize {
        let max = self.config.max_cached_docs;
        let mut table = self.cache.lock();
        if table.len() <= max {
            return 0;
        }
        let mut order: Vec<(u64, DocumentId)> =
            table.iter().map(|(id, e)| (e.last_used.load(Ordering::Relaxed), *id)).collect();
        order.sort_unstable();
        let mut n = 0;
        for (_, id) in order {
            if table.len() <= max {
                break;
            }
            let e = table[&id].clone();
            let Some(mut g) = e.doc.try_lock() else { continue };
            if g.state.as_ref().is_some_and(DocState::is_dirty) {
                continue;
            }
            g.evicted = true;
            drop(g);
            table.remove(&id);
            n += 1;
        }
        self.evictions.fetch_add(n as u64, Ordering::Relaxed);
        n
    }

    fn universe(&self) -> Result<BTreeSet<DocumentId>> {
        // Pending first: a document flushed in between then shows up in the scan.
        let mut ids: BTreeSet<DocumentId> = self.pending_new.lock().clone();
        ids.extend(self.backend.scan_all()?.into_iter().map(|(id, _)| id));
        let dead = self.tombstones.lock();
        ids.retain(|id| !dead.contains(id));
        Ok(ids)
    }

    fn execute(&self, plan: &QueryPlan) -> Result<Vec<DocumentId>> {
        let mut members = HashMap::new();
        for &c in plan.collections() {
            let r = self.with_doc(c, &Need::meta(), |st| {
                if st.kind == DocumentKind::Collection {
                    Ok(st.members.clone())
                } else {
                    Err(Error::UnknownCollection(c))
                }
            });
            match r {
                Ok(m) => {
                    members.insert(c, m);
                }
                Err(Error::UnknownDocument(_)) => return Err(Error::UnknownCollection(c)),
                Err(e) => return Err(e),
            }
        }
        let need = Need::props(plan.prefetch().properties.iter().cloned());
        let mut out = Vec::new();
        for id in self.universe()? {
            let r = self.with_doc(id, &need, |st| {
                let tokens = if plan.needs_content() && st.kind == DocumentKind::Content {
                    self.backend.content_ref(id)?.map(|c| c.tokens)
                } else {
                    None
                };
                let access = StateAccess { id, st, members: &members, tokens: tokens.as_ref() };
                Ok(plan.matches(&access))
            });
            match r {
                Ok(true) => out.push(id),
                Ok(false) | Err(Error::UnknownDocument(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn stats(&self) -> EngineStats {
        let entries: Vec<Arc<DocEntry>> = self.cache.lock().values().cloned().collect();
        let dirty = entries
            .iter()
            .filter(|e| e.doc.lock().state.as_ref().is_some_and(DocState::is_dirty))
            .count();
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        EngineStats {
            backend: self.backend.counters(),
            cache_hits: get(&self.hits),
            cache_misses: get(&self.misses),
            evictions: get(&self.evictions),
            flushes: get(&self.flushes),
            cached_docs: entries.len(),
            dirty_docs: dirty,
        }
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        if !self.crashed.load(Ordering::SeqCst) {
            if let Err(e) = self.flush() {
                log::error!("final flush failed: {e}");
            }
        }
    }
}

fn spawn_flusher(shared: &Arc<Shared>) -> Result<Sender<()>> {
    let (tx, rx) = bounded::<()>(0);
    let weak = Arc::downgrade(shared);
    let tick = (shared.config.flush_interval / 2).max(Duration::from_millis(1));
    thread::Builder::new().name("harland-flush".into()).spawn(move || {
        while let Err(RecvTimeoutError::Timeout) = rx.recv_timeout(tick) {
            let Some(s) = weak.upgrade() else { break };
            if s.crashed.load(Ordering::SeqCst) {
                break;
            }
            if let Err(e) = s.flush() {
                log::warn!("background flush failed, will retry: {e}");
            }
            s.evict_if_needed();
        }
    })?;
    Ok(tx)
}

/// An open repository. Cloning is cheap and shares the same cache.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<Shared>,
}

impl Engine {
    pub fn open(backend: Arc<dyn Backend>, config: EngineConfig) -> Result<Engine> {
        let mut registry = SchemaRegistry::new();
        for s in backend.schemas()? {
            registry.define_schema(s)?;
        }
        let mut ids = match config.seed {
            Some(seed) => IdGenerator::seeded(seed),
            None => IdGenerator::Random,
        };
        let existing: Vec<DocumentId> = backend.scan_all()?.into_iter().map(|(id, _)| id).collect();
        ids.skip_existing(&existing);
        let mut containing: HashMap<DocumentId, BTreeSet<DocumentId>> = HashMap::new();
        for (c, m) in backend.memberships()? {
            containing.entry(m).or_default().insert(c);
        }
        let background = config.background_flush;
        let shared = Arc::new(Shared {
            backend,
            config,
            registry: RwLock::new(registry),
            cache: Mutex::new(HashMap::new()),
            flush_lock: Mutex::new(()),
            structure: RwLock::new(()),
            ids: Mutex::new(ids),
            tombstones: Mutex::new(HashSet::new()),
            pending_new: Mutex::new(BTreeSet::new()),
            containing: Mutex::new(containing),
            hub: Hub::new(),
            clock: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            flushes: AtomicU64::new(0),
            crashed: AtomicBool::new(false),
            flusher: Mutex::new(None),
        });
        if background {
            *shared.flusher.lock() = Some(spawn_flusher(&shared)?);
        }
        Ok(Engine { shared })
    }

    pub fn in_memory(config: EngineConfig) -> Result<Engine> {
        Engine::open(Arc::new(Store::in_memory()), config)
    }

    /// Opens the directory store at `dir`.
    pub fn open_dir(dir: &Path, config: EngineConfig) -> Result<Engine> {
        Engine::open(Arc::new(Store::open(dir)?), config)
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.shared.backend
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.config
    }

    pub(crate) fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    fn handle(&self, id: DocumentId) -> Handle {
        Handle { id, shared: self.shared.clone() }
    }

    pub fn create_document(&self, kind: DocumentKind) -> Result<Handle> {
        let id = self.shared.create(kind)?;
        Ok(self.handle(id))
    }

    /// A handle to an existing document. Nothing is materialized.
    pub fn get_document(&self, id: DocumentId) -> Result<Handle> {
        let s = &self.shared;
        if s.tombstones.lock().contains(&id) {
            return Err(Error::UnknownDocument(id));
        }
        let known = s.cache.lock().contains_key(&id) || s.pending_new.lock().contains(&id);
        if !known && !s.backend.contains(id)? {
            return Err(Error::UnknownDocument(id));
        }
        Ok(self.handle(id))
    }

    pub fn delete_document(&self, id: DocumentId) -> Result<()> {
        self.shared.delete(id)
    }

    /// Registers a schema and persists its definition immediately.
    pub fn define_schema(&self, schema: Schema) -> Result<()> {
        validate_name(&schema.name)?;
        for p in schema.properties() {
            validate_name(p)?;
        }
        let mut registry = self.shared.registry.write();
        registry.check_definition(&schema)?;
        self.shared
            .backend
            .apply(&[BatchOp::PutMeta(crate::store::MetadataRecord::SchemaDef(schema.clone()))])?;
        registry.define_schema(schema)
    }

    pub fn schema(&self, name: &str) -> Option<Schema> {
        self.shared.registry.read().get(name).cloned()
    }

    /// All schemas in registration order.
    pub fn schemas(&self) -> Vec<Schema> {
        self.shared.registry.read().iter().cloned().collect()
    }

    pub fn conforms(&self, id: DocumentId, schema: &str) -> Result<Vec<crate::schema::Violation>> {
        let props: Vec<String> =
            self.shared.registry.read().require(schema)?.properties().map(str::to_owned).collect();
        self.shared.with_doc(id, &Need::props(props), |st| {
            self.shared.registry.read().conforms(&*st, schema)
        })
    }

    pub fn plan(&self, q: &QueryExpr) -> Result<QueryPlan> {
        query::plan(q, &self.shared.registry.read())
    }

    /// Evaluates the plan against the state committed at this point; the
    /// cursor then hands out handles as it is consumed.
    pub fn execute(&self, plan: &QueryPlan) -> Result<ResultCursor> {
        let ids = self.shared.execute(plan)?;
        Ok(ResultCursor { ids: ids.into_iter(), shared: self.shared.clone() })
    }

    pub fn query(&self, q: &QueryExpr) -> Result<ResultCursor> {
        self.execute(&self.plan(q)?)
    }

    pub fn query_ids(&self, q: &QueryExpr) -> Result<BTreeSet<DocumentId>> {
        Ok(self.shared.execute(&self.plan(q)?)?.into_iter().collect())
    }

    /// Every live document id.
    pub fn document_ids(&self) -> Result<BTreeSet<DocumentId>> {
        self.shared.universe()
    }

    pub fn document_count(&self) -> Result<usize> {
        Ok(self.shared.universe()?.len())
    }

    /// A fully materialized copy of the repository.
    pub fn repo_view(&self) -> Result<RepoView> {
        let mut view = RepoView {
            schemas: self.shared.registry.read().iter().map(|s| s.name.clone()).collect(),
            ..Default::default()
        };
        for id in self.shared.universe()? {
            let snap = match self.shared.with_doc(id, &Need::all(), |st| Ok(st.snapshot(id))) {
                Ok(s) => s,
                Err(Error::UnknownDocument(_)) => continue,
                Err(e) => return Err(e),
            };
            if snap.kind == DocumentKind::Content {
                if let Some(c) = self.shared.backend.content_ref(id)? {
                    view.content.insert(id, c.tokens);
                }
            }
            view.docs.insert(id, snap);
        }
        Ok(view)
    }

    /// Writes every dirty slice as one atomic batch. Returns whether anything
    /// was written.
    pub fn flush(&self) -> Result<bool> {
        self.shared.flush()
    }

    pub fn evict_if_needed(&self) -> usize {
        self.shared.evict_if_needed()
    }

    /// Flushes, then copies the committed state to `dir`.
    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        self.shared.flush()?;
        let _flush = self.shared.flush_lock.lock();
        self.shared.backend.checkpoint(dir)
    }

    pub fn stats(&self) -> EngineStats {
        self.shared.stats()
    }

    /// Stops writeback without flushing, as if the process died. Unflushed
    /// changes are lost once every clone and handle is dropped.
    pub fn simulate_crash(self) {
        self.shared.crashed.store(true, Ordering::SeqCst);
        self.shared.flusher.lock().take();
    }
}

/// Matching documents of one query, as handles.
pub struct ResultCursor {
    ids: std::vec::IntoIter<DocumentId>,
    shared: Arc<Shared>,
}

impl ResultCursor {
    pub fn remaining(&self) -> usize {
        self.ids.len()
    }
}

impl Iterator for ResultCursor {
    type Item = Handle;

    fn next(&mut self) -> Option<Handle> {
        let id = self.ids.next()?;
        Some(Handle { id, shared: self.shared.clone() })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.ids.size_hint()
    }
}

/// The application's reference to a document. Every call resolves through
/// the cache, so a handle survives eviction and never sees stale state.
#[derive(Clone)]
pub struct Handle {
    id: DocumentId,
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Handle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("Handle").field(&self.id).finish()
    }
}

impl Handle {
    pub fn id(&self) -> DocumentId {
        self.id
    }

    pub fn kind(&self) -> Result<DocumentKind> {
        self.shared.with_doc(self.id, &Need::meta(), |st| Ok(st.kind))
    }

    pub fn values_of(&self, prop: &str) -> Result<Bag> {
        self.shared
            .with_doc(self.id, &Need::props([prop.to_owned()]), |st| Ok(st.values_of(prop).clone()))
    }

    pub fn snapshot(&self) -> Result<DocumentSnapshot> {
        self.shared.with_doc(self.id, &Need::all(), |st| Ok(st.snapshot(self.id)))
    }

    pub fn enforced(&self) -> Result<Vec<String>> {
        self.shared.with_doc(self.id, &Need::meta(), |st| Ok(st.enforced.clone()))
    }

    pub fn members(&self) -> Result<BTreeSet<DocumentId>> {
        self.shared.with_doc(self.id, &Need::meta(), |st| Ok(st.members.clone()))
    }

    pub fn mutate(&self, m: Mutation) -> Result<()> {
        self.shared.mutate(self.id, m)
    }

    pub fn set(&self, prop: &str, values: impl IntoIterator<Item = Value>) -> Result<()> {
        self.mutate(Mutation::SetProperty(prop.to_owned(), values.into_iter().collect()))
    }

    pub fn add(&self, prop: &str, values: impl IntoIterator<Item = Value>) -> Result<()> {
        self.mutate(Mutation::AddValues(prop.to_owned(), values.into_iter().collect()))
    }

    /// Returns `false` when the schema was already enforced.
    pub fn enforce(&self, schema: &str) -> Result<bool> {
        self.shared.enforce(self.id, schema)
    }

    /// Returns `false` when the schema was not enforced.
    pub fn unenforce(&self, schema: &str) -> Result<bool> {
        self.shared.unenforce(self.id, schema)
    }

    pub fn write_content(&self, data: &mut dyn Read) -> Result<ContentRef> {
        self.shared.write_content(self.id, data)
    }

    pub fn read_content(&self) -> Result<Vec<u8>> {
        self.shared.read_content(self.id)
    }

    /// Slice assignment of every property the document has ever held.
    pub fn assignments(&self) -> Result<BTreeMap<String, SliceId>> {
        self.shared.with_doc(self.id, &Need::meta(), |st| Ok(st.assignments.clone()))
    }

    /// Properties currently materialized in the cache, without fetching.
    pub fn materialized_properties(&self) -> BTreeSet<String> {
        let Some(e) = self.shared.cache.lock().get(&self.id).cloned() else {
            return BTreeSet::new();
        };
        let g = e.doc.lock();
        match g.state.as_ref() {
            None => BTreeSet::new(),
            Some(st) => {
                let mut out: BTreeSet<String> =
                    st.props.keys().filter(|p| st.prop_loaded(p)).cloned().collect();
                // Assigned but empty properties of loaded slices are known too.
                out.extend(
                    st.assignments
                        .iter()
                        .filter(|(_, s)| st.slice_loaded(**s))
                        .map(|(p, _)| p.clone()),
                );
                out
            }
        }
    }
}
