//! Change subscriptions and work-queue workers.
//!
//! Every commit in the engine is published to the [`Hub`] together with
//! before/after views of the one document it changed. A [`Subscription`] in
//! [`Mode::Transition`] receives the document whenever a commit makes its
//! query go from false to true. Since queries cannot join, a single
//! document's views are enough to decide that; membership changes are
//! published for the member as well as the collection.
//!
//! Workers built with [`run_worker`] take deliveries, run an action on the
//! document and move on. They never remove documents: a worker passes work
//! on by changing properties or enforcing a schema that another worker's
//! query is waiting for.

pub mod pipeline;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use crate::engine::{ChangeSummary, CommitEvent, Engine, Handle};
use crate::error::{Error, Result};
use crate::model::{Bag, DocumentId, DocumentKind};
use crate::query::{DocAccess, Predicate, QueryExpr, QueryPlan};

/// The parts of one document a subscription query can look at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocView {
    pub id: DocumentId,
    pub kind: DocumentKind,
    /// Only the properties some subscription reads.
    pub props: BTreeMap<String, Bag>,
    pub enforced: Vec<String>,
    /// Collections the document belongs to.
    pub member_of: BTreeSet<DocumentId>,
    pub tokens: Option<BTreeSet<String>>,
}

impl DocAccess for DocView {
    fn values_of(&self, prop: &str) -> &Bag {
        self.props.get(prop).unwrap_or(Bag::empty_ref())
    }

    fn has_schema(&self, name: &str) -> bool {
        self.enforced.iter().any(|s| s == name)
    }

    fn member_of(&self, collection: DocumentId) -> bool {
        self.member_of.contains(&collection)
    }

    fn content_contains(&self, token: &str) -> bool {
        self.tokens.as_ref().is_some_and(|t| t.contains(token))
    }
}

/// What the engine must include in published views.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Interest {
    pub props: BTreeSet<String>,
    pub content: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Deliver a document each time a commit makes the query start matching.
    Transition,
    /// No deliveries; [`Subscription::poll`] returns the current matches.
    Match,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Delivery {
    pub doc: DocumentId,
    /// Sequence number of the commit that caused the delivery.
    pub seq: u64,
}

struct SubEntry {
    id: u64,
    plan: QueryPlan,
    props: BTreeSet<String>,
    content: bool,
    tx: Sender<Delivery>,
}

#[derive(Default)]
struct HubInner {
    seq: u64,
    next_id: u64,
    subs: Vec<SubEntry>,
    listeners: Vec<Sender<CommitEvent>>,
    interest: Option<Interest>,
}

impl HubInner {
    fn recompute(&mut self) {
        if self.subs.is_empty() && self.listeners.is_empty() {
            self.interest = None;
            return;
        }
        let mut i = Interest::default();
        for s in &self.subs {
            i.props.extend(s.props.iter().cloned());
            i.content |= s.content;
        }
        self.interest = Some(i);
    }
}

/// Commit fan-out. Publishing is serialized, so deliveries leave in commit
/// order.
#[derive(Default)]
pub struct Hub {
    inner: Mutex<HubInner>,
}

impl Hub {
    pub fn new() -> Self {
        Hub::default()
    }

    /// `None` when nobody is listening; the engine then skips building views.
    pub fn interest(&self) -> Option<Interest> {
        self.inner.lock().interest.clone()
    }

    /// Assigns the next sequence number and notifies listeners. Called by
    /// the engine under the changed document's lock.
    pub fn publish(
        &self,
        doc: DocumentId,
        before: Option<&DocView>,
        after: Option<&DocView>,
        summary: ChangeSummary,
    ) -> u64 {
        let mut inner = self.inner.lock();
        inner.seq += 1;
        let seq = inner.seq;
        let mut dropped = false;
        for s in &inner.subs {
            let was = before.is_some_and(|v| s.plan.matches(v));
            let is = after.is_some_and(|v| s.plan.matches(v));
            if !was && is {
                dropped |= s.tx.send(Delivery { doc, seq }).is_err();
            }
        }
        let event = CommitEvent { doc, seq, summary };
        let before_len = inner.listeners.len();
        inner.listeners.retain(|l| l.send(event.clone()).is_ok());
        if dropped || inner.listeners.len() != before_len {
            inner.recompute();
        }
        seq
    }

    fn add(
        &self,
        plan: QueryPlan,
        props: BTreeSet<String>,
        content: bool,
    ) -> (u64, Receiver<Delivery>) {
        let (tx, rx) = unbounded();
        let mut inner = self.inner.lock();
        inner.next_id += 1;
        let id = inner.next_id;
        inner.subs.push(SubEntry { id, plan, props, content, tx });
        inner.recompute();
        (id, rx)
    }

    fn remove(&self, id: u64) {
        let mut inner = self.inner.lock();
        inner.subs.retain(|s| s.id != id);
        inner.recompute();
    }

    fn listen(&self) -> Receiver<CommitEvent> {
        let (tx, rx) = unbounded();
        let mut inner = self.inner.lock();
        inner.listeners.push(tx);
        inner.recompute();
        rx
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().seq
    }
}

/// A standing query. Dropping it cancels delivery.
pub struct Subscription {
    engine: Engine,
    query: QueryExpr,
    mode: Mode,
    hub_id: Option<u64>,
    rx: Receiver<Delivery>,
}

impl Subscription {
    pub fn query(&self) -> &QueryExpr {
        &self.query
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        self.rx.recv_timeout(timeout).ok()
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.rx.try_recv().ok()
    }

    /// Every delivery queued right now.
    pub fn drain(&self) -> Vec<Delivery> {
        self.rx.try_iter().collect()
    }

    /// Documents matching the query now.
    pub fn poll(&self) -> Result<BTreeSet<DocumentId>> {
        self.engine.query_ids(&self.query)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(id) = self.hub_id {
            self.engine.shared().hub.remove(id);
        }
    }
}

impl Engine {
    pub fn subscribe(&self, query: QueryExpr, mode: Mode) -> Result<Subscription> {
        let plan = self.plan(&query)?;
        let (hub_id, rx) = match mode {
            Mode::Transition => {
                let mut props = BTreeSet::new();
                let mut content = false;
                for p in query.predicates() {
                    if let Some(name) = p.property() {
                        props.insert(name.to_owned());
                    }
                    content |= matches!(p, Predicate::ContentContains(_));
                }
                let (id, rx) = self.shared().hub.add(plan, props, content);
                (Some(id), rx)
            }
            Mode::Match => (None, unbounded().1),
        };
        Ok(Subscription { engine: self.clone(), query, mode, hub_id, rx })
    }

    /// Every commit event from now on.
    pub fn commits(&self) -> Receiver<CommitEvent> {
        self.shared().hub.listen()
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub name: String,
    /// Attempts per delivery before it is dead-lettered.
    pub max_attempts: u32,
    pub poll_interval: Duration,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        WorkerConfig {
            name: "worker".into(),
            max_attempts: 3,
            poll_interval: Duration::from_millis(20),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WorkerReport {
    pub processed: u64,
    pub failures: u64,
    pub dead_lettered: Vec<DocumentId>,
}

/// Control for a running worker thread.
pub struct Worker {
    stop: Arc<AtomicBool>,
    processed: Arc<AtomicU64>,
    dead: Receiver<Delivery>,
    thread: Option<JoinHandle<WorkerReport>>,
}

impl Worker {
    pub fn processed(&self) -> u64 {
        self.processed.load(Ordering::SeqCst)
    }

    /// Deliveries that failed every attempt.
    pub fn dead_letters(&self) -> &Receiver<Delivery> {
        &self.dead
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn join(mut self) -> WorkerReport {
        self.stop();
        self.thread.take().expect("joined once").join().unwrap_or_default()
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Runs `action` on every delivery of `sub` in a new thread until stopped.
/// A failing action is retried up to `max_attempts` times in total; then the
/// delivery goes to the dead-letter queue.
pub fn run_worker<F>(sub: Subscription, config: WorkerConfig, mut action: F) -> Result<Worker>
where
    F: FnMut(&Engine, &Handle) -> Result<()> + Send + 'static,
{
    let stop = Arc::new(AtomicBool::new(false));
    let processed = Arc::new(AtomicU64::new(0));
    let (dead_tx, dead) = unbounded();
    let thread = {
        let stop = stop.clone();
        let processed = processed.clone();
        thread::Builder::new().name(config.name.clone()).spawn(move || {
            let mut report = WorkerReport::default();
            while !stop.load(Ordering::SeqCst) {
                let d = match sub.rx.recv_timeout(config.poll_interval) {
                    Ok(d) => d,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                };
                let handle = match sub.engine.get_document(d.doc) {
                    Ok(h) => h,
                    Err(Error::UnknownDocument(_)) => continue,
                    Err(e) => {
                        log::warn!("{}: cannot resolve {}: {e}", config.name, d.doc);
                        continue;
                    }
                };
                let mut attempt = 0;
                loop {
                    attempt += 1;
                    match action(&sub.engine, &handle) {
                        Ok(()) => {
                            report.processed += 1;
                            processed.fetch_add(1, Ordering::SeqCst);
                            break;
                        }
                        Err(e) => {
                            report.failures += 1;
                            log::warn!(
                                "{}: attempt {attempt} on {} failed: {e}",
                                config.name,
                                d.doc
                            );
                            if attempt >= config.max_attempts {
                                report.dead_lettered.push(d.doc);
                                let _ = dead_tx.send(d);
                                break;
                            }
                        }
                    }
                }
            }
            report
        })?
    };
    Ok(Worker { stop, processed, dead, thread: Some(thread) })
}
