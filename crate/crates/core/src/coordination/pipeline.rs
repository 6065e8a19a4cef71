//! A three-stage work queue. Documents arrive carrying `pipeline.received`;
//! each stage waits for the previous stage's schema, does its step and
//! enforces the next schema. The last stage only enforces `pipeline.done`,
//! a schema with no properties that exists purely to signal completion.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::engine::{Engine, Handle};
use crate::error::{Error, Result};
use crate::model::{Constraint, DocumentId, DocumentKind, Schema, Value, ValueType};
use crate::query::QueryExpr;

use super::{run_worker, Mode, WorkerConfig};

pub const RECEIVED: &str = "pipeline.received";
pub const COUNTED: &str = "pipeline.counted";
pub const TAGGED: &str = "pipeline.tagged";
pub const DONE: &str = "pipeline.done";

pub const TEXT: &str = "pipeline.text";
pub const WORDS: &str = "pipeline.words";
pub const TAGS: &str = "pipeline.tags";

pub fn schemas() -> Vec<Schema> {
    vec![
        Schema::new(RECEIVED).with(TEXT, Constraint::required_single(ValueType::Text)),
        Schema::new(COUNTED).with(WORDS, Constraint::required_single(ValueType::Integer)),
        Schema::new(TAGGED).with(TAGS, Constraint::optional_many(ValueType::Text)),
        Schema::new(DONE),
    ]
}

/// Defines the pipeline schemas unless identical ones already exist.
pub fn define_schemas(engine: &Engine) -> Result<()> {
    for s in schemas() {
        match engine.schema(&s.name) {
            Some(existing) if existing == s => {}
            Some(_) => return Err(Error::DuplicateName(s.name)),
            None => engine.define_schema(s)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineReport {
    pub seeded: Vec<DocumentId>,
    /// Seeded documents carrying every stage schema at the end.
    pub completed: usize,
    pub initial_count: usize,
    pub final_count: usize,
    /// Some sample of the document count was lower than an earlier one.
    pub count_decreased: bool,
    pub dead_lettered: usize,
    pub elapsed: Duration,
}

impl PipelineReport {
    pub fn success(&self) -> bool {
        self.completed == self.seeded.len()
            && self.dead_lettered == 0
            && !self.count_decreased
            && self.final_count >= self.initial_count + self.seeded.len()
    }
}

type Action = fn(&Engine, &Handle) -> Result<()>;

fn count_words(_: &Engine, h: &Handle) -> Result<()> {
    let text = h.values_of(TEXT)?;
    let n: usize = text
        .iter()
        .map(|v| match v {
            Value::Text(s) => s.split_whitespace().count(),
            _ => 0,
        })
        .sum();
    h.set(WORDS, [Value::Integer(n as i64)])?;
    h.enforce(COUNTED)?;
    Ok(())
}

fn tag(_: &Engine, h: &Handle) -> Result<()> {
    let words = h.values_of(WORDS)?;
    let mut tags = Vec::new();
    if let Some(Value::Integer(n)) = words.iter().next() {
        tags.push(Value::text(if *n > 5 { "long" } else { "short" }));
        if n % 2 == 0 {
            tags.push(Value::text("even"));
        }
    }
    h.set(TAGS, tags)?;
    h.enforce(TAGGED)?;
    Ok(())
}

fn finish(_: &Engine, h: &Handle) -> Result<()> {
    h.enforce(DONE)?;
    Ok(())
}

/// Seeds `docs` documents and runs the three workers until every document is
/// done or `timeout` passes.
pub fn run(engine: &Engine, docs: usize, timeout: Duration) -> Result<PipelineReport> {
    define_schemas(engine)?;
    let started = Instant::now();
    let stages: [(&str, &str, Action); 3] =
        [("count", RECEIVED, count_words), ("tag", COUNTED, tag), ("finish", TAGGED, finish)];
    let mut workers = Vec::new();
    for (name, input, action) in stages {
        let sub = engine.subscribe(QueryExpr::has_schema(input), Mode::Transition)?;
        let config = WorkerConfig { name: format!("pipeline-{name}"), ..Default::default() };
        workers.push(run_worker(sub, config, action)?);
    }

    let initial_count = engine.document_count()?;
    let high_water = Arc::new(AtomicUsize::new(initial_count));
    let decreased = Arc::new(AtomicBool::new(false));
    let watching = Arc::new(AtomicBool::new(true));
    let monitor = {
        let engine = engine.clone();
        let high_water = high_water.clone();
        let decreased = decreased.clone();
        let watching = watching.clone();
        thread::spawn(move || {
            while watching.load(Ordering::SeqCst) {
                if let Ok(n) = engine.document_count() {
                    if high_water.fetch_max(n, Ordering::SeqCst) > n {
                        decreased.store(true, Ordering::SeqCst);
                    }
                }
                thread::sleep(Duration::from_millis(5));
            }
        })
    };

    let mut seeded = Vec::with_capacity(docs);
    for i in 0..docs {
        let h = engine.create_document(DocumentKind::Plain)?;
        let words = "lorem ipsum dolor sit amet consectetur".split(' ').take(1 + i % 6);
        let text = words.collect::<Vec<_>>().join(" ");
        h.set(TEXT, [Value::text(text)])?;
        h.enforce(RECEIVED)?;
        seeded.push(h.id());
    }

    let done_query = QueryExpr::and([
        QueryExpr::has_schema(RECEIVED),
        QueryExpr::has_schema(COUNTED),
        QueryExpr::has_schema(TAGGED),
        QueryExpr::has_schema(DONE),
    ]);
    let watch = engine.subscribe(done_query, Mode::Match)?;
    let seeded_set: BTreeSet<DocumentId> = seeded.iter().copied().collect();
    let completed = loop {
        let now_done = watch.poll()?.intersection(&seeded_set).count();
        let dead: usize = workers.iter().map(|w| w.dead_letters().len()).sum();
        if now_done == docs || dead > 0 || started.elapsed() > timeout {
            break now_done;
        }
        thread::sleep(Duration::from_millis(10));
    };

    let mut dead_lettered = 0;
    for w in workers {
        dead_lettered += w.join().dead_lettered.len();
    }
    watching.store(false, Ordering::SeqCst);
    let _ = monitor.join();
    let final_count = engine.document_count()?;
    if high_water.load(Ordering::SeqCst) > final_count {
        decreased.store(true, Ordering::SeqCst);
    }
    Ok(PipelineReport {
        seeded,
        completed,
        initial_count,
        final_count,
        count_decreased: decreased.load(Ordering::SeqCst),
        dead_lettered,
        elapsed: started.elapsed(),
    })
}
