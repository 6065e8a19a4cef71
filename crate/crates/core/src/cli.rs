//! The `harland` command-line shell.
//!
//! Exit codes: 0 on success, 1 on a domain error (schema violations are
//! printed one per line as `VIOLATION <schema> <prop> <reason>`), 2 on a
//! usage or parse error.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use crate::coordination::{pipeline, Mode};
use crate::engine::{Engine, EngineConfig, Handle, Mutation};
use crate::error::Error;
use crate::model::{Bag, Constraint, DocumentId, DocumentKind, Schema, Value, ValueType};
use crate::query::{parse, parse_literal};
use crate::store::format::{encode_content, encode_meta, encode_row};
use crate::store::{MetadataRecord, PropertyRow, SliceId, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Records,
}

#[derive(Debug, Parser)]
#[command(name = "harland", version, about = "Embedded document store with enforceable schemas")]
pub struct Cli {
    /// Store directory.
    #[arg(long, env = "HARLAND_STORE", global = true)]
    pub store: Option<PathBuf>,
    /// Soft limit on cached documents.
    #[arg(long, default_value_t = 1024, global = true)]
    pub cache_docs: usize,
    /// Background writeback interval in milliseconds.
    #[arg(long, default_value_t = 500, global = true)]
    pub flush_ms: u64,
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    pub format: Format,
    /// Mint deterministic document ids from this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty store.
    Init,
    /// Create a document and print its id.
    Create {
        #[arg(long, default_value = "plain", value_parser = parse_kind)]
        kind: DocumentKind,
    },
    /// Replace a property's values.
    Set {
        id: String,
        prop: String,
        #[arg(allow_negative_numbers = true)]
        values: Vec<String>,
    },
    /// Add values to a property.
    Add {
        id: String,
        prop: String,
        #[arg(allow_negative_numbers = true)]
        values: Vec<String>,
    },
    /// Remove one occurrence of each value.
    RmValues {
        id: String,
        prop: String,
        #[arg(allow_negative_numbers = true)]
        values: Vec<String>,
    },
    /// Remove a property entirely.
    RmProp {
        id: String,
        prop: String,
    },
    /// Print a document.
    Get {
        id: String,
    },
    #[command(subcommand)]
    Schema(SchemaCommand),
    Enforce {
        id: String,
        schema: String,
    },
    Unenforce {
        id: String,
        schema: String,
    },
    /// Print the ids of matching documents, sorted.
    Query {
        expr: String,
    },
    #[command(subcommand)]
    Members(MembersCommand),
    #[command(subcommand)]
    Content(ContentCommand),
    /// Print `<seq>\t<doc-id>` whenever a document starts matching.
    Watch {
        expr: String,
        /// Run these commands (one per line) while watching, then exit.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Stop after this many deliveries.
        #[arg(long)]
        max: Option<usize>,
    },
    /// Run the three-stage work-queue demo.
    DemoPipeline {
        #[arg(long, default_value_t = 100)]
        docs: usize,
        #[arg(long, default_value_t = 60)]
        timeout_secs: u64,
    },
    /// Write all dirty documents.
    Flush,
    /// Print instrumentation counters.
    Stats,
}

#[derive(Debug, Subcommand)]
pub enum SchemaCommand {
    /// Define a schema from `<prop>:<type>:<arity>` specs.
    Define {
        name: String,
        props: Vec<String>,
    },
    List,
    Show {
        name: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum MembersCommand {
    Add { collection: String, id: String },
    Rm { collection: String, id: String },
}

#[derive(Debug, Subcommand)]
pub enum ContentCommand {
    /// Store content from a file, or stdin.
    Put { id: String, file: Option<PathBuf> },
    /// Write content to a file, or stdout.
    Get { id: String, file: Option<PathBuf> },
}

fn parse_kind(s: &str) -> Result<DocumentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(p) => Failure::Usage(p.to_string()),
            e => Failure::Domain(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Domain(Error::Io(e))
    }
}

type CliResult<T = ()> = Result<T, Failure>;

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// Runs one command line; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(f) => report(f, err),
    }
}

fn report(f: Failure, err: &mut dyn Write) -> i32 {
    match f {
        Failure::Usage(msg) => {
            let _ = writeln!(err, "error: {msg}");
            2
        }
        Failure::Domain(e) => {
            if e.violations().is_empty() {
                let _ = writeln!(err, "error: {e}");
            } else {
                for v in e.violations() {
                    let _ = writeln!(err, "VIOLATION {} {} {}", v.schema, v.property, v.reason);
                }
            }
            1
        }
    }
}

fn config(cli: &Cli) -> EngineConfig {
    EngineConfig {
        max_cached_docs: cli.cache_docs,
        flush_interval: Duration::from_millis(cli.flush_ms.max(1)),
        background_flush: true,
        seed: cli.seed,
    }
}

fn store_path(cli: &Cli) -> CliResult<PathBuf> {
    cli.store
        .clone()
        .ok_or_else(|| Failure::Usage("no store given (use --store or HARLAND_STORE)".into()))
}

fn open(cli: &Cli) -> CliResult<Engine> {
    Ok(Engine::open_dir(&store_path(cli)?, config(cli))?)
}

fn doc_id(s: &str) -> CliResult<DocumentId> {
    s.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

fn literals(values: &[String]) -> CliResult<Vec<Value>> {
    values.iter().map(|v| parse_literal(v).map_err(|e| Failure::Usage(e.to_string()))).collect()
}

fn parse_spec(spec: &str) -> CliResult<(String, Constraint)> {
    let mut parts = spec.rsplitn(3, ':');
    let (Some(arity), Some(ty), Some(prop)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Failure::Usage(format!("expected <prop>:<type>:<arity>, got {spec:?}")));
    };
    let value_type: ValueType = ty.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let (required, multiple) =
        Constraint::parse_arity(arity).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((prop.to_owned(), Constraint { value_type, required, multiple }))
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match &cli.command {
        Command::Init => {
            let path = store_path(cli)?;
            Store::create(&path)?;
            writeln!(out, "initialized {}", path.display())?;
        }
        Command::DemoPipeline { docs, timeout_secs } => {
            let engine = match &cli.store {
                Some(p) => Engine::open_dir(p, config(cli))?,
                None => Engine::open(Arc::new(Store::in_memory()), config(cli))?,
            };
            let r = pipeline::run(&engine, *docs, Duration::from_secs(*timeout_secs))?;
            writeln!(out, "seeded {}", r.seeded.len())?;
            writeln!(out, "completed {}", r.completed)?;
            writeln!(out, "documents {} -> {}", r.initial_count, r.final_count)?;
            writeln!(out, "count decreased {}", r.count_decreased)?;
            writeln!(out, "dead-lettered {}", r.dead_lettered)?;
            writeln!(out, "elapsed-ms {}", r.elapsed.as_millis())?;
            if !r.success() {
                return Err(Failure::Domain(Error::StorageFailure(
                    "pipeline did not complete".into(),
                )));
            }
        }
        Command::Watch { expr, script, max } => {
            let q = parse(expr).map_err(|e| Failure::Usage(e.to_string()))?;
            let engine = open(cli)?;
            watch(cli, &engine, q, script.as_ref(), *max, out, err)?;
        }
        command => {
            let engine = open(cli)?;
            run_on(cli.format, &engine, command, out)?;
            engine.flush()?;
        }
    }
    Ok(())
}

fn run_on(format: Format, engine: &Engine, command: &Command, out: &mut dyn Write) -> CliResult {
    let handle = |id: &str| -> CliResult<Handle> { Ok(engine.get_document(doc_id(id)?)?) };
    match command {
        Command::Create { kind } => {
            let h = engine.create_document(*kind)?;
            writeln!(out, "{}", h.id())?;
        }
        Command::Set { id, prop, values } => {
            let bag: Bag = literals(values)?.into();
            handle(id)?.mutate(Mutation::SetProperty(prop.clone(), bag))?;
        }
        Command::Add { id, prop, values } => {
            handle(id)?.mutate(Mutation::AddValues(prop.clone(), literals(values)?))?;
        }
        Command::RmValues { id, prop, values } => {
            handle(id)?.mutate(Mutation::RemoveValues(prop.clone(), literals(values)?))?;
        }
        Command::RmProp { id, prop } => {
            handle(id)?.mutate(Mutation::RemoveProperty(prop.clone()))?;
        }
        Command::Get { id } => print_document(format, engine, &handle(id)?, out)?,
        Command::Schema(SchemaCommand::Define { name, props }) => {
            let mut schema = Schema::new(name.clone());
            for spec in props {
                let (p, c) = parse_spec(spec)?;
                if schema.constraints.insert(p.clone(), c).is_some() {
                    return Err(Failure::Usage(format!("property {p:?} listed twice")));
                }
            }
            engine.define_schema(schema)?;
        }
        Command::Schema(SchemaCommand::List) => {
            for s in engine.schemas() {
                match format {
                    Format::Text => writeln!(out, "{}", s.name)?,
                    Format::Records => {
                        writeln!(out, "{}", encode_meta(&MetadataRecord::SchemaDef(s)))?
                    }
                }
            }
        }
        Command::Schema(SchemaCommand::Show { name }) => {
            let s = engine.schema(name).ok_or_else(|| Error::UnknownSchema(name.clone()))?;
            match format {
                Format::Text => {
                    writeln!(out, "{}", s.name)?;
                    for (p, c) in &s.constraints {
                        writeln!(out, "  {p}:{}:{}", c.value_type, c.arity())?;
                    }
                }
                Format::Records => writeln!(out, "{}", encode_meta(&MetadataRecord::SchemaDef(s)))?,
            }
        }
        Command::Enforce { id, schema } => {
            handle(id)?.enforce(schema)?;
        }
        Command::Unenforce { id, schema } => {
            handle(id)?.unenforce(schema)?;
        }
        Command::Query { expr } => {
            let q = parse(expr).map_err(Error::from)?;
            for id in engine.query_ids(&q)? {
                writeln!(out, "{id}")?;
            }
        }
        Command::Members(MembersCommand::Add { collection, id }) => {
            handle(collection)?.mutate(Mutation::AddMember(doc_id(id)?))?;
        }
        Command::Members(MembersCommand::Rm { collection, id }) => {
            handle(collection)?.mutate(Mutation::RemoveMember(doc_id(id)?))?;
        }
        Command::Content(ContentCommand::Put { id, file }) => {
            let h = handle(id)?;
            let c = match file {
                Some(f) => h.write_content(&mut fs::File::open(f)?)?,
                None => h.write_content(&mut io::stdin().lock())?,
            };
            match format {
                Format::Text => writeln!(out, "{} bytes", c.length)?,
                Format::Records => writeln!(out, "{}", encode_content(&c))?,
            }
        }
        Command::Content(ContentCommand::Get { id, file }) => {
            let bytes = handle(id)?.read_content()?;
            match file {
                Some(f) => fs::write(f, bytes)?,
                None => out.write_all(&bytes)?,
            }
        }
        Command::Flush => {
            let wrote = engine.flush()?;
            writeln!(out, "{}", if wrote { "flushed" } else { "clean" })?;
        }
        Command::Stats => {
            let s = engine.stats();
            let rows = [
                ("documents", engine.document_count()? as u64),
                ("cached", s.cached_docs as u64),
                ("dirty", s.dirty_docs as u64),
                ("cache-hits", s.cache_hits),
                ("cache-misses", s.cache_misses),
                ("evictions", s.evictions),
                ("flushes", s.flushes),
                ("backend-fetches", s.backend.fetches),
                ("backend-probes", s.backend.probes),
                ("backend-batches", s.backend.batches),
                ("backend-scans", s.backend.scans),
            ];
            for (k, v) in rows {
                match format {
                    Format::Text => writeln!(out, "{k}: {v}")?,
                    Format::Records => writeln!(out, "{k}\t{v}")?,
                }
            }
        }
        Command::Init | Command::Watch { .. } | Command::DemoPipeline { .. } => {
            return Err(Failure::Usage("command not available here".into()))
        }
    }
    Ok(())
}

fn print_document(format: Format, engine: &Engine, h: &Handle, out: &mut dyn Write) -> CliResult {
    let snap = h.snapshot()?;
    let id = snap.id;
    match format {
        Format::Text => {
            writeln!(out, "id: {id}")?;
            writeln!(out, "kind: {}", snap.kind)?;
            writeln!(out, "enforced: {}", snap.enforced.join(", "))?;
            if snap.kind == DocumentKind::Collection {
                let members: Vec<String> = snap.members.iter().map(|m| m.to_string()).collect();
                writeln!(out, "members: {}", members.join(", "))?;
            }
            for (p, bag) in &snap.properties {
                let vals: Vec<String> = bag.iter().map(|v| v.to_string()).collect();
                writeln!(out, "{p} = {}", vals.join(", "))?;
            }
            if snap.kind == DocumentKind::Content {
                if let Some(c) = engine.backend().content_ref(id)? {
                    writeln!(out, "content: {} bytes", c.length)?;
                }
            }
        }
        Format::Records => {
            let assignments = h.assignments()?;
            for (p, bag) in &snap.properties {
                let slice = assignments.get(p).copied().unwrap_or(SliceId::DEFAULT);
                for row in PropertyRow::for_bag(id, slice, p, bag) {
                    writeln!(out, "{}", encode_row(&row))?;
                }
            }
            let mut meta = vec![MetadataRecord::DocumentRecord { doc: id, kind: snap.kind }];
            meta.extend(
                snap.enforced
                    .iter()
                    .map(|s| MetadataRecord::Enforcement { doc: id, schema: s.clone() }),
            );
            meta.extend(
                assignments.into_iter().map(|(prop, slice)| MetadataRecord::SliceAssignment {
                    doc: id,
                    prop,
                    slice,
                }),
            );
            meta.extend(
                snap.members
                    .iter()
                    .map(|m| MetadataRecord::Membership { collection: id, member: *m }),
            );
            for rec in &meta {
                writeln!(out, "{}", encode_meta(rec))?;
            }
            if let Some(c) = engine.backend().content_ref(id)? {
                writeln!(out, "{}", encode_content(&c))?;
            }
        }
    }
    Ok(())
}

fn watch(
    cli: &Cli,
    engine: &Engine,
    q: crate::query::QueryExpr,
    script: Option<&PathBuf>,
    max: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult {
    let sub = engine.subscribe(q, Mode::Transition)?;
    let mut seen = 0usize;
    let emit = |out: &mut dyn Write, seen: &mut usize| -> CliResult<bool> {
        for d in sub.drain() {
            if max.is_some_and(|m| *seen >= m) {
                return Ok(true);
            }
            writeln!(out, "{}\t{}", d.seq, d.doc)?;
            *seen += 1;
        }
        out.flush()?;
        Ok(max.is_some_and(|m| *seen >= m))
    };
    if let Some(path) = script {
        let text = fs::read_to_string(path)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let words = shell_words::split(line)
                .map_err(|e| Failure::Usage(format!("script line {}: {e}", n + 1)))?;
            let args = std::iter::once("harland".to_owned()).chain(words);
            let parsed = Cli::try_parse_from(args)
                .map_err(|e| Failure::Usage(format!("script line {}: {}", n + 1, e.kind())))?;
            let mut sink = Vec::new();
            if let Err(f) = run_on(cli.format, engine, &parsed.command, &mut sink) {
                write!(err, "line {}: ", n + 1)?;
                report(f, err);
            }
            if emit(out, &mut seen)? {
                break;
            }
        }
        emit(out, &mut seen)?;
        engine.flush()?;
        return Ok(());
    }
    let _ = ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst));
    while !INTERRUPTED.load(Ordering::SeqCst) {
        if let Some(d) = sub.recv_timeout(Duration::from_millis(100)) {
            writeln!(out, "{}\t{}", d.seq, d.doc)?;
            seen += 1;
            if emit(out, &mut seen)? || max.is_some_and(|m| seen >= m) {
                break;
            }
        }
    }
    engine.flush()?;
    Ok(())
}
