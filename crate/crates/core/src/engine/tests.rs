use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::*;
use crate::model::{Constraint, Timestamp, ValueType};
use crate::query::{naive_eval, CmpOp};
use crate::schema::ViolationReason;

pub(crate) fn todo_schema() -> Schema {
    Schema::new("to-do")
        .with("Subject", Constraint::required_single(ValueType::Text))
        .with("Received", Constraint::required_single(ValueType::Timestamp))
        .with("Deadline", Constraint::required_single(ValueType::Timestamp))
        .with("Categories", Constraint::optional_many(ValueType::Text))
}

pub(crate) fn email_schema() -> Schema {
    Schema::new("email")
        .with("Subject", Constraint::required_single(ValueType::Text))
        .with("Received", Constraint::required_single(ValueType::Timestamp))
        .with("From", Constraint::required_single(ValueType::Text))
}

fn quiet() -> EngineConfig {
    EngineConfig { background_flush: false, seed: Some(7), ..Default::default() }
}

fn ts(day: u32) -> Value {
    Value::Timestamp(Timestamp::from_ymd(2001, 5, day).unwrap())
}

fn fill_todo(h: &Handle) {
    h.set("Subject", [Value::text("write paper")]).unwrap();
    h.set("Received", [ts(1)]).unwrap();
    h.set("Deadline", [ts(20)]).unwrap();
    h.add("Categories", [Value::text("work")]).unwrap();
}

fn fetches(e: &Engine) -> u64 {
    e.stats().backend.fetches
}

#[test]
fn create_gives_empty_distinct_documents() {
    let e = Engine::in_memory(quiet()).unwrap();
    let a = e.create_document(DocumentKind::Plain).unwrap();
    let c = e.create_document(DocumentKind::Collection).unwrap();
    assert_ne!(a.id(), c.id());
    assert!(a.values_of("anything").unwrap().is_empty());
    assert!(c.members().unwrap().is_empty());
    assert_eq!(c.kind().unwrap(), DocumentKind::Collection);
}

#[test]
fn get_unknown_document_fails() {
    let e = Engine::in_memory(quiet()).unwrap();
    let missing = DocumentId::from_u128(999_999);
    assert!(matches!(e.get_document(missing), Err(Error::UnknownDocument(_))));
}

#[test]
fn two_handles_see_the_same_state() {
    let e = Engine::in_memory(quiet()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    let h2 = e.get_document(h.id()).unwrap();
    h.set("x", [Value::Integer(1)]).unwrap();
    assert_eq!(h2.values_of("x").unwrap().as_slice(), &[Value::Integer(1)]);
    h2.add("x", [Value::Integer(2)]).unwrap();
    assert_eq!(h.values_of("x").unwrap().len(), 2);
}

fn cold_todo_engine() -> (Arc<Store>, DocumentId) {
    let store = Arc::new(Store::in_memory());
    let id = {
        let e = Engine::open(store.clone(), quiet()).unwrap();
        e.define_schema(todo_schema()).unwrap();
        let h = e.create_document(DocumentKind::Plain).unwrap();
        fill_todo(&h);
        h.enforce("to-do").unwrap();
        h.set("note", [Value::text("unrelated")]).unwrap();
        e.flush().unwrap();
        h.id()
    };
    (store, id)
}

#[test]
fn cold_read_fetches_whole_schema_slice_once() {
    let (store, id) = cold_todo_engine();
    let e = Engine::open(store, quiet()).unwrap();
    let h = e.get_document(id).unwrap();
    assert!(h.materialized_properties().is_empty());
    let before = fetches(&e);
    assert_eq!(h.values_of("Deadline").unwrap().as_slice(), &[ts(20)]);
    assert_eq!(fetches(&e) - before, 1);
    let loaded = h.materialized_properties();
    for p in ["Subject", "Received", "Deadline", "Categories"] {
        assert!(loaded.contains(p), "{p} not materialized");
    }
    assert!(!loaded.contains("note"));

    // The rest of the slice is already here.
    h.values_of("Subject").unwrap();
    h.values_of("Categories").unwrap();
    assert_eq!(fetches(&e) - before, 1);
    // Another slice costs one more round trip.
    assert_eq!(h.values_of("note").unwrap().as_slice(), &[Value::text("unrelated")]);
    assert_eq!(fetches(&e) - before, 2);
}

#[test]
fn eviction_keeps_handles_usable() {
    let store = Arc::new(Store::in_memory());
    let mut shadow = BTreeMap::new();
    let ids: Vec<DocumentId> = {
        let e = Engine::open(store.clone(), quiet()).unwrap();
        (0..3)
            .map(|i| {
                let h = e.create_document(DocumentKind::Plain).unwrap();
                h.set("n", [Value::Integer(i), Value::Integer(i)]).unwrap();
                shadow.insert(h.id(), h.snapshot().unwrap());
                e.flush().unwrap();
                h.id()
            })
            .collect()
    };
    let cfg = EngineConfig { max_cached_docs: 2, ..quiet() };
    let e = Engine::open(store, cfg).unwrap();
    let handles: Vec<Handle> = ids.iter().map(|id| e.get_document(*id).unwrap()).collect();
    for h in &handles {
        h.values_of("n").unwrap();
    }
    assert_eq!(e.stats().evictions, 1);
    assert_eq!(e.stats().cached_docs, 2);
    for h in &handles {
        assert_eq!(h.snapshot().unwrap(), shadow[&h.id()]);
    }
}

#[test]
fn dirty_documents_are_never_evicted() {
    let cfg = EngineConfig { max_cached_docs: 2, ..quiet() };
    let e = Engine::in_memory(cfg).unwrap();
    for i in 0..5 {
        let h = e.create_document(DocumentKind::Plain).unwrap();
        h.set("n", [Value::Integer(i)]).unwrap();
    }
    assert_eq!(e.evict_if_needed(), 0);
    assert_eq!(e.stats().evictions, 0);
    assert_eq!(e.stats().cached_docs, 5);
    e.flush().unwrap();
    assert_eq!(e.evict_if_needed(), 3);
}

#[test]
fn rejected_mutation_leaves_document_unchanged() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    fill_todo(&h);
    h.enforce("to-do").unwrap();
    e.flush().unwrap();
    let before = h.snapshot().unwrap();
    let assigned = h.assignments().unwrap();
    let err = h.mutate(Mutation::RemoveValues("Deadline".into(), vec![ts(20)])).unwrap_err();
    let v = err.violations();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].property, "Deadline");
    assert_eq!(v[0].reason, ViolationReason::TooFewValues);
    assert_eq!(h.snapshot().unwrap(), before);
    assert_eq!(h.assignments().unwrap(), assigned);
    assert_eq!(e.stats().dirty_docs, 0);

    let err = h.set("Subject", [Value::Integer(3)]).unwrap_err();
    assert_eq!(err.violations()[0].reason, ViolationReason::WrongType);
    assert_eq!(h.snapshot().unwrap(), before);
}

#[test]
fn enforce_requires_conformance() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("Subject", [Value::text("s")]).unwrap();
    h.set("Received", [ts(1)]).unwrap();
    let err = h.enforce("to-do").unwrap_err();
    assert!(matches!(err, Error::NotConforming(_)));
    assert!(err
        .violations()
        .iter()
        .any(|v| v.property == "Deadline" && v.reason == ViolationReason::MissingRequired));
    assert!(h.enforced().unwrap().is_empty());
    assert!(matches!(h.enforce("nope"), Err(Error::UnknownSchema(_))));
    h.set("Deadline", [ts(2)]).unwrap();
    assert!(h.enforce("to-do").unwrap());
    assert!(!h.enforce("to-do").unwrap());
    assert!(h.unenforce("to-do").unwrap());
    assert!(!h.unenforce("to-do").unwrap());
    // Once unenforced, anything goes.
    h.mutate(Mutation::RemoveProperty("Deadline".into())).unwrap();
}

#[test]
fn bags_keep_duplicates() {
    let e = Engine::in_memory(quiet()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.add("Categories", [Value::text("urgent")]).unwrap();
    h.add("Categories", [Value::text("urgent")]).unwrap();
    assert_eq!(h.values_of("Categories").unwrap().len(), 2);
    h.mutate(Mutation::RemoveValues("Categories".into(), vec![Value::text("absent")])).unwrap();
    assert_eq!(h.values_of("Categories").unwrap().len(), 2);
    h.mutate(Mutation::RemoveValues("Categories".into(), vec![Value::text("urgent")])).unwrap();
    assert_eq!(h.values_of("Categories").unwrap().len(), 1);
}

#[test]
fn subject_written_under_email_stays_in_email_slice() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(email_schema()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let email = e.shared.registry.read().slice_of("email").unwrap();
    let todo = e.shared.registry.read().slice_of("to-do").unwrap();
    let h = e.create_document(DocumentKind::Content).unwrap();
    h.set("Subject", [Value::text("lunch")]).unwrap();
    h.set("Received", [ts(1)]).unwrap();
    h.set("From", [Value::text("bob")]).unwrap();
    h.enforce("email").unwrap();
    h.set("Deadline", [ts(4)]).unwrap();
    h.enforce("to-do").unwrap();
    let a = h.assignments().unwrap();
    assert_eq!(a["Subject"], email);
    assert_eq!(a["Received"], email);
    assert_eq!(a["Deadline"], todo);
}

#[test]
fn enforced_schema_beats_registration_order() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(Schema::new("first").with("Tag", Constraint::optional_many(ValueType::Text)))
        .unwrap();
    e.define_schema(Schema::new("second").with("Tag", Constraint::optional_many(ValueType::Text)))
        .unwrap();
    let first = e.shared.registry.read().slice_of("first").unwrap();
    let second = e.shared.registry.read().slice_of("second").unwrap();

    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.enforce("second").unwrap();
    h.add("Tag", [Value::text("x")]).unwrap();
    h.enforce("first").unwrap();
    assert_eq!(h.assignments().unwrap()["Tag"], second);

    let g = e.create_document(DocumentKind::Plain).unwrap();
    g.add("Tag", [Value::text("x")]).unwrap();
    assert_eq!(g.assignments().unwrap()["Tag"], first);
}

#[test]
fn todo_properties_share_one_slice() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    fill_todo(&h);
    h.enforce("to-do").unwrap();
    let slices: BTreeSet<SliceId> = h.assignments().unwrap().into_values().collect();
    assert_eq!(slices.len(), 1);
    assert_ne!(slices.into_iter().next(), Some(SliceId(0)));
}

#[test]
fn schema_free_properties_go_to_slice_zero() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("color", [Value::text("red")]).unwrap();
    assert_eq!(h.assignments().unwrap()["color"], SliceId(0));
}

#[test]
fn flush_then_reopen_keeps_mutations() {
    let dir = tempfile::tempdir().unwrap();
    Store::create(dir.path()).unwrap();
    let id = {
        let e = Engine::open_dir(dir.path(), quiet()).unwrap();
        e.define_schema(todo_schema()).unwrap();
        let h = e.create_document(DocumentKind::Plain).unwrap();
        fill_todo(&h);
        h.enforce("to-do").unwrap();
        assert!(e.flush().unwrap());
        let id = h.id();
        drop(h);
        e.simulate_crash();
        id
    };
    let e = Engine::open_dir(dir.path(), quiet()).unwrap();
    let h = e.get_document(id).unwrap();
    assert_eq!(h.enforced().unwrap(), vec!["to-do".to_string()]);
    assert_eq!(h.values_of("Subject").unwrap().as_slice(), &[Value::text("write paper")]);
    assert_eq!(e.schema("to-do"), Some(todo_schema()));
}

#[test]
fn unflushed_changes_are_lost_on_crash() {
    let store = Arc::new(Store::in_memory());
    let e = Engine::open(store.clone(), quiet()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("x", [Value::Integer(1)]).unwrap();
    e.flush().unwrap();
    h.set("x", [Value::Integer(2)]).unwrap();
    let id = h.id();
    drop(h);
    e.simulate_crash();
    let e = Engine::open(store, quiet()).unwrap();
    assert_eq!(
        e.get_document(id).unwrap().values_of("x").unwrap().as_slice(),
        &[Value::Integer(1)]
    );
}

#[test]
fn background_writeback_makes_changes_durable() {
    let store = Arc::new(Store::in_memory());
    let interval = Duration::from_millis(50);
    let cfg = EngineConfig { flush_interval: interval, background_flush: true, ..quiet() };
    let e = Engine::open(store.clone(), cfg).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("x", [Value::text("kept")]).unwrap();
    let id = h.id();
    drop(h);
    thread::sleep(interval * 2);
    e.simulate_crash();
    let e = Engine::open(store, quiet()).unwrap();
    assert_eq!(
        e.get_document(id).unwrap().values_of("x").unwrap().as_slice(),
        &[Value::text("kept")]
    );
}

#[test]
fn clean_flush_writes_nothing() {
    let e = Engine::in_memory(quiet()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("x", [Value::Integer(1)]).unwrap();
    assert!(e.flush().unwrap());
    let batches = e.stats().backend.batches;
    assert!(!e.flush().unwrap());
    h.values_of("x").unwrap();
    assert!(!e.flush().unwrap());
    assert_eq!(e.stats().backend.batches, batches);
    // A no-op change is not a change.
    h.mutate(Mutation::RemoveValues("x".into(), vec![Value::Integer(9)])).unwrap();
    assert!(!e.flush().unwrap());
}

#[test]
fn failed_flush_keeps_dirty_flags() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::create(dir.path()).unwrap());
    let e = Engine::open(store.clone(), quiet()).unwrap();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("x", [Value::Integer(1)]).unwrap();
    store.fail_next_commit();
    assert!(e.flush().is_err());
    assert_eq!(e.stats().dirty_docs, 1);
    assert!(e.flush().unwrap());
    assert_eq!(e.stats().dirty_docs, 0);
    let id = h.id();
    drop(h);
    e.simulate_crash();
    let e = Engine::open_dir(dir.path(), quiet()).unwrap();
    assert_eq!(e.get_document(id).unwrap().values_of("x").unwrap().len(), 1);
}

#[test]
fn delete_removes_document_everywhere() {
    let store = Arc::new(Store::in_memory());
    let e = Engine::open(store.clone(), quiet()).unwrap();
    let coll = e.create_document(DocumentKind::Collection).unwrap();
    let keep = e.create_document(DocumentKind::Plain).unwrap();
    let gone = e.create_document(DocumentKind::Plain).unwrap();
    coll.mutate(Mutation::AddMember(keep.id())).unwrap();
    coll.mutate(Mutation::AddMember(gone.id())).unwrap();
    e.flush().unwrap();
    assert_eq!(e.document_count().unwrap(), 3);

    e.delete_document(gone.id()).unwrap();
    assert_eq!(e.document_count().unwrap(), 2);
    assert!(matches!(e.get_document(gone.id()), Err(Error::UnknownDocument(_))));
    assert!(matches!(gone.values_of("x"), Err(Error::UnknownDocument(_))));
    assert!(matches!(e.delete_document(gone.id()), Err(Error::UnknownDocument(_))));
    assert_eq!(coll.members().unwrap(), BTreeSet::from([keep.id()]));
    assert_eq!(e.query_ids(&QueryExpr::member_of(coll.id())).unwrap(), BTreeSet::from([keep.id()]));

    // A document that was never flushed can be deleted too.
    let fresh = e.create_document(DocumentKind::Plain).unwrap();
    e.delete_document(fresh.id()).unwrap();
    e.flush().unwrap();
    drop((coll, keep, gone, fresh));
    e.simulate_crash();
    let e = Engine::open(store, quiet()).unwrap();
    assert_eq!(e.document_count().unwrap(), 2);
}

#[test]
fn member_operations_check_kind_and_target() {
    let e = Engine::in_memory(quiet()).unwrap();
    let plain = e.create_document(DocumentKind::Plain).unwrap();
    let coll = e.create_document(DocumentKind::Collection).unwrap();
    let err = plain.mutate(Mutation::AddMember(coll.id())).unwrap_err();
    assert!(matches!(err, Error::WrongKind { .. }));
    let err = coll.mutate(Mutation::AddMember(DocumentId::from_u128(5))).unwrap_err();
    assert!(matches!(err, Error::UnknownDocument(_)));
    coll.mutate(Mutation::AddMember(plain.id())).unwrap();
    coll.mutate(Mutation::RemoveMember(plain.id())).unwrap();
    assert!(coll.members().unwrap().is_empty());
    let q = QueryExpr::member_of(plain.id());
    assert!(matches!(e.query_ids(&q), Err(Error::UnknownCollection(_))));
}

#[test]
fn content_round_trip_and_search() {
    let e = Engine::in_memory(quiet()).unwrap();
    let c = e.create_document(DocumentKind::Content).unwrap();
    let plain = e.create_document(DocumentKind::Plain).unwrap();
    let body = b"Lunch on Friday at noon";
    c.write_content(&mut &body[..]).unwrap();
    assert_eq!(c.read_content().unwrap(), body);
    assert!(matches!(plain.write_content(&mut &body[..]), Err(Error::WrongKind { .. })));
    let hits = e.query_ids(&QueryExpr::content_contains("friday")).unwrap();
    assert_eq!(hits, BTreeSet::from([c.id()]));
    assert!(e.query_ids(&QueryExpr::content_contains("dinner")).unwrap().is_empty());
}

#[test]
fn email_gains_todo_schema() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(email_schema()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let other = e.create_document(DocumentKind::Plain).unwrap();
    other.set("Subject", [Value::text("noise")]).unwrap();

    let mail = e.create_document(DocumentKind::Content).unwrap();
    mail.write_content(&mut &b"please review the draft"[..]).unwrap();
    mail.set("Subject", [Value::text("review draft")]).unwrap();
    mail.set("Received", [ts(2)]).unwrap();
    mail.set("From", [Value::text("alice")]).unwrap();
    mail.enforce("email").unwrap();

    // A second application turns the same document into a to-do item.
    let todo_app = e.get_document(mail.id()).unwrap();
    todo_app.set("Deadline", [ts(9)]).unwrap();
    todo_app.enforce("to-do").unwrap();

    assert_eq!(mail.enforced().unwrap(), vec!["email".to_string(), "to-do".to_string()]);
    let snap = mail.snapshot().unwrap();
    assert_eq!(snap.values_of("Subject").len(), 1);
    todo_app.set("Subject", [Value::text("review draft today")]).unwrap();
    assert_eq!(mail.values_of("Subject").unwrap().as_slice(), &[Value::text("review draft today")]);

    let q = crate::query::parse(r#"schema:"email" AND schema:"to-do""#).unwrap();
    assert_eq!(e.query_ids(&q).unwrap(), BTreeSet::from([mail.id()]));
}

#[test]
fn execute_matches_reference_evaluation() {
    let e = Engine::in_memory(quiet()).unwrap();
    e.define_schema(todo_schema()).unwrap();
    let coll = e.create_document(DocumentKind::Collection).unwrap();
    for i in 0..40i64 {
        let h = e.create_document(DocumentKind::Plain).unwrap();
        h.set("n", [Value::Integer(i % 7)]).unwrap();
        if i % 3 == 0 {
            h.add("Categories", [Value::text("urgent"), Value::text("work")]).unwrap();
        }
        if i % 4 == 0 {
            fill_todo(&h);
            h.enforce("to-do").unwrap();
        }
        if i % 5 == 0 {
            coll.mutate(Mutation::AddMember(h.id())).unwrap();
        }
        if i == 20 {
            e.flush().unwrap();
        }
    }
    let repo = e.repo_view().unwrap();
    let queries = [
        QueryExpr::cmp("n", CmpOp::Ge, 3),
        QueryExpr::cmp("Categories", CmpOp::Eq, "urgent"),
        QueryExpr::not(QueryExpr::has_schema("to-do")),
        QueryExpr::or([QueryExpr::member_of(coll.id()), QueryExpr::exists("Deadline")]),
        QueryExpr::and([
            QueryExpr::cardinality("Categories", crate::query::Cardinality::Multiple),
            QueryExpr::not(QueryExpr::cmp("n", CmpOp::Lt, 2)),
        ]),
    ];
    for q in &queries {
        assert_eq!(e.query_ids(q).unwrap(), naive_eval(q, &repo).unwrap(), "{q}");
    }
}

#[test]
fn empty_repository_queries_return_nothing() {
    let e = Engine::in_memory(quiet()).unwrap();
    assert!(e.query_ids(&QueryExpr::not(QueryExpr::exists("x"))).unwrap().is_empty());
    assert!(matches!(e.query_ids(&QueryExpr::has_schema("missing")), Err(Error::UnknownSchema(_))));
}

#[test]
fn cursor_hands_out_live_handles() {
    let store = Arc::new(Store::in_memory());
    {
        let e = Engine::open(store.clone(), quiet()).unwrap();
        for i in 0..5 {
            e.create_document(DocumentKind::Plain).unwrap().set("n", [Value::Integer(i)]).unwrap();
        }
        e.flush().unwrap();
    }
    let e = Engine::open(store, quiet()).unwrap();
    let mut cur = e.query(&QueryExpr::exists("n")).unwrap();
    assert_eq!(cur.remaining(), 5);
    let first = cur.next().unwrap();
    let before = fetches(&e);
    first.values_of("n").unwrap();
    assert!(fetches(&e) <= before + 1);
    assert_eq!(cur.remaining(), 4);
    assert_eq!(cur.count(), 4);
}

#[test]
fn concurrent_disjoint_updates_are_not_lost() {
    let e =
        Engine::in_memory(EngineConfig { flush_interval: Duration::from_millis(20), ..quiet() })
            .unwrap();
    e.define_schema(todo_schema()).unwrap();
    let docs: Vec<DocumentId> = (0..10)
        .map(|_| {
            let h = e.create_document(DocumentKind::Plain).unwrap();
            fill_todo(&h);
            h.enforce("to-do").unwrap();
            h.id()
        })
        .collect();
    let threads: Vec<_> = (0..4)
        .map(|t| {
            let e = e.clone();
            let docs = docs.clone();
            thread::spawn(move || {
                for round in 0..50i64 {
                    for id in &docs {
                        let h = e.get_document(*id).unwrap();
                        h.add(&format!("w{t}"), [Value::Integer(round)]).unwrap();
                        let q = QueryExpr::cmp(format!("w{t}"), CmpOp::Ge, 0);
                        assert!(e.query_ids(&q).unwrap().contains(id));
                    }
                    if round % 10 == 0 {
                        e.flush().unwrap();
                    }
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    for id in docs {
        let h = e.get_document(id).unwrap();
        for t in 0..4 {
            assert_eq!(h.values_of(&format!("w{t}")).unwrap().len(), 50);
        }
        assert!(e.conforms(id, "to-do").unwrap().is_empty());
    }
}

#[test]
fn commits_are_published_in_order() {
    let e = Engine::in_memory(quiet()).unwrap();
    let rx = e.commits();
    let h = e.create_document(DocumentKind::Plain).unwrap();
    h.set("x", [Value::Integer(1)]).unwrap();
    h.set("x", [Value::Integer(1)]).unwrap();
    h.add("y", [Value::Integer(1)]).unwrap();
    let events: Vec<CommitEvent> = rx.try_iter().collect();
    assert_eq!(events.len(), 3);
    assert!(events[0].summary.created);
    assert_eq!(events[1].summary.properties, BTreeSet::from(["x".to_string()]));
    assert!(events.windows(2).all(|w| w[0].seq < w[1].seq));
}
