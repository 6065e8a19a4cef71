use std::path::Path;
use std::process::{Command, Output};

use harland::DocumentId;

struct Shell<'a> {
    store: &'a Path,
}

impl Shell<'_> {
    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_harland"))
            .arg("--store")
            .arg(self.store)
            .args(["--seed", "11"])
            .args(args)
            .env_remove("HARLAND_STORE")
            .output()
            .expect("binary runs")
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn create(&self, kind: &str) -> String {
        self.ok(&["create", "--kind", kind]).trim().to_owned()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TODO: [&str; 7] = [
    "schema",
    "define",
    "to-do",
    "Subject:text:1..1",
    "Received:timestamp:1..1",
    "Deadline:timestamp:1..1",
    "Categories:text:0..*",
];

const EMAIL: [&str; 6] =
    ["schema", "define", "email", "Subject:text:1..1", "Received:timestamp:1..1", "From:text:1..1"];

#[test]
fn email_and_todo_through_the_shell() {
    let dir = tempfile::tempdir().unwrap();
    let sh = Shell { store: dir.path() };
    sh.ok(&["init"]);
    sh.ok(&TODO);
    sh.ok(&EMAIL);
    let noise = sh.create("plain");
    sh.ok(&["set", &noise, "Subject", "\"other\""]);
    let id = sh.create("content");
    sh.ok(&["set", &id, "Subject", "\"review draft\""]);
    sh.ok(&["set", &id, "Received", "2001-05-01T09:00:00Z"]);
    sh.ok(&["set", &id, "From", "\"alice\""]);
    sh.ok(&["enforce", &id, "email"]);

    let o = sh.run(&["enforce", &id, "to-do"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o), "VIOLATION to-do Deadline MissingRequired\n");

    sh.ok(&["set", &id, "Deadline", "2001-05-09T17:00:00Z"]);
    sh.ok(&["enforce", &id, "to-do"]);
    let out = sh.ok(&["query", r#"schema:"email" AND schema:"to-do""#]);
    assert_eq!(out, format!("{id}\n"));
    let got = sh.ok(&["get", &id]);
    assert!(got.contains("enforced: email, to-do"), "{got}");
    assert!(got.contains("Subject = \"review draft\""), "{got}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let sh = Shell { store: dir.path() };
    sh.ok(&["init"]);
    sh.ok(&TODO);
    let id = sh.create("plain");

    // Usage and parse errors.
    assert_eq!(sh.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sh.run(&["query", "Subject = "]).status.code(), Some(2));
    assert_eq!(sh.run(&["set", &id, "x", "unquoted"]).status.code(), Some(2));
    assert_eq!(sh.run(&["get", "not-an-id"]).status.code(), Some(2));
    assert_eq!(sh.run(&["schema", "define", "s", "x:text"]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_harland"))
        .args(["stats"])
        .env_remove("HARLAND_STORE")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no store given"));

    // Domain errors.
    let missing = DocumentId::from_u128(12345).to_string();
    let o = sh.run(&["get", &missing]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o), format!("error: unknown document {missing}\n"));
    let o = sh.run(&["enforce", &id, "nope"]);
    assert_eq!(stderr(&o), "error: unknown schema \"nope\"\n");
    assert_eq!(sh.run(&TODO).status.code(), Some(1));
    let o = sh.run(&["members", "add", &id, &id]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: document"));
}

#[test]
fn violations_are_reported_one_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let sh = Shell { store: dir.path() };
    sh.ok(&["init"]);
    sh.ok(&TODO);
    let id = sh.create("plain");
    let o = sh.run(&["enforce", &id, "to-do"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(
        stderr(&o),
        "VIOLATION to-do Deadline MissingRequired\n\
         VIOLATION to-do Received MissingRequired\n\
         VIOLATION to-do Subject MissingRequired\n"
    );
    sh.ok(&["set", &id, "Subject", "\"s\""]);
    sh.ok(&["set", &id, "Received", "2001-05-01T00:00:00Z"]);
    sh.ok(&["set", &id, "Deadline", "2001-05-02T00:00:00Z"]);
    sh.ok(&["enforce", &id, "to-do"]);
    let o = sh.run(&["add", &id, "Subject", "\"second\""]);
    assert_eq!(stderr(&o), "VIOLATION to-do Subject TooManyValues\n");
    let o = sh.run(&["rm-prop", &id, "Deadline"]);
    assert_eq!(stderr(&o), "VIOLATION to-do Deadline TooFewValues\n");
    let o = sh.run(&["set", &id, "Subject", "7"]);
    assert_eq!(stderr(&o), "VIOLATION to-do Subject WrongType\n");
}

#[test]
fn seeded_scripts_are_deterministic() {
    let script = |dir: &Path| {
        let sh = Shell { store: dir };
        let mut out = sh.ok(&["init"]).replace(&dir.display().to_string(), "<store>");
        out += &sh.ok(&TODO);
        let a = sh.create("plain");
        let c = sh.create("collection");
        out += &format!("{a}\n{c}\n");
        out += &sh.ok(&["add", &a, "Categories", "\"urgent\"", "\"urgent\"", "\"work\""]);
        out += &sh.ok(&["rm-values", &a, "Categories", "\"urgent\"", "\"absent\""]);
        out += &sh.ok(&["members", "add", &c, &a]);
        out += &sh.ok(&["get", &a]);
        out += &sh.ok(&["get", &c]);
        out += &sh.ok(&["--format", "records", "get", &a]);
        out += &sh.ok(&["schema", "list"]);
        out += &sh.ok(&["schema", "show", "to-do"]);
        out += &sh.ok(&["query", &format!("member-of:{c} AND Categories = \"urgent\"")]);
        out
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let first = script(d1.path());
    assert_eq!(first, script(d2.path()));
    assert!(
        first.contains("Categories = \"urgent\", \"work\"")
            || first.contains("Categories = \"work\", \"urgent\""),
        "{first}"
    );
    assert!(first.contains("  Categories:text:0..*"), "{first}");
}

#[test]
fn content_put_and_get() {
    let dir = tempfile::tempdir().unwrap();
    let sh = Shell { store: dir.path() };
    sh.ok(&["init"]);
    let id = sh.create("content");
    let file = dir.path().join("body.txt");
    std::fs::write(&file, "minutes of the weekly meeting").unwrap();
    assert_eq!(sh.ok(&["content", "put", &id, file.to_str().unwrap()]), "29 bytes\n");
    assert_eq!(sh.ok(&["content", "get", &id]), "minutes of the weekly meeting");
    assert_eq!(sh.ok(&["query", "content:\"weekly\""]), format!("{id}\n"));
}

#[test]
fn watch_prints_deliveries() {
    let dir = tempfile::tempdir().unwrap();
    let sh = Shell { store: dir.path() };
    sh.ok(&["init"]);
    sh.ok(&["schema", "define", "sync-token"]);
    let a = sh.create("plain");
    let script = dir.path().join("script.txt");
    std::fs::write(
        &script,
        format!("enforce {a} sync-token\nset {a} n 1\nunenforce {a} sync-token\nenforce {a} sync-token\n"),
    )
    .unwrap();
    let out = sh.ok(&["watch", "schema:\"sync-token\"", "--script", script.to_str().unwrap()]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2, "{out}");
    for l in &lines {
        let (seq, doc) = l.split_once('\t').unwrap();
        seq.parse::<u64>().unwrap();
        assert_eq!(doc, a);
    }
    let out = sh.ok(&[
        "watch",
        "schema:\"sync-token\"",
        "--script",
        script.to_str().unwrap(),
        "--max",
        "1",
    ]);
    assert_eq!(out.lines().count(), 1);
}

#[test]
fn demo_pipeline_completes() {
    let o = Command::new(env!("CARGO_BIN_EXE_harland"))
        .args(["demo-pipeline", "--docs", "100"])
        .env_remove("HARLAND_STORE")
        .output()
        .unwrap();
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}{}", stderr(&o));
    assert!(out.contains("completed 100\n"), "{out}");
    assert!(out.contains("count decreased false\n"), "{out}");
    assert!(out.contains("documents 0 -> 100\n"), "{out}");
}

#[test]
fn flush_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let sh = Shell { store: dir.path() };
    sh.ok(&["init"]);
    assert_eq!(sh.ok(&["flush"]), "clean\n");
    sh.create("plain");
    let stats = sh.ok(&["stats"]);
    assert!(stats.contains("documents: 1\n"), "{stats}");
    let records = sh.ok(&["--format", "records", "stats"]);
    assert!(records.contains("documents\t1\n"), "{records}");
}
