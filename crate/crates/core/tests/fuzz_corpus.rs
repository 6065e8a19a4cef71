//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets run, so regressions show up under plain `cargo test`.

use std::fs;
use std::path::PathBuf;

use harland::fuzzing;

type Check = fn(&[u8]);

fn replay(target: &str, check: Check) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
        let path = entry.unwrap().path();
        let data = fs::read(&path).unwrap();
        if std::panic::catch_unwind(|| check(&data)).is_err() {
            panic!("{} fails", path.display());
        }
        n += 1;
    }
    assert!(n > 0, "empty corpus for {target}");
}

#[test]
fn parse_query_corpus() {
    replay("parse_query", fuzzing::parse_query);
}

#[test]
fn decode_checkpoint_corpus() {
    replay("decode_checkpoint", fuzzing::decode_checkpoint);
}

#[test]
fn parse_literal_corpus() {
    replay("parse_literal", fuzzing::parse_literal_text);
}

#[test]
fn decode_value_corpus() {
    replay("decode_value", fuzzing::decode_value_field);
}

#[test]
fn corpus_seeds_exercise_the_accepting_paths() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    let read = |t: &str, f: &str| fs::read(dir.join(t).join(f)).unwrap();
    let text = |t: &str, f: &str| String::from_utf8(read(t, f)).unwrap();
    assert!(harland::query::parse(&text("parse_query", "email-todo")).is_ok());
    assert!(harland::query::parse_literal(&text("parse_literal", "subnormal")).is_ok());
    assert!(harland::store::format::decode_value(&text("decode_value", "timestamp")).is_ok());
    assert!(harland::store::format::decode_value(&text("decode_value", "non-canonical")).is_err());
    assert!(harland::store::format::decode(&read("decode_checkpoint", "todo-collection-content"))
        .is_ok());
    assert!(harland::store::format::decode(&read("decode_checkpoint", "bad-checksum")).is_err());
}

/// Random mutations of the seeds, as a cheap stand-in for a fuzzing run.
#[test]
fn mutated_seeds_keep_invariants() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(0xf022);
    let targets: [(&str, Check); 4] = [
        ("parse_query", fuzzing::parse_query),
        ("decode_checkpoint", fuzzing::decode_checkpoint),
        ("parse_literal", fuzzing::parse_literal_text),
        ("decode_value", fuzzing::decode_value_field),
    ];
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus");
    for (target, check) in targets {
        for entry in fs::read_dir(root.join(target)).unwrap() {
            let seed = fs::read(entry.unwrap().path()).unwrap();
            for _ in 0..200 {
                let mut data = seed.clone();
                for _ in 0..rng.gen_range(1..4) {
                    let at = rng.gen_range(0..=data.len());
                    match rng.gen_range(0..3) {
                        0 if at < data.len() => data[at] = rng.gen(),
                        1 if at < data.len() => {
                            data.remove(at);
                        }
                        _ => data
                            .insert(at, *b" \"\\()-.:0aeEx\t\n".get(rng.gen_range(0..15)).unwrap()),
                    }
                }
                let copy = data.clone();
                if std::panic::catch_unwind(|| check(&copy)).is_err() {
                    panic!("{target}: invariant broken for {:?}", String::from_utf8_lossy(&data));
                }
            }
        }
    }
}
