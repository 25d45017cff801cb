mod common;

use hidialog::ir::{load_corpus, parse_corpus, validate_instance, write_corpus, Corpus, Schema};
use hidialog::synthetic::{generate, schema, SyntheticSpec};
use hidialog::Error;
use proptest::prelude::*;

fn fixture_lines() -> Vec<String> {
    let corpus = generate(&SyntheticSpec {
        instances: 100,
        ..Default::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    write_corpus(&corpus, &mut buf).unwrap();
    String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn malformed_line_57_is_reported_and_nothing_returned() {
    let mut lines = fixture_lines();
    assert_eq!(lines.len(), 100);
    lines[56] = r#"{"id": "broken", "turns": [ "#.to_string();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let result = load_corpus(&path, &schema(4).unwrap());
    match result {
        Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 57),
        other => panic!("expected a malformed-line error, got {other:?}"),
    }
}

#[test]
fn well_formed_fixture_parses_completely() {
    let text = fixture_lines().join("\n");
    let corpus = parse_corpus(text.as_bytes(), &schema(4).unwrap()).unwrap();
    assert_eq!(corpus.instances.len(), 100);
}

#[test]
fn unknown_label_names_line() {
    let mut lines = fixture_lines();
    lines[3] = lines[3]
        .replace("per:friends", "per:nemesis")
        .replace("per:siblings", "per:nemesis");
    lines[3] = lines[3]
        .replace("per:boss", "per:nemesis")
        .replace("per:subordinate", "per:nemesis");
    let err = parse_corpus(lines.join("\n").as_bytes(), &schema(4).unwrap()).unwrap_err();
    assert_eq!(err.code(), "UNKNOWN_CLASS");
    assert!(matches!(err, Error::UnknownClass { line: 4, .. }));
}

fn class_schema() -> Schema {
    Schema::new((0..5).map(|c| format!("rel{c}")).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn write_then_parse_round_trips(seeds in proptest::collection::vec(any::<u64>(), 1..20)) {
        let schema = class_schema();
        let mut corpus = Corpus::empty(&schema);
        for (i, s) in seeds.iter().enumerate() {
            let mut inst = common::random_instance(*s, 8, 2, 5);
            inst.id = format!("i{i}");
            prop_assert!(validate_instance(&inst, 5).is_empty());
            corpus.instances.push(inst);
        }
        let mut buf = Vec::new();
        write_corpus(&corpus, &mut buf).unwrap();
        let back = parse_corpus(buf.as_slice(), &schema).unwrap();
        prop_assert_eq!(back, corpus);
    }
}
