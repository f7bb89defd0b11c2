//! Library-level pipeline tests: corpus in, judged outcomes out, with a
//! mock backend and a real on-disk cache.

use std::path::Path;

use gveval::corpus::{load_corpus, read_outcomes, CorpusFormat, OutcomeLine, OutcomeWriter};
use gveval::judge::judge_record;
use gveval::model::{Dimensionality, EvalConfig, EvalMode, VisualKind};
use gveval::oracle::{Client, MockBackend, ResponseCache};
use gveval::stats::{correlate_corpus, HumanProjection};

fn write_corpus(path: &Path, lines: &[&str]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn client_with(fixture_path: &Path, cache_dir: &Path) -> Client {
    let backend = MockBackend::from_fixture(fixture_path).unwrap();
    Client::new(Box::new(backend)).with_cache(ResponseCache::new(cache_dir))
}

#[test]
fn corpus_to_correlation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(
        &corpus_path,
        &[
            r#"{"caption":"a dog runs","human":{"kind":"expert_mean","value":1.0},"id":"a","references":["a cat sits on a mat"]}"#,
            r#"{"caption":"a cat rests on a mat","human":{"kind":"expert_mean","value":3.0},"id":"b","references":["a cat sits on a mat"]}"#,
            r#"{"caption":"a cat sits on a mat","human":{"kind":"expert_mean","value":4.0},"id":"c","references":["a cat sits on a mat"]}"#,
        ],
    );

    let fixture_path = dir.path().join("fixture.json");
    std::fs::write(
        &fixture_path,
        r#"[
            {"match":"default","response":{"text":"Poor match.\n$20$","tokens":[
                {"text":"Poor match.\n$","logprob":-0.1,"alternatives":[]},
                {"text":"20","logprob":-0.2,"alternatives":[["20",-0.2],["25",-1.8]]},
                {"text":"$","logprob":-0.1,"alternatives":[]}]}},
            {"match":"default","response":{"text":"Close.\n$70$","tokens":[
                {"text":"Close.\n$","logprob":-0.1,"alternatives":[]},
                {"text":"70","logprob":-0.3,"alternatives":[["70",-0.3],["75",-1.5]]},
                {"text":"$","logprob":-0.1,"alternatives":[]}]}},
            {"match":"default","response":{"text":"Exact.\n$95$","tokens":[
                {"text":"Exact.\n$","logprob":-0.1,"alternatives":[]},
                {"text":"95","logprob":-0.05,"alternatives":[["95",-0.05]]},
                {"text":"$","logprob":-0.1,"alternatives":[]}]}}
        ]"#,
    )
    .unwrap();

    let config = EvalConfig::default();
    let client = client_with(&fixture_path, &dir.path().join("cache"));
    let mut records = load_corpus(&corpus_path, CorpusFormat::Canonical).unwrap();

    let outcomes_path = dir.path().join("outcomes.jsonl");
    let mut writer = OutcomeWriter::append(&outcomes_path).unwrap();
    for record in &records {
        let outcome =
            judge_record(&client, &config, "judge-1", VisualKind::Image, record, None).unwrap();
        assert!(!outcome.cache_hit);
        writer.write(&OutcomeLine::from(&outcome)).unwrap();
    }

    let outcomes = read_outcomes(&outcomes_path).unwrap();
    assert_eq!(outcomes.len(), 3);
    for (record, outcome) in records.iter_mut().zip(&outcomes) {
        assert_eq!(record.id, outcome.id);
        record
            .metrics
            .insert("judged".to_string(), outcome.expected_score);
    }

    let entry = correlate_corpus(&records, "judged", HumanProjection::Auto).unwrap();
    assert_eq!(entry.n, 3);
    // Judged scores 20 < 70 < 95 follow the human means 1 < 3 < 4 exactly.
    assert!((entry.tau_b - 1.0).abs() < 1e-12);

    // The same records again: every reply now comes from the cache.
    for record in load_corpus(&corpus_path, CorpusFormat::Canonical).unwrap() {
        let outcome = judge_record(
            &client,
            &config,
            "judge-1",
            VisualKind::Image,
            &record,
            None,
        )
        .unwrap();
        assert!(outcome.cache_hit, "record {} missed the cache", record.id);
    }
}

#[test]
fn rubric_outcomes_carry_all_four_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.jsonl");
    write_corpus(
        &corpus_path,
        &[
            r#"{"caption":"a chef chops onions quickly","id":"v1","references":["a cook slices vegetables"],"visual":{"kind":"video","path":"clips/v1"}}"#,
        ],
    );

    let fixture_path = dir.path().join("fixture.json");
    std::fs::write(
        &fixture_path,
        r#"[{"match":"default","response":{"text":"Assessment done. α78α β81β ψ95ψ δ66δ","tokens":[
            {"text":"Assessment done. α","logprob":-0.1,"alternatives":[]},
            {"text":"78","logprob":-0.35667494393873245,"alternatives":[["78",-0.35667494393873245],["80",-1.2039728043259361]]},
            {"text":"α β81β ψ95ψ δ66δ","logprob":-0.1,"alternatives":[]}]}}]"#,
    )
    .unwrap();

    let config = EvalConfig {
        mode: EvalMode::RefOnly,
        dimensionality: Dimensionality::Accr,
        ..EvalConfig::default()
    };
    let client = client_with(&fixture_path, &dir.path().join("cache"));
    let records = load_corpus(&corpus_path, CorpusFormat::Canonical).unwrap();

    let outcome = judge_record(
        &client,
        &config,
        "judge-1",
        VisualKind::Video,
        &records[0],
        None,
    )
    .unwrap();
    let accr = outcome.accr.as_ref().expect("rubric scores present");
    assert_eq!(accr.raw, [78, 81, 95, 66]);
    // Accuracy has alternatives (0.7 on 78, 0.3 on 80); the rest are
    // point masses without token evidence at their spans.
    assert!((accr.expected[0] - 78.6).abs() < 1e-9);
    assert_eq!(&accr.expected[1..], &[81.0, 95.0, 66.0]);
    // The overall numbers are the rubric mean and the mixture mean.
    assert_eq!(outcome.raw_score, 80);
    assert!((outcome.expected_score - outcome.distribution.expectation()).abs() < 1e-12);

    let line = OutcomeLine::from(&outcome);
    assert_eq!(line.accr, Some([78, 81, 95, 66]));
    assert!(line.accr_expected.is_some());
}
