use std::collections::BTreeSet;
use std::fs;
use std::time::Duration;

use relic::dataset::{prompt_query, Benchmark};
use relic::eval::stub::{Faults, StubReply, StubServer};
use relic::eval::{
    self, Baseline, EndpointConfig, EvalError, EvalOptions, EvalRecord, Model, Prediction, RetryPolicy,
    StrategyLabel,
};
use relic::generate::GenParams;
use relic::metrics;
use relic::sampling::{Label, SamplingPlan};
use relic::Grammar;

fn benchmarks() -> Vec<Benchmark> {
    let grammars = [
        "S -> NT1 NT2\nS -> NT1 NT3\nNT3 -> NT1 NT2\nNT3 -> NT1 NT3\nNT1 -> 't1'\nNT2 -> 't2'",
        "S -> NT1 NT1\nS -> NT2 NT2\nNT1 -> 't1'\nNT2 -> NT1 NT1\nNT2 -> NT2 NT2\nNT2 -> 't2'",
    ];
    grammars
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let g: Grammar = text.parse().unwrap();
            let plan = SamplingPlan {
                max_len: 8,
                per_len_cap: 3,
                goal_total: 48,
                retry_cap: 40,
                seed: i as u64,
            };
            let s = g.stats();
            Benchmark::build(format!("g{i}"), g, GenParams::new(s.n_term, s.n_nonterm, s.n_lex, s.n_nonlex, 0), plan)
        })
        .collect()
}

/// Says Yes iff the queried string has even length.
fn parity_stub(faults: Faults) -> StubServer {
    StubServer::with_faults(
        |prompt| {
            let tokens = prompt_query(prompt).expect("prompt carries a query");
            let answer = if tokens.len().is_multiple_of(2) { "Yes" } else { "No" };
            StubReply::text(format!("Thinking about {} tokens. Answer: {answer}", tokens.len()))
        },
        faults,
    )
    .unwrap()
}

fn endpoint(server: &StubServer) -> EndpointConfig {
    EndpointConfig {
        max_parallel_requests: 3,
        retry: RetryPolicy {
            max_retries: 3,
            initial_backoff_ms: 1,
            max_backoff_ms: 5,
        },
        timeout_secs: 10,
        api_key_env: "RELIC_TEST_NO_SUCH_KEY".into(),
        ..EndpointConfig::new(server.base_url(), "stub-parity")
    }
}

fn key_set(records: &[EvalRecord]) -> BTreeSet<(String, usize, Prediction, String, u64)> {
    records
        .iter()
        .map(|r| {
            (
                r.grammar_id.clone(),
                r.example_id,
                r.prediction,
                r.raw_completion.clone(),
                r.completion_tokens,
            )
        })
        .collect()
}

#[test]
fn stub_endpoint_run_and_resume() {
    let benches = benchmarks();
    let total: usize = benches.iter().map(|b| b.examples.len()).sum();
    let server = parity_stub(Faults::default());
    let model = Model::Endpoint(endpoint(&server));
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j.ndjson");

    let records = eval::run_eval(&benches, &model, &journal, &EvalOptions::default()).unwrap();
    assert_eq!(records.len(), total);
    assert_eq!(server.request_count(), total);
    for r in &records {
        let expected = if r.length % 2 == 0 { Prediction::Positive } else { Prediction::Negative };
        assert_eq!(r.prediction, expected);
        assert_eq!(r.attempts, 1);
        assert!(r.completion_tokens > 0);
    }

    // A complete journal means no further requests.
    let again = eval::run_eval(&benches, &model, &journal, &EvalOptions::default()).unwrap();
    assert_eq!(server.request_count(), total);
    assert_eq!(again, records);

    // Cut the journal mid-line, as a crash would, and resume.
    let text = fs::read_to_string(&journal).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let keep = lines.len() / 3;
    let mut cut = lines[..keep].join("\n");
    cut.push('\n');
    cut.push_str(&lines[keep][..lines[keep].len() / 2]);
    fs::write(&journal, cut).unwrap();
    assert_eq!(eval::read_journal(&journal).unwrap().len(), keep);
    let before = server.request_count();
    let resumed = eval::run_eval(&benches, &model, &journal, &EvalOptions::default()).unwrap();
    assert_eq!(server.request_count() - before, total - keep);
    assert_eq!(key_set(&resumed), key_set(&records));
    assert_eq!(key_set(&eval::read_journal(&journal).unwrap()), key_set(&records));
}

#[test]
fn transient_failures_are_retried() {
    let benches = benchmarks();
    let server = parity_stub(Faults {
        fail_first: 2,
        fail_status: 503,
        delay: Duration::ZERO,
    });
    let mut cfg = endpoint(&server);
    cfg.max_parallel_requests = 1;
    let dir = tempfile::tempdir().unwrap();
    let records =
        eval::run_eval(&benches[..1], &Model::Endpoint(cfg), &dir.path().join("j"), &EvalOptions::default()).unwrap();
    assert_eq!(records[0].attempts, 3);
    assert!(records.iter().all(|r| r.error.is_none()));
}

#[test]
fn exhausted_retries_are_recorded_not_fatal() {
    let benches = benchmarks();
    let server = parity_stub(Faults {
        fail_first: usize::MAX,
        fail_status: 500,
        delay: Duration::ZERO,
    });
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j");
    let model = Model::Endpoint(endpoint(&server));
    let records = eval::run_eval(&benches[..1], &model, &journal, &EvalOptions::default()).unwrap();
    assert_eq!(records.len(), benches[0].examples.len());
    assert!(records.iter().all(|r| r.prediction == Prediction::Unknown && r.error.is_some() && r.attempts == 4));

    // Errored items are retried only on request.
    let n = server.request_count();
    eval::run_eval(&benches[..1], &model, &journal, &EvalOptions::default()).unwrap();
    assert_eq!(server.request_count(), n);
    let opts = EvalOptions {
        retry_errors: true,
        ..Default::default()
    };
    eval::run_eval(&benches[..1], &model, &journal, &opts).unwrap();
    assert_eq!(server.request_count(), n + 4 * records.len());
}

#[test]
fn client_errors_are_not_retried() {
    let benches = benchmarks();
    let server = parity_stub(Faults {
        fail_first: usize::MAX,
        fail_status: 400,
        delay: Duration::ZERO,
    });
    let dir = tempfile::tempdir().unwrap();
    let records = eval::run_eval(
        &benches[..1],
        &Model::Endpoint(endpoint(&server)),
        &dir.path().join("j"),
        &EvalOptions::default(),
    )
    .unwrap();
    assert!(records.iter().all(|r| r.attempts == 1));
}

#[test]
fn journal_mismatches_are_rejected() {
    let benches = benchmarks();
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("j");
    eval::run_eval(&benches, &Model::Baseline(Baseline::Oracle), &journal, &EvalOptions::default()).unwrap();

    let err = eval::run_eval(&benches, &Model::Baseline(Baseline::AlwaysYes), &journal, &EvalOptions::default());
    assert!(matches!(err, Err(EvalError::JournalCorrupt { line: 1, .. })));

    let err = eval::run_eval(&benches[1..], &Model::Baseline(Baseline::Oracle), &journal, &EvalOptions::default());
    assert!(matches!(err, Err(EvalError::JournalCorrupt { .. })));

    let text = fs::read_to_string(&journal).unwrap();
    let first = text.lines().next().unwrap();
    fs::write(&journal, format!("{first}\n{first}\n")).unwrap();
    let err = eval::run_eval(&benches, &Model::Baseline(Baseline::Oracle), &journal, &EvalOptions::default());
    assert!(matches!(err, Err(EvalError::JournalCorrupt { line: 2, .. })));

    fs::write(&journal, "not json\n").unwrap();
    assert!(matches!(eval::read_journal(&journal), Err(EvalError::JournalCorrupt { line: 1, .. })));
}

#[test]
fn baselines() {
    let benches = benchmarks();
    let dir = tempfile::tempdir().unwrap();
    let run = |b: Baseline, name: &str| {
        eval::run_eval(&benches, &Model::Baseline(b), &dir.path().join(name), &EvalOptions::default()).unwrap()
    };
    let oracle = run(Baseline::Oracle, "o");
    assert!(oracle.iter().all(|r| r.is_correct()));
    assert_eq!(metrics::balanced_accuracy(&oracle).unwrap().mean, 1.0);
    assert_eq!(metrics::macro_f1(&oracle).unwrap().mean, 1.0);
    let yes = run(Baseline::AlwaysYes, "y");
    assert!(yes.iter().all(|r| r.prediction == Prediction::Positive));
    assert_eq!(metrics::balanced_accuracy(&yes).unwrap().mean, 0.5);
    let no = run(Baseline::AlwaysNo, "n");
    assert!(no.iter().all(|r| r.prediction == Prediction::Negative));
    let r1 = run(Baseline::Random { seed: 1 }, "r1");
    let r1b = run(Baseline::Random { seed: 1 }, "r1b");
    assert_eq!(key_set(&r1), key_set(&r1b));
    assert!(r1.iter().any(|r| r.prediction == Prediction::Positive));
    assert!(r1.iter().any(|r| r.prediction == Prediction::Negative));
}

#[test]
fn subsampled_runs_cover_the_subsample() {
    let benches = benchmarks();
    let dir = tempfile::tempdir().unwrap();
    let opts = EvalOptions {
        subsample_per_length: Some(1),
        subsample_seed: 5,
        ..Default::default()
    };
    let records = eval::run_eval(&benches, &Model::Baseline(Baseline::Oracle), &dir.path().join("j"), &opts).unwrap();
    let mut cells = BTreeSet::new();
    for r in &records {
        assert!(cells.insert((r.grammar_id.clone(), r.length, r.label)));
    }
    let expected: BTreeSet<_> = benches
        .iter()
        .flat_map(|b| b.examples.iter().map(|e| (b.id.clone(), e.len(), e.label)))
        .collect();
    assert_eq!(cells, expected);
}

#[test]
fn judge_through_stub() {
    let server = StubServer::start(|prompt| {
        assert!(prompt.contains("`heuristic`"));
        if prompt.contains("PARSE-TRACE") {
            StubReply::text("The model builds a parse. Final classification: rule-based")
        } else {
            StubReply::text("It guesses from length, so: heuristic")
        }
    })
    .unwrap();
    let judge = endpoint(&server);
    let mk = |id: usize, text: &str| EvalRecord {
        model: "m".into(),
        grammar_id: "g".into(),
        example_id: id,
        label: Label::Positive,
        length: id + 1,
        prediction: Prediction::Positive,
        raw_completion: text.into(),
        completion_tokens: 0,
        reasoning_tokens: None,
        wall_time: 0.0,
        attempts: 1,
        error: None,
    };
    let records = vec![mk(0, "PARSE-TRACE: S -> NT1 NT1"), mk(1, "long string, probably yes")];
    let judged = eval::judge_records(&records, &judge).unwrap();
    let labels: Vec<_> = judged.iter().map(|j| j.judgement.strategy).collect();
    assert_eq!(labels, vec![StrategyLabel::RuleBased, StrategyLabel::Heuristic]);
    assert_eq!(judged[1].length, 2);

    let always = StubServer::start(|_| StubReply::text("heuristic")).unwrap();
    let judged = eval::judge_records(&records, &endpoint(&always)).unwrap();
    assert!(judged.iter().all(|j| j.judgement.strategy == StrategyLabel::Heuristic));
}

#[test]
fn unreachable_judge_gives_unknown() {
    let server = parity_stub(Faults::default());
    let mut cfg = endpoint(&server);
    drop(server);
    cfg.retry.max_retries = 0;
    let client = eval::ChatClient::new(cfg);
    let j = eval::classify_strategy("anything", &client);
    assert_eq!(j.strategy, StrategyLabel::Unknown);
    assert!(j.error.is_some());
}
