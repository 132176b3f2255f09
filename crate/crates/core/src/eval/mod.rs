//! Running benchmarks against chat endpoints and offline baselines.
//!
//! Every finished item is appended to a newline-delimited JSON journal, so an
//! interrupted run picks up where it stopped without re-querying anything.

mod client;
pub mod stub;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    parse_chat_response, ChatClient, Completion, EndpointConfig, EndpointError, RetryPolicy, DEFAULT_API_KEY_ENV,
};

use crate::dataset::{render_judge_prompt, render_prompt, Benchmark};
use crate::recognizer::Recognizer;
use crate::sampling::{self, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Positive,
    Negative,
    Unknown,
}

impl Prediction {
    pub fn is_correct(self, label: Label) -> bool {
        matches!(
            (self, label),
            (Prediction::Positive, Label::Positive) | (Prediction::Negative, Label::Negative)
        )
    }

    pub fn flipped(self) -> Prediction {
        match self {
            Prediction::Positive => Prediction::Negative,
            Prediction::Negative => Prediction::Positive,
            Prediction::Unknown => Prediction::Unknown,
        }
    }
}

impl From<Label> for Prediction {
    fn from(label: Label) -> Self {
        match label {
            Label::Positive => Prediction::Positive,
            Label::Negative => Prediction::Negative,
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

/// Class of the last standalone `yes` / `no` (any case) in the completion.
///
/// A token is standalone when it is not glued to letters, digits, `_` or `-`,
/// so `t-yes-like` does not count.
pub fn extract_prediction(completion: &str) -> Prediction {
    completion
        .split(|c: char| !is_word_char(c))
        .rev()
        .find_map(|w| {
            if w.eq_ignore_ascii_case("yes") {
                Some(Prediction::Positive)
            } else if w.eq_ignore_ascii_case("no") {
                Some(Prediction::Negative)
            } else {
                None
            }
        })
        .unwrap_or(Prediction::Unknown)
}

/// Offline reference predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    Oracle,
    Random { seed: u64 },
    AlwaysYes,
    AlwaysNo,
}

impl Baseline {
    pub fn name(&self) -> String {
        match self {
            Baseline::Oracle => "baseline:oracle".into(),
            Baseline::Random { seed } => format!("baseline:random:{seed}"),
            Baseline::AlwaysYes => "baseline:always-yes".into(),
            Baseline::AlwaysNo => "baseline:always-no".into(),
        }
    }

    /// Parses `oracle`, `random`, `always-yes`, `always-no`, with or without
    /// a `baseline:` prefix. `random` takes its seed from `seed`.
    pub fn parse(name: &str, seed: u64) -> Option<Baseline> {
        let name = name.strip_prefix("baseline:").unwrap_or(name);
        match name {
            "oracle" => Some(Baseline::Oracle),
            "random" => Some(Baseline::Random { seed }),
            "always-yes" | "yes" => Some(Baseline::AlwaysYes),
            "always-no" | "no" => Some(Baseline::AlwaysNo),
            _ => name
                .strip_prefix("random:")
                .and_then(|s| s.parse().ok())
                .map(|seed| Baseline::Random { seed }),
        }
    }

    fn predict(&self, grammar_id: &str, example_id: usize, accepted: impl FnOnce() -> bool) -> Prediction {
        match self {
            Baseline::Oracle => {
                if accepted() {
                    Prediction::Positive
                } else {
                    Prediction::Negative
                }
            }
            Baseline::Random { seed } => {
                if coin(*seed, grammar_id, example_id) {
                    Prediction::Positive
                } else {
                    Prediction::Negative
                }
            }
            Baseline::AlwaysYes => Prediction::Positive,
            Baseline::AlwaysNo => Prediction::Negative,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fair coin keyed by item, independent of evaluation order.
fn coin(seed: u64, grammar_id: &str, example_id: usize) -> bool {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in grammar_id.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h) ^ example_id as u64) >> 63 == 1
}

pub enum Model {
    Endpoint(EndpointConfig),
    Baseline(Baseline),
}

impl Model {
    pub fn name(&self) -> String {
        match self {
            Model::Endpoint(c) => c.model_name.clone(),
            Model::Baseline(b) => b.name(),
        }
    }
}

/// One evaluated (grammar, example) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub grammar_id: String,
    /// Index into the benchmark's example list.
    pub example_id: usize,
    pub label: Label,
    pub length: usize,
    pub prediction: Prediction,
    pub raw_completion: String,
    pub completion_tokens: u64,
    pub reasoning_tokens: Option<u64>,
    /// Seconds spent on the item, retries included.
    pub wall_time: f64,
    pub attempts: u32,
    /// Set when the endpoint kept failing; the prediction is then Unknown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        self.prediction.is_correct(self.label)
    }

    pub fn key(&self) -> (&str, usize) {
        (&self.grammar_id, self.example_id)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("journal is inconsistent at line {line}: {reason}")]
    JournalCorrupt { line: usize, reason: String },
    #[error("invalid endpoint configuration: {0}")]
    InvalidConfig(String),
    #[error("label lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("no items to compare")]
    EmptyInput,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Keep at most this many examples per (length, label) in each benchmark.
    pub subsample_per_length: Option<usize>,
    pub subsample_seed: u64,
    /// Re-query items whose journal entry carries an endpoint error.
    pub retry_errors: bool,
    /// Worker threads; defaults to the endpoint's `max_parallel_requests`
    /// or to rayon's thread count for baselines.
    pub workers: Option<usize>,
}

/// (benchmark index, example index) pairs to evaluate, in order.
pub fn eval_items(benchmarks: &[Benchmark], options: &EvalOptions) -> Vec<(usize, usize)> {
    let mut items = Vec::new();
    for (b, bench) in benchmarks.iter().enumerate() {
        match options.subsample_per_length {
            Some(cap) => {
                let seed = options.subsample_seed ^ (b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                items.extend(sampling::subsample_indices(&bench.examples, cap, seed).into_iter().map(|e| (b, e)));
            }
            None => items.extend((0..bench.examples.len()).map(|e| (b, e))),
        }
    }
    items
}

/// Reads a journal. A final line without a newline that fails to parse is
/// treated as a write cut short by a crash and ignored.
pub fn read_journal(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    Ok(read_journal_inner(path)?.0)
}

/// Records plus the byte length of the well-formed prefix.
fn read_journal_inner(path: &Path) -> Result<(Vec<EvalRecord>, u64), EvalError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    for (i, chunk) in text.split_inclusive('\n').enumerate() {
        let complete = chunk.ends_with('\n');
        let line = chunk.trim_end();
        if line.is_empty() {
            offset += chunk.len();
            continue;
        }
        match serde_json::from_str::<EvalRecord>(line) {
            Ok(r) if complete => records.push(r),
            Ok(_) | Err(_) if !complete => {
                log::warn!("ignoring truncated final journal line {}", i + 1);
                break;
            }
            Err(e) => {
                return Err(EvalError::JournalCorrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
            Ok(_) => unreachable!(),
        }
        offset += chunk.len();
    }
    Ok((records, offset as u64))
}

enum Runner<'a> {
    Endpoint(Box<ChatClient>),
    Baseline(&'a Baseline),
}

impl Runner<'_> {
    fn evaluate(&self, model: &str, bench: &Benchmark, example_id: usize, recognizer: &Recognizer) -> EvalRecord {
        let example = &bench.examples[example_id];
        let start = Instant::now();
        let (raw, completion_tokens, reasoning_tokens, attempts, error) = match self {
            Runner::Endpoint(client) => {
                let prompt = render_prompt(&bench.grammar, &example.tokens);
                match client.complete(&prompt) {
                    (Ok(c), n) => (c.text, c.completion_tokens, c.reasoning_tokens, n, None),
                    (Err(e), n) => (String::new(), 0, None, n, Some(e.to_string())),
                }
            }
            Runner::Baseline(b) => {
                let p = b.predict(&bench.id, example_id, || recognizer.recognize(&example.tokens));
                let raw = match p {
                    Prediction::Positive => "Yes",
                    _ => "No",
                };
                (raw.to_string(), 0, None, 1, None)
            }
        };
        EvalRecord {
            model: model.to_string(),
            grammar_id: bench.id.clone(),
            example_id,
            label: example.label,
            length: example.len(),
            prediction: extract_prediction(&raw),
            raw_completion: raw,
            completion_tokens,
            reasoning_tokens,
            wall_time: start.elapsed().as_secs_f64(),
            attempts,
            error,
        }
    }
}

/// Evaluates every selected example, appending each finished record to
/// `journal`. Items already in the journal are not re-run.
///
/// Returns one record per item, in benchmark and example order. Items whose
/// endpoint requests failed after all retries are still returned (and
/// journaled) with an `error` and an Unknown prediction.
pub fn run_eval(
    benchmarks: &[Benchmark],
    model: &Model,
    journal: &Path,
    options: &EvalOptions,
) -> Result<Vec<EvalRecord>, EvalError> {
    let model_name = model.name();
    let items = eval_items(benchmarks, options);
    let index: HashMap<(&str, usize), usize> = items
        .iter()
        .enumerate()
        .map(|(i, &(b, e))| ((benchmarks[b].id.as_str(), e), i))
        .collect();
    if index.len() != items.len() {
        return Err(EvalError::InvalidConfig("benchmark ids are not unique".into()));
    }

    let (previous, good_len) = read_journal_inner(journal)?;
    let mut done: Vec<Option<EvalRecord>> = vec![None; items.len()];
    for (line, rec) in previous.into_iter().enumerate() {
        let corrupt = |reason: String| EvalError::JournalCorrupt { line: line + 1, reason };
        if rec.model != model_name {
            return Err(corrupt(format!("record is for model `{}`, not `{model_name}`", rec.model)));
        }
        let Some(&i) = index.get(&rec.key()) else {
            return Err(corrupt(format!(
                "item ({}, {}) is not part of this run",
                rec.grammar_id, rec.example_id
            )));
        };
        let (b, e) = items[i];
        let example = &benchmarks[b].examples[e];
        if rec.label != example.label || rec.length != example.len() {
            return Err(corrupt(format!("item ({}, {}) disagrees with the benchmark", rec.grammar_id, e)));
        }
        match &done[i] {
            Some(prev) if prev.error.is_none() => {
                return Err(corrupt(format!("duplicate item ({}, {})", rec.grammar_id, e)));
            }
            _ => done[i] = Some(rec),
        }
    }
    let pending: Vec<usize> = (0..items.len())
        .filter(|&i| match &done[i] {
            None => true,
            Some(r) => r.error.is_some() && options.retry_errors,
        })
        .collect();
    log::info!(
        "{}: {} of {} items already journaled, {} to run",
        model_name,
        items.len() - pending.len(),
        items.len(),
        pending.len()
    );

    if !pending.is_empty() {
        let runner = match model {
            Model::Endpoint(cfg) => {
                cfg.validate().map_err(EvalError::InvalidConfig)?;
                Runner::Endpoint(Box::new(ChatClient::new(cfg.clone())))
            }
            Model::Baseline(b) => Runner::Baseline(b),
        };
        let workers = options
            .workers
            .unwrap_or(match model {
                Model::Endpoint(cfg) => cfg.max_parallel_requests,
                Model::Baseline(_) => rayon::current_num_threads(),
            })
            .clamp(1, pending.len());

        let file = OpenOptions::new().create(true).append(true).open(journal)?;
        // Drop a torn tail left by a crash before appending.
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        let mut writer = BufWriter::new(file);
        let recognizers: Vec<Recognizer> = benchmarks.iter().map(|b| Recognizer::new(&b.grammar)).collect();
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let mut write_error = None;

        thread::scope(|s| {
            let (tx, rx) = mpsc::channel::<(usize, EvalRecord)>();
            for _ in 0..workers {
                let tx = tx.clone();
                let (runner, next, stop, pending, items) = (&runner, &next, &stop, &pending, &items);
                let (recognizers, model_name) = (&recognizers, &model_name);
                s.spawn(move || loop {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let k = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&i) = pending.get(k) else { break };
                    let (b, e) = items[i];
                    let rec = runner.evaluate(model_name, &benchmarks[b], e, &recognizers[b]);
                    if tx.send((i, rec)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (i, rec) in rx {
                if write_error.is_none() {
                    let res = serde_json::to_writer(&mut writer, &rec)
                        .map_err(io::Error::from)
                        .and_then(|_| writer.write_all(b"\n"))
                        .and_then(|_| writer.flush());
                    if let Err(e) = res {
                        stop.store(true, Ordering::Relaxed);
                        write_error = Some(e);
                    }
                }
                done[i] = Some(rec);
            }
        });
        if let Some(e) = write_error {
            return Err(e.into());
        }
    }
    Ok(done.into_iter().map(|r| r.expect("every item evaluated")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyLabel {
    Heuristic,
    RuleBased,
    Code,
    Unknown,
}

impl StrategyLabel {
    pub const ALL: [StrategyLabel; 4] = [
        StrategyLabel::Heuristic,
        StrategyLabel::RuleBased,
        StrategyLabel::Code,
        StrategyLabel::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyLabel::Heuristic => "heuristic",
            StrategyLabel::RuleBased => "rule-based",
            StrategyLabel::Code => "code",
            StrategyLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for StrategyLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match parse_strategy(s) {
            StrategyLabel::Unknown if !s.trim().eq_ignore_ascii_case("unknown") => {
                Err(format!("unknown strategy `{s}`"))
            }
            l => Ok(l),
        }
    }
}

/// Last category name in a judge reply: `heuristic`, `rule-based` (or
/// `rule based`) or `code`, any case.
pub fn parse_strategy(reply: &str) -> StrategyLabel {
    let words: Vec<String> = reply
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut found = StrategyLabel::Unknown;
    for (i, w) in words.iter().enumerate() {
        match w.as_str() {
            "heuristic" => found = StrategyLabel::Heuristic,
            "code" => found = StrategyLabel::Code,
            "based" if i > 0 && words[i - 1] == "rule" => found = StrategyLabel::RuleBased,
            _ => {}
        }
    }
    found
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub strategy: StrategyLabel,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Asks the judge to categorize one completion. Endpoint failures give
/// Unknown with the error attached.
pub fn classify_strategy(completion: &str, judge: &ChatClient) -> Judgement {
    match judge.complete(&render_judge_prompt(completion)).0 {
        Ok(c) => Judgement {
            strategy: parse_strategy(&c.text),
            reply: c.text,
            error: None,
        },
        Err(e) => Judgement {
            strategy: StrategyLabel::Unknown,
            reply: String::new(),
            error: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRecord {
    pub grammar_id: String,
    pub example_id: usize,
    pub length: usize,
    #[serde(flatten)]
    pub judgement: Judgement,
}

/// Classifies every record's completion, `max_parallel_requests` at a time.
pub fn judge_records(records: &[EvalRecord], judge: &EndpointConfig) -> Result<Vec<StrategyRecord>, EvalError> {
    judge.validate().map_err(EvalError::InvalidConfig)?;
    let client = ChatClient::new(judge.clone());
    let next = AtomicUsize::new(0);
    let mut out: Vec<Option<StrategyRecord>> = vec![None; records.len()];
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel();
        for _ in 0..judge.max_parallel_requests.min(records.len().max(1)) {
            let tx = tx.clone();
            let (client, next) = (&client, &next);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(r) = records.get(i) else { break };
                let judgement = classify_strategy(&r.raw_completion, client);
                let rec = StrategyRecord {
                    grammar_id: r.grammar_id.clone(),
                    example_id: r.example_id,
                    length: r.length,
                    judgement,
                };
                if tx.send((i, rec)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, rec) in rx {
            out[i] = Some(rec);
        }
    });
    Ok(out.into_iter().map(|r| r.expect("every record judged")).collect())
}

/// Fraction of aligned positions where the two label lists agree.
pub fn judge_agreement(a: &[StrategyLabel], b: &[StrategyLabel]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Keys present in both record sets, for aligning strategy files.
pub fn common_keys<'a>(a: &'a [StrategyRecord], b: &'a [StrategyRecord]) -> HashSet<(&'a str, usize)> {
    let left: HashSet<_> = a.iter().map(|r| (r.grammar_id.as_str(), r.example_id)).collect();
    b.iter()
        .map(|r| (r.grammar_id.as_str(), r.example_id))
        .filter(|k| left.contains(k))
        .collect()
}
