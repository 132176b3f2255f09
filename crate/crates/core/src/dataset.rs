//! Benchmark files, prompt rendering and fine-tuning export.
//!
//! A benchmark is one JSON document; a benchmark set is newline-delimited
//! JSON with one benchmark per line. Grammars are stored in their text form
//! and example tokens as arrays of `t<k>` strings.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{self, GenError, GenParams};
use crate::grammar::{Grammar, GrammarStats};
use crate::recognizer::{Recognizer, TokenString};
use crate::sampling::{self, Coverage, Example, Label, SamplingPlan};

pub const SCHEMA_VERSION: &str = "relic-benchmark/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version `{found}` (expected `{SCHEMA_VERSION}`)")]
    SchemaMismatch { found: String },
    #[error("benchmark {benchmark}: example {index} label disagrees with the grammar")]
    CorruptExample { benchmark: String, index: usize },
    #[error("benchmark {benchmark}: {what}")]
    Inconsistent { benchmark: String, what: String },
}

/// One grammar with its examples and the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub schema_version: String,
    pub id: String,
    pub grammar: Grammar,
    pub stats: GrammarStats,
    pub gen_params: GenParams,
    pub plan: SamplingPlan,
    pub examples: Vec<Example>,
    pub coverage: Coverage,
}

impl Benchmark {
    /// Samples positives and unigram negatives for `grammar` under `plan`.
    pub fn build(id: impl Into<String>, grammar: Grammar, gen_params: GenParams, plan: SamplingPlan) -> Self {
        let examples = sampling::sample_examples(&grammar, &plan);
        Benchmark::from_parts(id, grammar, gen_params, plan, examples)
    }

    pub fn from_parts(
        id: impl Into<String>,
        grammar: Grammar,
        gen_params: GenParams,
        plan: SamplingPlan,
        examples: Vec<Example>,
    ) -> Self {
        Benchmark {
            schema_version: SCHEMA_VERSION.to_string(),
            id: id.into(),
            stats: grammar.stats(),
            coverage: sampling::coverage(&examples, &plan),
            grammar,
            gen_params,
            plan,
            examples,
        }
    }

    fn inconsistent(&self, what: impl Into<String>) -> DatasetError {
        DatasetError::Inconsistent {
            benchmark: self.id.clone(),
            what: what.into(),
        }
    }

    /// Checks derived fields and re-verifies the labels selected by `verify`.
    pub fn check(&self, verify: Verify) -> Result<(), DatasetError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaMismatch {
                found: self.schema_version.clone(),
            });
        }
        let violations = self.grammar.validate();
        if !violations.is_empty() {
            return Err(self.inconsistent(violations.join("; ")));
        }
        if self.stats != self.grammar.stats() {
            return Err(self.inconsistent("stored stats do not match the grammar"));
        }
        let indices: Vec<usize> = match verify {
            Verify::All => (0..self.examples.len()).collect(),
            Verify::None => Vec::new(),
            Verify::Sample(n) if n >= self.examples.len() => (0..self.examples.len()).collect(),
            Verify::Sample(n) => {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                index::sample(&mut rng, self.examples.len(), n).into_vec()
            }
        };
        let recognizer = Recognizer::new(&self.grammar);
        for i in indices {
            let example = &self.examples[i];
            if example.is_empty() || example.len() > self.plan.max_len {
                return Err(self.inconsistent(format!("example {i} has length {}", example.len())));
            }
            let accepted = recognizer.recognize(&example.tokens);
            if accepted != (example.label == Label::Positive) {
                return Err(DatasetError::CorruptExample {
                    benchmark: self.id.clone(),
                    index: i,
                });
            }
        }
        let cov = sampling::coverage(&self.examples, &self.plan);
        if (cov.total - self.coverage.total).abs() > 1e-12
            || (cov.positive - self.coverage.positive).abs() > 1e-12
        {
            return Err(self.inconsistent("stored coverage does not match the examples"));
        }
        Ok(())
    }
}

/// Settings for a whole benchmark set: an oversampled pool of random
/// grammars, decorrelated selection, then example sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetConfig {
    pub count: usize,
    /// Upper bound for each drawn grammar parameter.
    pub cap: usize,
    /// Pool size is `count * pool_factor`.
    pub pool_factor: usize,
    pub seed: u64,
    /// Fixed parameter values; `None` means drawn per grammar.
    pub n_term: Option<usize>,
    pub n_nonterm: Option<usize>,
    pub n_lex: Option<usize>,
    pub n_nonlex: Option<usize>,
    /// Sampling settings; the seed is replaced per grammar.
    pub plan: SamplingPlan,
    /// Draws tried per pool entry before giving up on an empty language.
    pub max_attempts: usize,
}

impl SetConfig {
    pub fn new(count: usize, cap: usize, seed: u64) -> Self {
        SetConfig {
            count,
            cap,
            pool_factor: 5,
            seed,
            n_term: None,
            n_nonterm: None,
            n_lex: None,
            n_nonlex: None,
            plan: SamplingPlan::default(),
            max_attempts: 100,
        }
    }
}

/// Builds a benchmark set. The output is a pure function of `config`; pool
/// members are generated in parallel from pre-drawn seeds.
pub fn generate_benchmark_set(config: &SetConfig) -> Result<Vec<Benchmark>, GenError> {
    let pool_size = config.count * config.pool_factor.max(1);
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds: Vec<(u64, u64)> = (0..pool_size).map(|_| (master.next_u64(), master.next_u64())).collect();
    let pool: Vec<(Grammar, GenParams, u64)> = seeds
        .par_iter()
        .map(|&(param_seed, sample_seed)| {
            // An empty language redraws both the seed and, unless every
            // parameter is fixed, the parameters themselves.
            let mut rng = ChaCha8Rng::seed_from_u64(param_seed);
            for _ in 0..config.max_attempts {
                let mut params = GenParams::random(config.cap, rng.next_u64(), &mut rng);
                params.n_term = config.n_term.unwrap_or(params.n_term);
                params.n_nonterm = config.n_nonterm.unwrap_or(params.n_nonterm);
                params.n_lex = config.n_lex.unwrap_or(params.n_lex.min(params.lexical_space()));
                params.n_nonlex = config.n_nonlex.unwrap_or(params.n_nonlex.min(params.nonlexical_space()));
                match generate::generate(&params) {
                    Ok(grammar) => return Ok((grammar, params, sample_seed)),
                    Err(GenError::EmptyLanguage) => continue,
                    Err(e) => return Err(e),
                }
            }
            Err(GenError::RetriesExhausted(config.max_attempts))
        })
        .collect::<Result<_, GenError>>()?;
    let chosen: Vec<usize> = if config.count >= 3 && pool_size > config.count {
        let stats: Vec<GrammarStats> = pool.iter().map(|(g, _, _)| g.stats()).collect();
        generate::select_decorrelated(&stats, config.count, config.seed)?
    } else {
        (0..config.count).collect()
    };
    Ok(chosen
        .par_iter()
        .enumerate()
        .map(|(rank, &i)| {
            let (grammar, params, sample_seed) = &pool[i];
            let plan = SamplingPlan {
                seed: *sample_seed,
                ..config.plan
            };
            Benchmark::build(format!("g{rank:04}"), grammar.clone(), *params, plan)
        })
        .collect())
}

/// How many example labels to re-check against CYK on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verify {
    All,
    /// A fixed pseudo-random sample of this many examples per benchmark.
    Sample(usize),
    None,
}

impl Default for Verify {
    fn default() -> Self {
        Verify::Sample(50)
    }
}

fn parse_benchmark(text: &str, verify: Verify) -> Result<Benchmark, DatasetError> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_str())
        .unwrap_or("")
        .to_string();
    if found != SCHEMA_VERSION {
        return Err(DatasetError::SchemaMismatch { found });
    }
    let benchmark: Benchmark = serde_json::from_value(value)?;
    benchmark.check(verify)?;
    Ok(benchmark)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp_name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_benchmark(benchmark: &Benchmark, path: &Path) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(benchmark)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn load_benchmark(path: &Path, verify: Verify) -> Result<Benchmark, DatasetError> {
    parse_benchmark(&fs::read_to_string(path)?, verify)
}

pub fn save_benchmark_set(benchmarks: &[Benchmark], path: &Path) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    for b in benchmarks {
        serde_json::to_writer(&mut out, b)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn load_benchmark_set(path: &Path, verify: Verify) -> Result<Vec<Benchmark>, DatasetError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_benchmark(&line, verify)?);
    }
    Ok(out)
}

/// Loads either a benchmark set (one JSON document per line) or a single
/// pretty-printed benchmark document.
pub fn load_benchmarks(path: &Path, verify: Verify) -> Result<Vec<Benchmark>, DatasetError> {
    let text = fs::read_to_string(path)?;
    if serde_json::from_str::<serde_json::Value>(&text).is_ok() {
        return Ok(vec![parse_benchmark(&text, verify)?]);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_benchmark(l, verify))
        .collect()
}

const TASK_PARAGRAPH: &str = "\
You will be presented with a context-free grammar in Chomsky normal form
and a string which may or may not be in the language defined by the given
grammar. Your job is to determine whether or not the grammar generates the
provided string. You can use any reasoning strategy you like, but you must
end your response with either `Yes' (if the string is generated by the
grammar) or `No' (if it isn't.)";

/// The recognition prompt for `grammar` and `tokens`.
pub fn render_prompt(grammar: &Grammar, tokens: &TokenString) -> String {
    format!(
        "{TASK_PARAGRAPH}\n\nGrammar:\n```\n{}\n```\n\nHere is the string you need to evaluate:\n\n\
         String: `{tokens}`.\n\nRemember, end your response with either `Yes' or `No'.\n",
        grammar.render_text()
    )
}

/// Recovers the query string from a prompt made by [`render_prompt`].
pub fn prompt_query(prompt: &str) -> Option<TokenString> {
    let start = prompt.rfind("\nString: `")? + "\nString: `".len();
    let end = start + prompt[start..].find('`')?;
    prompt[start..end].parse().ok()
}

const JUDGE_TEMPLATE: &str = "\
You will be presented with a completion from an LLM which was given a context-free grammar and a string of symbols drawn from that grammar's set of terminal symbols and asked to determine whether the string is generated by the grammar or not. Your job is to classify how the LLM attempted to solve the task by binning the completion strategy into one of the following categories:

- `heuristic`: The LLM attempts to solve the task by using heuristics it surmises from the grammar, such as “if the string is long, it is likely generated by the grammar” or “the string only contains terminal symbols present in the grammar, so it’s likely a positive sample”. Count strategies as heuristic if they appeal to the existence of certain production rules but do not rigorously determine that no such derivation exists.
- `rule-based`: The LLM attempts to solve the task by writing out the FULL DERIVATION of the sample from the grammar, or rigorously determining that no such derivation exists. Only count strategies as rule-based if the LLM doesn’t use any guesswork to reach its final conclusion.
- `code`: The LLM attempts to solve the task by writing out a program or algorithm which it claims will solve the task. This includes writing out a program in a programming language, or writing out pseudocode.

You can write as much as you want in your answer, but please end your response with the name of the classification you think is most appropriate.

Here is the LLM's completion:

```
{completion}
```
";

/// The strategy-classification prompt with `completion` embedded verbatim.
pub fn render_judge_prompt(completion: &str) -> String {
    JUDGE_TEMPLATE.replacen("{completion}", completion, 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub user: String,
    pub model: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FinetuneSplit {
    pub train: Vec<FinetuneRecord>,
    pub val: Vec<FinetuneRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Splits benchmarks at the grammar level (`round(train_fraction * n)`
/// grammars to train) and renders one record per example.
pub fn export_finetune(benchmarks: &[Benchmark], train_fraction: f64, seed: u64) -> FinetuneSplit {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must lie in (0, 1)"
    );
    let mut order: Vec<usize> = (0..benchmarks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * benchmarks.len() as f64).round() as usize;
    let mut split = FinetuneSplit::default();
    for (rank, &i) in order.iter().enumerate() {
        let b = &benchmarks[i];
        let records = b.examples.iter().map(|e| FinetuneRecord {
            user: render_prompt(&b.grammar, &e.tokens),
            model: match e.label {
                Label::Positive => "Yes".to_string(),
                Label::Negative => "No".to_string(),
            },
        });
        if rank < n_train {
            split.train.extend(records);
            split.train_ids.push(b.id.clone());
        } else {
            split.val.extend(records);
            split.val_ids.push(b.id.clone());
        }
    }
    split
}

/// Writes serializable items as newline-delimited JSON, atomically.
pub fn write_ndjson<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}
