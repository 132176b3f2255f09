//! `relic`: generate benchmarks, run evaluations and score them.

use std::collections::{BTreeMap, HashMap};
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use relic::dataset::{self, Benchmark, SetConfig, Verify};
use relic::eval::{
    self, Baseline, EndpointConfig, EvalOptions, EvalRecord, Model, RetryPolicy, StrategyLabel, StrategyRecord,
    DEFAULT_API_KEY_ENV,
};
use relic::metrics::{self, Binning, Dimension, Unit};
use relic::sampling::SamplingPlan;

#[derive(Parser)]
#[command(name = "relic", version, about = "Context-free language recognition benchmarks")]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Cap on worker threads and in-flight requests.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark set.
    Gen(GenArgs),
    /// Evaluate a model or baseline, journaling records.
    Eval(EvalArgs),
    /// Compute metrics reports from journals.
    Score(ScoreArgs),
    /// Classify completion strategies with a judge model.
    Judge(JudgeArgs),
    /// Percent agreement between two strategy label files.
    Agreement(AgreementArgs),
    /// Export grammar-level train/validation splits for fine-tuning.
    ExportFinetune(FinetuneArgs),
    /// Print the prompt for one example.
    Prompt(PromptArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Upper bound on each grammar parameter.
    #[arg(long, default_value_t = 500)]
    cap: usize,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    pool_factor: usize,
    /// Master seed; drawn from the clock and recorded in the output if omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_term: Option<usize>,
    #[arg(long)]
    n_nonterm: Option<usize>,
    #[arg(long)]
    n_lex: Option<usize>,
    #[arg(long)]
    n_nonlex: Option<usize>,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long, default_value_t = 10)]
    per_len_cap: usize,
    #[arg(long, default_value_t = 1000)]
    goal_total: usize,
    #[arg(long, default_value_t = 100)]
    retry_cap: usize,
    #[arg(long, short, default_value = "benchmarks.ndjson")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct EndpointArgs {
    /// Chat-completions base URL, e.g. https://api.openai.com/v1.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    max_tokens: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    #[arg(long, default_value_t = 4)]
    parallel: usize,
    #[arg(long, default_value_t = 5)]
    max_retries: u32,
    #[arg(long, default_value_t = 500)]
    backoff_ms: u64,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 600)]
    timeout: u64,
}

impl EndpointArgs {
    fn config(&self, model: &str, jobs: Option<usize>) -> Result<EndpointConfig, CliError> {
        let base_url = self
            .base_url
            .clone()
            .ok_or_else(|| CliError::Usage(format!("model `{model}` needs --base-url")))?;
        let config = EndpointConfig {
            max_completion_tokens: self.max_tokens,
            temperature: self.temperature,
            nucleus_p: self.top_p,
            max_parallel_requests: jobs.map_or(self.parallel, |j| self.parallel.min(j)),
            retry: RetryPolicy {
                max_retries: self.max_retries,
                initial_backoff_ms: self.backoff_ms,
                ..RetryPolicy::default()
            },
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout,
            ..EndpointConfig::new(base_url, model)
        };
        config.validate().map_err(CliError::Usage)?;
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, short)]
    benchmarks: PathBuf,
    /// Model name, or `baseline:oracle|random|always-yes|always-no`.
    #[arg(long, short)]
    model: String,
    #[arg(long, short)]
    journal: PathBuf,
    /// Seed for the random baseline and for subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep at most N examples per length and label in each grammar.
    #[arg(long)]
    subsample_per_length: Option<usize>,
    /// Re-query items whose journal entry recorded an endpoint error.
    #[arg(long)]
    retry_errors: bool,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct ScoreArgs {
    /// One or more journals; records are grouped by model name.
    #[arg(long, short, required = true, num_args = 1..)]
    journal: Vec<PathBuf>,
    #[arg(long, short)]
    benchmarks: PathBuf,
    #[arg(long, short, default_value = "report")]
    out_dir: PathBuf,
    /// Token limit used to normalize completion lengths.
    #[arg(long)]
    token_limit: Option<u64>,
    /// Strategy labels from `judge`, for the strategy curve.
    #[arg(long)]
    strategies: Option<PathBuf>,
    /// Score even if some grammars are missing or records carry errors.
    #[arg(long)]
    partial: bool,
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long, short)]
    journal: PathBuf,
    #[arg(long)]
    judge_model: String,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args)]
struct AgreementArgs {
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, short)]
    benchmarks: PathBuf,
    #[arg(long, short, default_value = "finetune")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, short)]
    benchmarks: PathBuf,
    #[arg(long)]
    grammar: String,
    #[arg(long)]
    example: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Box<dyn Error>),
}

impl<E: Error + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(Box::new(e))
    }
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into().into())
}

struct Ctx {
    workdir: PathBuf,
    json: bool,
    jobs: Option<usize>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }

    fn emit(&self, summary: serde_json::Value, human: impl FnOnce()) {
        if self.json {
            println!("{summary}");
        } else {
            human();
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let ctx = Ctx {
        workdir: cli.workdir,
        json: cli.json,
        jobs: cli.jobs,
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Score(a) => cmd_score(&ctx, a),
        Command::Judge(a) => cmd_judge(&ctx, a),
        Command::Agreement(a) => cmd_agreement(&ctx, a),
        Command::ExportFinetune(a) => cmd_export_finetune(&ctx, a),
        Command::Prompt(a) => cmd_prompt(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_gen(ctx: &Ctx, a: GenArgs) -> Result<(), CliError> {
    if a.count == 0 || a.cap == 0 || a.pool_factor == 0 {
        return Err(CliError::Usage("--count, --cap and --pool-factor must be positive".into()));
    }
    let seed = a.seed.unwrap_or_else(|| {
        let s = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        eprintln!("no --seed given; using {s}");
        s
    });
    let config = SetConfig {
        pool_factor: a.pool_factor,
        n_term: a.n_term,
        n_nonterm: a.n_nonterm,
        n_lex: a.n_lex,
        n_nonlex: a.n_nonlex,
        plan: SamplingPlan {
            max_len: a.max_len,
            per_len_cap: a.per_len_cap,
            goal_total: a.goal_total,
            retry_cap: a.retry_cap,
            seed: 0,
        },
        ..SetConfig::new(a.count, a.cap, seed)
    };
    let set = dataset::generate_benchmark_set(&config)?;
    let out = ctx.path(&a.out);
    dataset::save_benchmark_set(&set, &out)?;

    let over_90 = set.iter().filter(|b| b.coverage.total > 0.9).count();
    let rows: Vec<_> = set
        .iter()
        .map(|b| json!({"id": b.id, "stats": b.stats, "coverage": b.coverage, "gen_seed": b.gen_params.seed}))
        .collect();
    ctx.emit(
        json!({"command": "gen", "seed": seed, "out": out, "count": set.len(), "coverage_over_90": over_90, "benchmarks": rows}),
        || {
            println!("{:<8} {:>7} {:>9} {:>6} {:>9} {:>9}", "id", "n_term", "n_nonterm", "n_lex", "n_nonlex", "coverage");
            for b in &set {
                println!(
                    "{:<8} {:>7} {:>9} {:>6} {:>9} {:>9.3}",
                    b.id, b.stats.n_term, b.stats.n_nonterm, b.stats.n_lex, b.stats.n_nonlex, b.coverage.total
                );
            }
            println!(
                "{} benchmarks (seed {seed}), {over_90} with coverage > 0.9, written to {}",
                set.len(),
                out.display()
            );
        },
    );
    Ok(())
}

fn load_set(ctx: &Ctx, path: &Path) -> Result<Vec<Benchmark>, CliError> {
    Ok(dataset::load_benchmarks(&ctx.path(path), Verify::default())?)
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<(), CliError> {
    let benchmarks = load_set(ctx, &a.benchmarks)?;
    let model = if a.model.starts_with("baseline:") {
        Model::Baseline(
            Baseline::parse(&a.model, a.seed).ok_or_else(|| CliError::Usage(format!("unknown baseline `{}`", a.model)))?,
        )
    } else {
        Model::Endpoint(a.endpoint.config(&a.model, ctx.jobs)?)
    };
    let options = EvalOptions {
        subsample_per_length: a.subsample_per_length,
        subsample_seed: a.seed,
        retry_errors: a.retry_errors,
        workers: ctx.jobs,
    };
    let journal = ctx.path(&a.journal);
    let records = eval::run_eval(&benchmarks, &model, &journal, &options)?;
    let errors = records.iter().filter(|r| r.error.is_some()).count();
    let correct = records.iter().filter(|r| r.is_correct()).count();
    ctx.emit(
        json!({"command": "eval", "model": model.name(), "journal": journal, "records": records.len(), "correct": correct, "errors": errors}),
        || {
            println!(
                "{}: {} records ({} correct, {} endpoint errors) in {}",
                model.name(),
                records.len(),
                correct,
                errors,
                journal.display()
            )
        },
    );
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BinRow<'a> {
    model: &'a str,
    lo: f64,
    hi: f64,
    records: usize,
    accuracy: Option<f64>,
    sem: Option<f64>,
}

#[derive(Serialize)]
struct BiasRow<'a> {
    model: &'a str,
    length: usize,
    records: usize,
    positive_rate: Option<f64>,
    unknown_rate: f64,
}

#[derive(Serialize)]
struct TtcRow<'a> {
    model: &'a str,
    length: usize,
    ratio: f64,
}

#[derive(Serialize)]
struct RankRow<'a> {
    unit: &'a str,
    bin_lo: Option<f64>,
    bin_hi: Option<f64>,
    model_a: &'a str,
    model_b: &'a str,
    units: usize,
    rho: Option<f64>,
}

fn cmd_score(ctx: &Ctx, a: ScoreArgs) -> Result<(), CliError> {
    let benchmarks = load_set(ctx, &a.benchmarks)?;
    let mut records = Vec::new();
    for j in &a.journal {
        records.extend(eval::read_journal(&ctx.path(j))?);
    }
    if records.is_empty() {
        return Err(runtime("journals contain no records"));
    }
    let per_model = metrics::split_by_model(records.clone());
    if !a.partial {
        for (model, rs) in &per_model {
            let seen: std::collections::HashSet<&str> = rs.iter().map(|r| r.grammar_id.as_str()).collect();
            if let Some(b) = benchmarks.iter().find(|b| !seen.contains(b.id.as_str())) {
                return Err(runtime(format!("{model}: no records for grammar {}; pass --partial to score anyway", b.id)));
            }
            if let Some(r) = rs.iter().find(|r| r.error.is_some()) {
                return Err(runtime(format!(
                    "{model}: item ({}, {}) failed; rerun eval with --retry-errors or pass --partial",
                    r.grammar_id, r.example_id
                )));
            }
        }
    }
    let out = ctx.path(&a.out_dir);
    fs::create_dir_all(&out)?;

    let mut summaries = Vec::new();
    let mut by_nonlex = Vec::new();
    let mut by_length = Vec::new();
    let mut bias = Vec::new();
    let mut ttc_rows = Vec::new();
    let mut ttc_fits = BTreeMap::new();
    for (model, rs) in &per_model {
        summaries.push(metrics::summarize(model, rs)?);
        for (dim, rows) in [(Dimension::NNonlex, &mut by_nonlex), (Dimension::Length, &mut by_length)] {
            for p in metrics::accuracy_by(rs, &benchmarks, dim, &Binning::default_for(dim))? {
                rows.push(BinRow {
                    model,
                    lo: p.lo,
                    hi: p.hi,
                    records: p.records,
                    accuracy: p.accuracy,
                    sem: p.sem,
                });
            }
        }
        for p in metrics::prediction_bias(rs) {
            bias.push(BiasRow {
                model,
                length: p.length,
                records: p.records,
                positive_rate: p.positive_rate,
                unknown_rate: p.unknown_rate,
            });
        }
        if let Some(limit) = a.token_limit {
            match metrics::ttc_curve(rs, limit) {
                Ok(fit) => {
                    ttc_rows.extend(fit.curve.iter().map(|&(length, ratio)| TtcRow { model, length, ratio }));
                    ttc_fits.insert(model.clone(), json!({"peak": fit.peak, "a": fit.a, "b": fit.b, "fitted_points": fit.fitted_points}));
                }
                Err(e) => log::warn!("{model}: no test-time compute fit: {e}"),
            }
        }
    }
    write_csv(&out.join("accuracy_by_nonlex.csv"), &by_nonlex)?;
    write_csv(&out.join("accuracy_by_length.csv"), &by_length)?;
    write_csv(&out.join("prediction_bias.csv"), &bias)?;
    if a.token_limit.is_some() {
        write_csv(&out.join("ttc.csv"), &ttc_rows)?;
    }

    match metrics::pearson_table(&per_model, &benchmarks) {
        Ok(rows) => write_csv(&out.join("pearson.csv"), &rows)?,
        Err(e) => log::warn!("no Pearson table: {e}"),
    }

    let mut ranks = Vec::new();
    if per_model.len() >= 2 {
        let mut bins: Vec<Option<(f64, f64)>> = vec![None];
        bins.extend(Binning::default_for(Dimension::NNonlex).bins().map(Some));
        for (unit, unit_name) in [(Unit::Grammar, "grammar"), (Unit::Example, "example")] {
            for bin in &bins {
                match metrics::spearman_rank_matrix(&per_model, &benchmarks, unit, *bin) {
                    Ok(m) => {
                        for (i, a) in m.models.iter().enumerate() {
                            for (j, b) in m.models.iter().enumerate().skip(i + 1) {
                                ranks.push((unit_name, *bin, a.clone(), b.clone(), m.units, m.rho[i][j]));
                            }
                        }
                    }
                    Err(e) => log::info!("no {unit_name} rank matrix for bin {bin:?}: {e}"),
                }
            }
        }
    }
    let rank_rows: Vec<RankRow> = ranks
        .iter()
        .map(|(unit, bin, a, b, units, rho)| RankRow {
            unit,
            bin_lo: bin.map(|b| b.0),
            bin_hi: bin.map(|b| b.1),
            model_a: a,
            model_b: b,
            units: *units,
            rho: *rho,
        })
        .collect();
    if !rank_rows.is_empty() {
        write_csv(&out.join("spearman.csv"), &rank_rows)?;
    }

    let centering = metrics::export_regression_csv(&records, &benchmarks, &out.join("regression.csv"))?;

    if let Some(path) = &a.strategies {
        let labels = read_strategy_records(&ctx.path(path))?;
        let lengths: Vec<usize> = labels.iter().map(|r| r.length).collect();
        let cats: Vec<StrategyLabel> = labels.iter().map(|r| r.judgement.strategy).collect();
        write_csv(
            &out.join("strategy_proportions.csv"),
            &metrics::strategy_proportions(&cats, &lengths, &Binning::default_for(Dimension::Length)),
        )?;
    }

    let summary = json!({
        "command": "score",
        "out_dir": out,
        "models": summaries,
        "ttc": ttc_fits,
        "regression_centering": centering,
    });
    dataset::write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    ctx.emit(summary, || {
        for s in &summaries {
            println!(
                "{}: balanced accuracy {:.4} ± {:.4}, macro F1 {:.4} ± {:.4} over {} records",
                s.model, s.balanced_accuracy.mean, s.balanced_accuracy.sem, s.macro_f1.mean, s.macro_f1.sem, s.records
            );
        }
        println!("reports written to {}", out.display());
    });
    Ok(())
}

fn read_strategy_records(path: &Path) -> Result<Vec<StrategyRecord>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

fn cmd_judge(ctx: &Ctx, a: JudgeArgs) -> Result<(), CliError> {
    let config = a.endpoint.config(&a.judge_model, ctx.jobs)?;
    let records: Vec<EvalRecord> = eval::read_journal(&ctx.path(&a.journal))?;
    let judged = eval::judge_records(&records, &config)?;
    let out = ctx.path(&a.out);
    dataset::write_ndjson(&out, &judged)?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &judged {
        *counts.entry(r.judgement.strategy.as_str()).or_default() += 1;
    }
    let errors = judged.iter().filter(|r| r.judgement.error.is_some()).count();
    ctx.emit(
        json!({"command": "judge", "out": out, "records": judged.len(), "counts": counts, "errors": errors}),
        || println!("{} completions judged ({counts:?}, {errors} errors), written to {}", judged.len(), out.display()),
    );
    Ok(())
}

type ItemKeys = Vec<(String, usize)>;

/// A label file is either `judge` output or one category name per line.
fn read_labels(path: &Path) -> Result<(Vec<StrategyLabel>, Option<ItemKeys>), CliError> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.first().is_some_and(|l| l.starts_with('{')) {
        let mut labels = Vec::new();
        let mut keys = Vec::new();
        for l in lines {
            let r: StrategyRecord = serde_json::from_str(l)?;
            labels.push(r.judgement.strategy);
            keys.push((r.grammar_id, r.example_id));
        }
        return Ok((labels, Some(keys)));
    }
    let labels = lines
        .iter()
        .map(|l| l.parse::<StrategyLabel>().map_err(runtime))
        .collect::<Result<_, _>>()?;
    Ok((labels, None))
}

fn cmd_agreement(ctx: &Ctx, a: AgreementArgs) -> Result<(), CliError> {
    let (mut la, ka) = read_labels(&ctx.path(&a.a))?;
    let (lb, kb) = read_labels(&ctx.path(&a.b))?;
    if let (Some(ka), Some(kb)) = (ka, kb) {
        // Align by item rather than by line order.
        let pos: HashMap<&(String, usize), usize> = ka.iter().enumerate().map(|(i, k)| (k, i)).collect();
        if ka.len() != kb.len() || kb.iter().any(|k| !pos.contains_key(k)) {
            return Err(runtime("label files cover different items"));
        }
        la = kb.iter().map(|k| la[pos[k]]).collect();
    }
    let agreement = eval::judge_agreement(&la, &lb)?;
    ctx.emit(json!({"command": "agreement", "items": la.len(), "agreement": agreement}), || {
        println!("agreement {agreement:.4} over {} items", la.len())
    });
    Ok(())
}

fn cmd_export_finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<(), CliError> {
    if !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(CliError::Usage("--train-fraction must lie in (0, 1)".into()));
    }
    let benchmarks = load_set(ctx, &a.benchmarks)?;
    let split = dataset::export_finetune(&benchmarks, a.train_fraction, a.seed);
    let out = ctx.path(&a.out_dir);
    fs::create_dir_all(&out)?;
    dataset::write_ndjson(&out.join("train.ndjson"), &split.train)?;
    dataset::write_ndjson(&out.join("val.ndjson"), &split.val)?;
    let ids = json!({"train": split.train_ids, "val": split.val_ids, "seed": a.seed});
    dataset::write_atomic(&out.join("split.json"), serde_json::to_string_pretty(&ids)?.as_bytes())?;
    ctx.emit(
        json!({"command": "export-finetune", "out_dir": out, "train": split.train.len(), "val": split.val.len()}),
        || {
            println!(
                "{} train / {} val records written to {}",
                split.train.len(),
                split.val.len(),
                out.display()
            )
        },
    );
    Ok(())
}

fn cmd_prompt(ctx: &Ctx, a: PromptArgs) -> Result<(), CliError> {
    let benchmarks = load_set(ctx, &a.benchmarks)?;
    let b = benchmarks
        .iter()
        .find(|b| b.id == a.grammar)
        .ok_or_else(|| CliError::Usage(format!("no grammar `{}`", a.grammar)))?;
    let e = b
        .examples
        .get(a.example)
        .ok_or_else(|| CliError::Usage(format!("grammar {} has {} examples", b.id, b.examples.len())))?;
    let prompt = dataset::render_prompt(&b.grammar, &e.tokens);
    ctx.emit(json!({"command": "prompt", "prompt": prompt, "label": e.label}), || print!("{prompt}"));
    Ok(())
}
