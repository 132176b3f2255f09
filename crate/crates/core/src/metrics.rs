//! Aggregate scores and analysis curves over evaluation records.
//!
//! Accuracy is averaged over cells keyed by (grammar, label, length). An
//! Unknown prediction is always incorrect; for F1 it is a third predicted
//! class that matches neither label.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Benchmark;
use crate::eval::{EvalRecord, Prediction, StrategyLabel};
use crate::grammar::GrammarStats;
use crate::sampling::Label;
use crate::stats;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records")]
    EmptyInput,
    #[error("only {found} units in the bin; at least 3 are needed")]
    InsufficientUnits { found: usize },
    #[error("`{param}` is constant across grammars")]
    DegenerateVariance { param: String },
    #[error("only {found} points up to the peak; at least 2 are needed")]
    InsufficientPoints { found: usize },
    #[error("record refers to unknown grammar `{0}`")]
    UnknownGrammar(String),
    #[error("token limit must be positive")]
    InvalidTokenLimit,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
}

/// Cell-balanced accuracy.
///
/// Each (grammar, label, length) cell gets its plain accuracy. The mean
/// weights the two classes equally: it averages the mean positive-cell
/// accuracy and the mean negative-cell accuracy (or just the cells of the one
/// class present). The standard error is taken over all cells.
pub fn balanced_accuracy(records: &[EvalRecord]) -> Result<MeanSem, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut cells: BTreeMap<(&str, Label, usize), (usize, usize)> = BTreeMap::new();
    for r in records {
        let c = cells.entry((&r.grammar_id, r.label, r.length)).or_default();
        c.0 += r.is_correct() as usize;
        c.1 += 1;
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for ((_, label, _), (correct, total)) in &cells {
        let acc = *correct as f64 / *total as f64;
        match label {
            Label::Positive => pos.push(acc),
            Label::Negative => neg.push(acc),
        }
    }
    let mean = match (pos.is_empty(), neg.is_empty()) {
        (false, false) => (stats::mean(&pos) + stats::mean(&neg)) / 2.0,
        (false, true) => stats::mean(&pos),
        _ => stats::mean(&neg),
    };
    let all: Vec<f64> = pos.into_iter().chain(neg).collect();
    Ok(MeanSem {
        mean,
        sem: stats::sem(&all),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Rows: true label (positive, negative). Columns: predicted
    /// (positive, negative, unknown).
    pub counts: [[u64; 3]; 2],
}

impl Confusion {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Self {
        let mut c = Confusion::default();
        for r in records {
            c.add(r.label, r.prediction);
        }
        c
    }

    pub fn add(&mut self, label: Label, prediction: Prediction) {
        let row = match label {
            Label::Positive => 0,
            Label::Negative => 1,
        };
        let col = match prediction {
            Prediction::Positive => 0,
            Prediction::Negative => 1,
            Prediction::Unknown => 2,
        };
        self.counts[row][col] += 1;
    }

    /// F1 of one class: `2 TP / (2 TP + FP + FN)`, 0 when undefined.
    pub fn f1(&self, class: Label) -> f64 {
        let k = match class {
            Label::Positive => 0,
            Label::Negative => 1,
        };
        let other = 1 - k;
        let tp = self.counts[k][k] as f64;
        let fn_ = (self.counts[k].iter().sum::<u64>() - self.counts[k][k]) as f64;
        let fp = self.counts[other][k] as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (self.f1(Label::Positive) + self.f1(Label::Negative)) / 2.0
    }
}

/// Macro F1 over all records pooled; the standard error is over per-grammar
/// macro F1 scores.
pub fn macro_f1(records: &[EvalRecord]) -> Result<MeanSem, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let pooled = Confusion::from_records(records);
    for (k, name) in [(0, "positive"), (1, "negative")] {
        if pooled.counts[k].iter().sum::<u64>() == 0 {
            log::warn!("no {name} examples; that class contributes F1 = 0");
        }
    }
    let per_grammar: Vec<f64> = group_by_grammar(records)
        .values()
        .map(|rs| Confusion::from_records(rs.iter().copied()).macro_f1())
        .collect();
    Ok(MeanSem {
        mean: pooled.macro_f1(),
        sem: stats::sem(&per_grammar),
    })
}

fn group_by_grammar(records: &[EvalRecord]) -> BTreeMap<&str, Vec<&EvalRecord>> {
    let mut out: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.grammar_id.as_str()).or_default().push(r);
    }
    out
}

fn stats_by_id(benchmarks: &[Benchmark]) -> HashMap<&str, GrammarStats> {
    benchmarks.iter().map(|b| (b.id.as_str(), b.stats)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    NNonlex,
    Length,
}

/// Right-closed bins `(lo, hi]` given by monotone edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub edges: Vec<f64>,
}

impl Binning {
    /// Edges `0, w, 2w, ..., n w`.
    pub fn uniform(width: f64, bins: usize) -> Self {
        Binning {
            edges: (0..=bins).map(|i| i as f64 * width).collect(),
        }
    }

    /// Five bins of 100 rules for grammar size, five of 10 tokens for length.
    pub fn default_for(dim: Dimension) -> Self {
        match dim {
            Dimension::NNonlex => Binning::uniform(100.0, 5),
            Dimension::Length => Binning::uniform(10.0, 5),
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.edges.len() >= 2 && self.edges.windows(2).all(|w| w[0] < w[1])
    }

    pub fn bin_of(&self, x: f64) -> Option<usize> {
        self.edges.windows(2).position(|w| x > w[0] && x <= w[1])
    }

    pub fn bins(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.edges.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPoint {
    pub lo: f64,
    pub hi: f64,
    pub records: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub sem: Option<f64>,
}

/// Cell-balanced accuracy per bin of grammar size or example length.
pub fn accuracy_by(
    records: &[EvalRecord],
    benchmarks: &[Benchmark],
    dimension: Dimension,
    binning: &Binning,
) -> Result<Vec<BinPoint>, MetricsError> {
    assert!(binning.is_monotone(), "bin edges must be strictly increasing");
    let by_id = stats_by_id(benchmarks);
    let mut groups: Vec<Vec<EvalRecord>> = vec![Vec::new(); binning.edges.len() - 1];
    for r in records {
        let x = match dimension {
            Dimension::Length => r.length as f64,
            Dimension::NNonlex => by_id
                .get(r.grammar_id.as_str())
                .ok_or_else(|| MetricsError::UnknownGrammar(r.grammar_id.clone()))?
                .n_nonlex as f64,
        };
        if let Some(b) = binning.bin_of(x) {
            groups[b].push(r.clone());
        }
    }
    Ok(binning
        .bins()
        .zip(groups)
        .map(|((lo, hi), rs)| {
            let score = balanced_accuracy(&rs).ok();
            BinPoint {
                lo,
                hi,
                records: rs.len(),
                accuracy: score.map(|s| s.mean),
                sem: score.map(|s| s.sem),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub length: usize,
    pub records: usize,
    /// Share of Positive among non-Unknown predictions.
    pub positive_rate: Option<f64>,
    pub unknown_rate: f64,
}

pub fn prediction_bias(records: &[EvalRecord]) -> Vec<BiasPoint> {
    let mut by_len: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for r in records {
        let c = by_len.entry(r.length).or_default();
        match r.prediction {
            Prediction::Positive => c[0] += 1,
            Prediction::Negative => c[1] += 1,
            Prediction::Unknown => c[2] += 1,
        }
    }
    by_len
        .into_iter()
        .map(|(length, [p, n, u])| {
            let total = p + n + u;
            BiasPoint {
                length,
                records: total,
                positive_rate: (p + n > 0).then(|| p as f64 / (p + n) as f64),
                unknown_rate: u as f64 / total as f64,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Grammar,
    Example,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankMatrix {
    pub models: Vec<String>,
    pub units: usize,
    /// `None` where a model's unit accuracies are all equal.
    pub rho: Vec<Vec<Option<f64>>>,
}

/// Pairwise Spearman correlation of per-unit mean accuracy.
///
/// Only units evaluated by every model are ranked. With `bin`, grammars are
/// restricted to those whose nonlexical rule count lies in `(lo, hi]`.
pub fn spearman_rank_matrix(
    per_model: &[(String, Vec<EvalRecord>)],
    benchmarks: &[Benchmark],
    unit: Unit,
    bin: Option<(f64, f64)>,
) -> Result<RankMatrix, MetricsError> {
    let by_id = stats_by_id(benchmarks);
    let mut tables: Vec<BTreeMap<(String, usize), (usize, usize)>> = Vec::new();
    for (_, records) in per_model {
        let mut t: BTreeMap<(String, usize), (usize, usize)> = BTreeMap::new();
        for r in records {
            if let Some((lo, hi)) = bin {
                let s = by_id
                    .get(r.grammar_id.as_str())
                    .ok_or_else(|| MetricsError::UnknownGrammar(r.grammar_id.clone()))?;
                let x = s.n_nonlex as f64;
                if !(x > lo && x <= hi) {
                    continue;
                }
            }
            let key = match unit {
                Unit::Grammar => (r.grammar_id.clone(), 0),
                Unit::Example => (r.grammar_id.clone(), r.example_id),
            };
            let c = t.entry(key).or_default();
            c.0 += r.is_correct() as usize;
            c.1 += 1;
        }
        tables.push(t);
    }
    let Some(first) = tables.first() else {
        return Err(MetricsError::EmptyInput);
    };
    let keys: Vec<&(String, usize)> = first
        .keys()
        .filter(|k| tables.iter().all(|t| t.contains_key(*k)))
        .collect();
    if keys.len() < 3 {
        return Err(MetricsError::InsufficientUnits { found: keys.len() });
    }
    let acc: Vec<Vec<f64>> = tables
        .iter()
        .map(|t| {
            keys.iter()
                .map(|k| {
                    let (c, n) = t[*k];
                    c as f64 / n as f64
                })
                .collect()
        })
        .collect();
    let rho = acc
        .iter()
        .map(|a| acc.iter().map(|b| stats::spearman(a, b)).collect())
        .collect();
    Ok(RankMatrix {
        models: per_model.iter().map(|(m, _)| m.clone()).collect(),
        units: keys.len(),
        rho,
    })
}

pub const PARAMS: [&str; 4] = ["n_term", "n_nonterm", "n_lex", "n_nonlex"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonRow {
    pub model: String,
    pub metric: String,
    pub param: String,
    /// `None` when the metric is constant across grammars.
    pub r: Option<f64>,
}

/// Pearson r between per-grammar accuracy / macro F1 and the natural log of
/// each grammar parameter.
pub fn pearson_table(
    per_model: &[(String, Vec<EvalRecord>)],
    benchmarks: &[Benchmark],
) -> Result<Vec<PearsonRow>, MetricsError> {
    let by_id = stats_by_id(benchmarks);
    let mut rows = Vec::new();
    for (model, records) in per_model {
        let groups = group_by_grammar(records);
        let mut params: Vec<Vec<f64>> = vec![Vec::new(); 4];
        let mut acc = Vec::new();
        let mut f1 = Vec::new();
        for (id, rs) in &groups {
            let s = by_id
                .get(id)
                .ok_or_else(|| MetricsError::UnknownGrammar(id.to_string()))?;
            for (p, v) in params.iter_mut().zip(s.as_array()) {
                p.push((v as f64).ln());
            }
            let owned: Vec<EvalRecord> = rs.iter().map(|r| (*r).clone()).collect();
            acc.push(balanced_accuracy(&owned)?.mean);
            f1.push(Confusion::from_records(rs.iter().copied()).macro_f1());
        }
        if groups.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        for (name, xs) in PARAMS.iter().zip(&params) {
            if xs.iter().all(|x| *x == xs[0]) {
                return Err(MetricsError::DegenerateVariance { param: name.to_string() });
            }
            for (metric, ys) in [("accuracy", &acc), ("macro_f1", &f1)] {
                rows.push(PearsonRow {
                    model: model.clone(),
                    metric: metric.into(),
                    param: name.to_string(),
                    r: stats::pearson(ys, xs),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtcFit {
    /// (length, mean completion tokens / token limit), by length.
    pub curve: Vec<(usize, f64)>,
    /// Length at the first maximum of the curve.
    pub peak: usize,
    /// Fit `a * l^3 + b`.
    pub a: f64,
    pub b: f64,
    /// Number of curve points the fit used.
    pub fitted_points: usize,
}

/// Normalized test-time-compute curve with a cubic fit up to its peak.
///
/// The fit uses every point up to the first maximum, plus any points right
/// after it that sit at the same maximal value, so a flat curve is fit in
/// full (giving `a = 0`).
pub fn ttc_curve(records: &[EvalRecord], token_limit: u64) -> Result<TtcFit, MetricsError> {
    if token_limit == 0 {
        return Err(MetricsError::InvalidTokenLimit);
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.length).or_default();
        e.0 += r.completion_tokens as f64 / token_limit as f64;
        e.1 += 1;
    }
    let curve: Vec<(usize, f64)> = sums.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect();
    let mut peak_idx = 0;
    for (i, &(_, v)) in curve.iter().enumerate() {
        if v > curve[peak_idx].1 {
            peak_idx = i;
        }
    }
    let Some(&(peak, peak_value)) = curve.get(peak_idx) else {
        return Err(MetricsError::InsufficientPoints { found: 0 });
    };
    let mut end = peak_idx + 1;
    while end < curve.len() && curve[end].1 == peak_value {
        end += 1;
    }
    let fit = &curve[..end];
    if fit.len() < 2 {
        return Err(MetricsError::InsufficientPoints { found: fit.len() });
    }
    let xs: Vec<f64> = fit.iter().map(|&(l, _)| (l as f64).powi(3)).collect();
    let ys: Vec<f64> = fit.iter().map(|&(_, v)| v).collect();
    let (a, b) = stats::linear_fit(&xs, &ys).ok_or(MetricsError::InsufficientPoints { found: fit.len() })?;
    Ok(TtcFit {
        curve: curve.clone(),
        peak,
        a,
        b,
        fitted_points: fit.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub heuristic: f64,
    pub rule_based: f64,
    pub code: f64,
    pub unknown: f64,
}

/// Share of each strategy per length bin; shares in a non-empty bin sum to 1.
pub fn strategy_proportions(labels: &[StrategyLabel], lengths: &[usize], binning: &Binning) -> Vec<StrategyBin> {
    assert_eq!(labels.len(), lengths.len(), "labels and lengths must be aligned");
    let mut counts = vec![[0usize; 4]; binning.edges.len().saturating_sub(1)];
    for (label, &len) in labels.iter().zip(lengths) {
        if let Some(b) = binning.bin_of(len as f64) {
            let k = StrategyLabel::ALL.iter().position(|l| l == label).unwrap();
            counts[b][k] += 1;
        }
    }
    binning
        .bins()
        .zip(counts)
        .map(|((lo, hi), c)| {
            let n: usize = c.iter().sum();
            let share = |k: usize| if n == 0 { 0.0 } else { c[k] as f64 / n as f64 };
            StrategyBin {
                lo,
                hi,
                count: n,
                heuristic: share(0),
                rule_based: share(1),
                code: share(2),
                unknown: share(3),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub log10_n_nonlex_mean: f64,
    pub log10_length_mean: f64,
}

/// Writes per-record regression inputs: correctness plus centered log10
/// grammar size and log10 length. The centering constants go in a leading
/// `#` comment line.
pub fn export_regression_csv(
    records: &[EvalRecord],
    benchmarks: &[Benchmark],
    path: &Path,
) -> Result<Centering, MetricsError> {
    let by_id = stats_by_id(benchmarks);
    let mut size = Vec::with_capacity(records.len());
    for r in records {
        let s = by_id
            .get(r.grammar_id.as_str())
            .ok_or_else(|| MetricsError::UnknownGrammar(r.grammar_id.clone()))?;
        size.push((s.n_nonlex as f64).log10());
    }
    let len: Vec<f64> = records.iter().map(|r| (r.length as f64).log10()).collect();
    let centering = Centering {
        log10_n_nonlex_mean: if records.is_empty() { 0.0 } else { stats::mean(&size) },
        log10_length_mean: if records.is_empty() { 0.0 } else { stats::mean(&len) },
    };
    let mut out = format!(
        "# centering: log10_n_nonlex_mean={} log10_length_mean={}\n",
        centering.log10_n_nonlex_mean, centering.log10_length_mean
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["model", "correct", "log10_n_nonlex_centered", "log10_length_centered"])?;
        for (i, r) in records.iter().enumerate() {
            w.write_record([
                r.model.clone(),
                (r.is_correct() as u8).to_string(),
                (size[i] - centering.log10_n_nonlex_mean).to_string(),
                (len[i] - centering.log10_length_mean).to_string(),
            ])?;
        }
        w.flush()?;
    }
    fs::write(path, out)?;
    Ok(centering)
}

/// Headline numbers for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub records: usize,
    pub balanced_accuracy: MeanSem,
    pub macro_f1: MeanSem,
    pub unknown_rate: f64,
    pub errors: usize,
    pub confusion: Confusion,
}

pub fn summarize(model: &str, records: &[EvalRecord]) -> Result<Summary, MetricsError> {
    Ok(Summary {
        model: model.to_string(),
        records: records.len(),
        balanced_accuracy: balanced_accuracy(records)?,
        macro_f1: macro_f1(records)?,
        unknown_rate: records.iter().filter(|r| r.prediction == Prediction::Unknown).count() as f64
            / records.len() as f64,
        errors: records.iter().filter(|r| r.error.is_some()).count(),
        confusion: Confusion::from_records(records),
    })
}

/// Splits records by model name, keeping first-seen order.
pub fn split_by_model(records: Vec<EvalRecord>) -> Vec<(String, Vec<EvalRecord>)> {
    let mut out: Vec<(String, Vec<EvalRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(m, _)| *m == r.model) {
            Some((_, v)) => v.push(r),
            None => out.push((r.model.clone(), vec![r])),
        }
    }
    out
}
