//! Random grammar generation from four size hyperparameters, selection of a
//! minimally-correlated subset, and novelty counting.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Grammar, GrammarError, GrammarStats, Rule};

/// Generation hyperparameters. Post-reduction counts are at most these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub n_term: usize,
    pub n_nonterm: usize,
    pub n_lex: usize,
    pub n_nonlex: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("grammar generates the empty language")]
    EmptyLanguage,
    #[error("pool of {pool} grammars is smaller than the requested {k}")]
    InsufficientPool { pool: usize, k: usize },
    #[error("no non-empty grammar after {0} seeds")]
    RetriesExhausted(usize),
}

impl From<GrammarError> for GenError {
    fn from(err: GrammarError) -> Self {
        match err {
            GrammarError::EmptyLanguage => GenError::EmptyLanguage,
            GrammarError::Parse(e) => GenError::InvalidParams(e.to_string()),
        }
    }
}

impl GenParams {
    pub fn new(n_term: usize, n_nonterm: usize, n_lex: usize, n_nonlex: usize, seed: u64) -> Self {
        GenParams {
            n_term,
            n_nonterm,
            n_lex,
            n_nonlex,
            seed,
        }
    }

    /// Size of the lexical rule space `V x Sigma`.
    pub fn lexical_space(&self) -> usize {
        self.n_nonterm * self.n_term
    }

    /// Size of the nonlexical rule space `({S} u V) x V x V`.
    pub fn nonlexical_space(&self) -> usize {
        (self.n_nonterm + 1) * self.n_nonterm * self.n_nonterm
    }

    pub fn check(&self) -> Result<(), GenError> {
        if self.n_term == 0 || self.n_nonterm == 0 {
            return Err(GenError::InvalidParams(
                "symbol counts must be positive".into(),
            ));
        }
        if self.n_lex > self.lexical_space() {
            return Err(GenError::InvalidParams(format!(
                "n_lex {} exceeds the {} possible lexical rules",
                self.n_lex,
                self.lexical_space()
            )));
        }
        if self.n_nonlex > self.nonlexical_space() {
            return Err(GenError::InvalidParams(format!(
                "n_nonlex {} exceeds the {} possible nonlexical rules",
                self.n_nonlex,
                self.nonlexical_space()
            )));
        }
        Ok(())
    }

    /// Draws each count uniformly from `[max(1, cap / 10), cap]`, clamping
    /// `n_lex` to the lexical rule space.
    pub fn random<R: Rng + ?Sized>(cap: usize, seed: u64, rng: &mut R) -> Self {
        let cap = cap.max(1);
        let lo = (cap / 10).max(1);
        let mut draw = || rng.gen_range(lo..=cap);
        let n_term = draw();
        let n_nonterm = draw();
        let n_lex = draw();
        let n_nonlex = draw();
        let mut params = GenParams::new(n_term, n_nonterm, n_lex, n_nonlex, seed);
        params.n_lex = params.n_lex.min(params.lexical_space());
        params.n_nonlex = params.n_nonlex.min(params.nonlexical_space());
        params
    }

    /// `true` if `stats` fits within these parameters componentwise.
    pub fn bounds(&self, stats: &GrammarStats) -> bool {
        stats.n_term <= self.n_term
            && stats.n_nonterm <= self.n_nonterm
            && stats.n_lex <= self.n_lex
            && stats.n_nonlex <= self.n_nonlex
    }
}

/// Samples `n_lex` distinct lexical and `n_nonlex` distinct nonlexical rules
/// uniformly and returns the reduced grammar. Symbols are numbered from 1.
pub fn generate(params: &GenParams) -> Result<Grammar, GenError> {
    params.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let nt = params.n_nonterm;

    let mut rules = Vec::with_capacity(params.n_lex + params.n_nonlex);
    for i in index::sample(&mut rng, params.nonlexical_space(), params.n_nonlex) {
        let (head, rest) = (i / (nt * nt), i % (nt * nt));
        let (left, right) = (rest / nt + 1, rest % nt + 1);
        rules.push(if head == 0 {
            Rule::start(left as u32, right as u32)
        } else {
            Rule::binary(head as u32, left as u32, right as u32)
        });
    }
    for i in index::sample(&mut rng, params.lexical_space(), params.n_lex) {
        let (lhs, terminal) = (i / params.n_term + 1, i % params.n_term + 1);
        rules.push(Rule::lexical(lhs as u32, terminal as u32));
    }
    Ok(Grammar::from_rules(rules).reduce()?)
}

/// Retries [`generate`] with `seed, seed + 1, ...` until the language is
/// non-empty. Returns the grammar and the seed that produced it.
pub fn generate_with_retries(
    params: &GenParams,
    max_attempts: usize,
) -> Result<(Grammar, u64), GenError> {
    for attempt in 0..max_attempts as u64 {
        let seed = params.seed.wrapping_add(attempt);
        match generate(&GenParams { seed, ..*params }) {
            Ok(g) => return Ok((g, seed)),
            Err(GenError::EmptyLanguage) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(GenError::RetriesExhausted(max_attempts))
}

/// Sum of `|r|` over the six pairs of `(n_term, n_nonterm, n_lex, n_nonlex)`.
/// A pair with a constant side contributes 1.
pub fn correlation_objective(stats: &[GrammarStats]) -> f64 {
    let mut sums = MomentSums::default();
    for s in stats {
        sums.add(s);
    }
    sums.objective()
}

/// Pairwise Pearson r between the four counts, indexed like
/// [`GrammarStats::as_array`].
pub fn correlation_matrix(stats: &[GrammarStats]) -> [[f64; 4]; 4] {
    let mut sums = MomentSums::default();
    for s in stats {
        sums.add(s);
    }
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { sums.r(i, j).unwrap_or(f64::NAN) }))
}

#[derive(Debug, Clone, Copy, Default)]
struct MomentSums {
    n: f64,
    s: [f64; 4],
    q: [[f64; 4]; 4],
}

impl MomentSums {
    fn apply(&mut self, stats: &GrammarStats, sign: f64) {
        let v = stats.as_array().map(|x| x as f64);
        self.n += sign;
        for i in 0..4 {
            self.s[i] += sign * v[i];
            for j in i..4 {
                self.q[i][j] += sign * v[i] * v[j];
            }
        }
    }

    fn add(&mut self, stats: &GrammarStats) {
        self.apply(stats, 1.0);
    }

    fn remove(&mut self, stats: &GrammarStats) {
        self.apply(stats, -1.0);
    }

    fn r(&self, i: usize, j: usize) -> Option<f64> {
        let (i, j) = (i.min(j), i.max(j));
        let cov = self.n * self.q[i][j] - self.s[i] * self.s[j];
        let vi = self.n * self.q[i][i] - self.s[i] * self.s[i];
        let vj = self.n * self.q[j][j] - self.s[j] * self.s[j];
        if vi <= 0.0 || vj <= 0.0 {
            return None;
        }
        Some((cov / (vi * vj).sqrt()).clamp(-1.0, 1.0))
    }

    fn objective(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..4 {
            for j in (i + 1)..4 {
                total += self.r(i, j).map_or(1.0, f64::abs);
            }
        }
        total
    }
}

const SELECTION_RESTARTS: usize = 8;
const SELECTION_STEPS: usize = 40_000;

/// Chooses `k` pool entries approximately minimising
/// [`correlation_objective`]. Random restarts plus single-swap hill
/// climbing; the first restart starts from the first `k` entries, so the
/// result is never worse than that baseline. Returns ascending pool indices.
pub fn select_decorrelated(
    pool: &[GrammarStats],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, GenError> {
    if pool.len() < k {
        return Err(GenError::InsufficientPool {
            pool: pool.len(),
            k,
        });
    }
    if pool.len() == k || k == 0 {
        return Ok((0..k).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..SELECTION_RESTARTS {
        let mut chosen: Vec<usize> = if restart == 0 {
            (0..k).collect()
        } else {
            index::sample(&mut rng, pool.len(), k).into_vec()
        };
        let mut in_set = vec![false; pool.len()];
        for &i in &chosen {
            in_set[i] = true;
        }
        let mut outside: Vec<usize> = (0..pool.len()).filter(|&i| !in_set[i]).collect();
        let mut sums = MomentSums::default();
        for &i in &chosen {
            sums.add(&pool[i]);
        }
        let mut current = sums.objective();
        for _ in 0..SELECTION_STEPS {
            let a = rng.gen_range(0..chosen.len());
            let b = rng.gen_range(0..outside.len());
            let mut trial = sums;
            trial.remove(&pool[chosen[a]]);
            trial.add(&pool[outside[b]]);
            let value = trial.objective();
            if value < current {
                std::mem::swap(&mut chosen[a], &mut outside[b]);
                sums = trial;
                current = value;
            }
        }
        if best.as_ref().is_none_or(|(v, _)| current < *v) {
            best = Some((current, chosen));
        }
    }
    let mut chosen = best.map(|(_, c)| c).unwrap_or_default();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Lower bound on distinct reduced CNF grammars with `n` nonterminals and
/// `t` terminals, and on distinct strings of length `l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoveltyBound {
    /// Exponent `n^3 + n*t - 2n` of the grammar count.
    pub log2_grammar_count: u128,
    /// `l * log2(t)`.
    pub log2_string_count: f64,
}

impl NoveltyBound {
    pub fn string_count(&self) -> f64 {
        self.log2_string_count.exp2()
    }
}

pub fn novelty_lower_bound(n: u64, t: u64, l: u64) -> NoveltyBound {
    let (n, t) = (n as u128, t as u128);
    NoveltyBound {
        log2_grammar_count: (n * n * n + n * t).saturating_sub(2 * n),
        log2_string_count: l as f64 * (t as f64).log2(),
    }
}

/// The base grammar of the novelty construction: `S -> NT_i NT_1` and
/// `NT_i -> 't_1'` for every `1 <= i <= n`.
pub fn novelty_base_grammar(n: u32) -> Grammar {
    let mut rules: Vec<Rule> = (1..=n).map(|i| Rule::start(i, 1)).collect();
    rules.extend((1..=n).map(|i| Rule::lexical(i, 1)));
    Grammar::from_rules(rules)
}

/// Rules over `({S} u V) x V x V` and `V x Sigma` not already in the base
/// grammar; any subset of them extends the base grammar to another reduced
/// grammar. There are `(n + 1) n^2 + n t - 2n` of them, at least the
/// `n^3 + n t - 2n` the bound counts.
pub fn novelty_extension_rules(n: u32, t: u32) -> Vec<Rule> {
    let base = novelty_base_grammar(n);
    let mut out = Vec::new();
    for b in 1..=n {
        for c in 1..=n {
            out.push(Rule::start(b, c));
        }
    }
    for a in 1..=n {
        for b in 1..=n {
            for c in 1..=n {
                out.push(Rule::binary(a, b, c));
            }
        }
    }
    for a in 1..=n {
        for term in 1..=t {
            out.push(Rule::lexical(a, term));
        }
    }
    out.retain(|r| !base.rules().contains(r));
    out
}
