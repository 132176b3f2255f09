//! Verified example sampling.
//!
//! Positives come from top-down leftmost expansion of the grammar read as a
//! PCFG with uniform weights per left-hand side. Negatives are either drawn
//! token by token from a uniform unigram model over the grammar's terminals,
//! or made by small edits to positives; both are rejection-sampled against
//! CYK. Every emitted example is checked against the recognizer.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grammar::{Grammar, Head, Rule, Terminal};
use crate::recognizer::{Recognizer, TokenString};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PcfgSample,
    UnigramNegative,
    AdversarialNegative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: TokenString,
    pub label: Label,
    pub provenance: Provenance,
}

impl Example {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sampling targets and limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub max_len: usize,
    pub per_len_cap: usize,
    pub goal_total: usize,
    /// Consecutive failed draws tolerated before a cell is abandoned.
    pub retry_cap: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            max_len: 50,
            per_len_cap: 10,
            goal_total: 1000,
            retry_cap: 100,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn with_seed(seed: u64) -> Self {
        SamplingPlan {
            seed,
            ..Default::default()
        }
    }

    /// Positive draw attempts before giving up on unfilled lengths.
    pub fn positive_attempt_cap(&self) -> usize {
        200 * self.goal_total
    }

    /// Nonterminal expansions allowed per positive draw.
    pub fn expansion_budget(&self) -> usize {
        4 * self.max_len
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Sampled examples plus the number missing from each length cell.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sampled {
    pub examples: Vec<Example>,
    /// `length -> missing`, only for lengths short of the cap.
    pub shortfall: BTreeMap<usize, usize>,
}

const POSITIVE_STREAM: u64 = 1;
const UNIGRAM_STREAM: u64 = 2;
const ADVERSARIAL_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy)]
enum Alt {
    Emit(Terminal),
    Expand(usize, usize),
}

/// Grammar rules per dense head (0 is `S`) for fast top-down expansion.
struct Expander {
    alts: Vec<Vec<Alt>>,
}

impl Expander {
    fn new(grammar: &Grammar) -> Self {
        let mut dense: HashMap<Head, usize> = HashMap::from([(Head::Start, 0)]);
        let id = |h: Head, dense: &mut HashMap<Head, usize>| {
            let next = dense.len();
            *dense.entry(h).or_insert(next)
        };
        let mut pending = Vec::new();
        for rule in grammar.rules() {
            let head = id(rule.head(), &mut dense);
            let alt = match *rule {
                Rule::Lexical { terminal, .. } => Alt::Emit(terminal),
                Rule::Nonlexical { left, right, .. } => Alt::Expand(
                    id(Head::Nt(left), &mut dense),
                    id(Head::Nt(right), &mut dense),
                ),
            };
            pending.push((head, alt));
        }
        let mut alts = vec![Vec::new(); dense.len()];
        for (head, alt) in pending {
            alts[head].push(alt);
        }
        Expander { alts }
    }

    /// One leftmost derivation from `S`; `false` if it ran over the
    /// expansion budget or could no longer fit in `max_len` tokens.
    fn derive<R: Rng>(
        &self,
        rng: &mut R,
        budget: usize,
        max_len: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Terminal>,
    ) -> bool {
        stack.clear();
        out.clear();
        stack.push(0);
        let mut steps = 0;
        while let Some(sym) = stack.pop() {
            steps += 1;
            if steps > budget {
                return false;
            }
            let alts = &self.alts[sym];
            if alts.is_empty() {
                return false;
            }
            match alts[rng.gen_range(0..alts.len())] {
                Alt::Emit(t) => out.push(t),
                Alt::Expand(l, r) => {
                    stack.push(r);
                    stack.push(l);
                }
            }
            // every pending symbol yields at least one token
            if out.len() + stack.len() > max_len {
                return false;
            }
        }
        true
    }
}

/// Draws up to `per_len_cap` distinct CYK-verified positives per length.
/// Output is ordered by length, then by discovery.
pub fn sample_positives(grammar: &Grammar, plan: &SamplingPlan) -> Sampled {
    let expander = Expander::new(grammar);
    let recognizer = Recognizer::new(grammar);
    let mut rng = plan.rng(POSITIVE_STREAM);
    let mut by_len: Vec<Vec<TokenString>> = vec![Vec::new(); plan.max_len + 1];
    let mut seen: HashSet<Vec<Terminal>> = HashSet::new();
    // S has no lexical rules, so length-1 positives cannot exist
    let mut open_cells = plan.max_len.saturating_sub(1);
    let (mut stack, mut out) = (Vec::new(), Vec::new());

    for _ in 0..plan.positive_attempt_cap() {
        if open_cells == 0 || plan.per_len_cap == 0 {
            break;
        }
        if !expander.derive(
            &mut rng,
            plan.expansion_budget(),
            plan.max_len,
            &mut stack,
            &mut out,
        ) {
            continue;
        }
        let len = out.len();
        if len == 0 || by_len[len].len() >= plan.per_len_cap || seen.contains(&out) {
            continue;
        }
        let tokens = TokenString(out.clone());
        if !recognizer.recognize(&tokens) {
            debug_assert!(false, "derived string rejected by CYK: {tokens}");
            continue;
        }
        seen.insert(out.clone());
        by_len[len].push(tokens);
        if by_len[len].len() == plan.per_len_cap && len >= 2 {
            open_cells -= 1;
        }
    }

    let mut sampled = Sampled::default();
    for (len, strings) in by_len.into_iter().enumerate().skip(1) {
        if strings.len() < plan.per_len_cap {
            sampled
                .shortfall
                .insert(len, plan.per_len_cap - strings.len());
        }
        sampled
            .examples
            .extend(strings.into_iter().map(|tokens| Example {
                tokens,
                label: Label::Positive,
                provenance: Provenance::PcfgSample,
            }));
    }
    sampled
}

/// Unigram negatives over the grammar's own terminal set.
pub fn sample_negatives_unigram(grammar: &Grammar, plan: &SamplingPlan) -> Sampled {
    let alphabet: Vec<Terminal> = grammar.terminals().iter().copied().collect();
    sample_negatives_unigram_over(grammar, &alphabet, plan)
}

/// For each length, draws strings i.i.d. uniformly over `alphabet` and keeps
/// distinct CYK-rejected ones, abandoning the length after `retry_cap`
/// consecutive failed draws.
pub fn sample_negatives_unigram_over(
    grammar: &Grammar,
    alphabet: &[Terminal],
    plan: &SamplingPlan,
) -> Sampled {
    let recognizer = Recognizer::new(grammar);
    let mut rng = plan.rng(UNIGRAM_STREAM);
    let mut sampled = Sampled::default();
    for len in 1..=plan.max_len {
        let mut kept: HashSet<Vec<Terminal>> = HashSet::new();
        let mut failures = 0;
        while !alphabet.is_empty() && kept.len() < plan.per_len_cap && failures < plan.retry_cap {
            let draw: Vec<Terminal> = (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
                .collect();
            if kept.contains(&draw) {
                failures += 1;
                continue;
            }
            let tokens = TokenString(draw);
            if recognizer.recognize(&tokens) {
                failures += 1;
                continue;
            }
            failures = 0;
            kept.insert(tokens.0.clone());
            sampled.examples.push(Example {
                tokens,
                label: Label::Negative,
                provenance: Provenance::UnigramNegative,
            });
        }
        if kept.len() < plan.per_len_cap {
            sampled.shortfall.insert(len, plan.per_len_cap - kept.len());
        }
    }
    sampled
}

/// Adversarial negatives with the index of the positive each came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Adversarial {
    pub examples: Vec<Example>,
    pub sources: Vec<usize>,
    /// Positives whose edit ball up to distance 2 yielded no negative.
    pub not_found: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Edit {
    Substitute,
    Insert,
    Delete,
}

fn random_edit<R: Rng>(
    rng: &mut R,
    tokens: &mut Vec<Terminal>,
    alphabet: &[Terminal],
    max_len: usize,
) -> bool {
    let mut ops = Vec::with_capacity(3);
    if alphabet.len() > 1 && !tokens.is_empty() {
        ops.push(Edit::Substitute);
    }
    if tokens.len() < max_len && !alphabet.is_empty() {
        ops.push(Edit::Insert);
    }
    if tokens.len() > 1 {
        ops.push(Edit::Delete);
    }
    if ops.is_empty() {
        return false;
    }
    match ops[rng.gen_range(0..ops.len())] {
        Edit::Substitute => {
            let at = rng.gen_range(0..tokens.len());
            let current = tokens[at];
            let others: Vec<Terminal> = alphabet.iter().copied().filter(|&t| t != current).collect();
            tokens[at] = others[rng.gen_range(0..others.len())];
        }
        Edit::Insert => {
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, alphabet[rng.gen_range(0..alphabet.len())]);
        }
        Edit::Delete => {
            tokens.remove(rng.gen_range(0..tokens.len()));
        }
    }
    true
}

/// Makes one negative per positive by random single-token edits, escalating
/// to two edits after `retry_cap` parseable results.
pub fn sample_negatives_adversarial(
    grammar: &Grammar,
    positives: &[Example],
    plan: &SamplingPlan,
) -> Adversarial {
    let alphabet: Vec<Terminal> = grammar.terminals().iter().copied().collect();
    let recognizer = Recognizer::new(grammar);
    let mut rng = plan.rng(ADVERSARIAL_STREAM);
    let mut out = Adversarial::default();
    let mut emitted: HashSet<Vec<Terminal>> = HashSet::new();

    'source: for (i, positive) in positives.iter().enumerate() {
        debug_assert_eq!(positive.label, Label::Positive);
        for edits in [1, 2] {
            for _ in 0..plan.retry_cap.max(1) {
                let mut tokens = positive.tokens.0.clone();
                let mut applied = true;
                for _ in 0..edits {
                    applied &= random_edit(&mut rng, &mut tokens, &alphabet, plan.max_len);
                }
                if !applied || tokens.is_empty() || emitted.contains(&tokens) {
                    continue;
                }
                let candidate = TokenString(tokens);
                if recognizer.recognize(&candidate) {
                    continue;
                }
                emitted.insert(candidate.0.clone());
                out.examples.push(Example {
                    tokens: candidate,
                    label: Label::Negative,
                    provenance: Provenance::AdversarialNegative,
                });
                out.sources.push(i);
                continue 'source;
            }
        }
        out.not_found.push(i);
    }
    out
}

/// Positives followed by unigram negatives, each stream seeded from `plan`.
pub fn sample_examples(grammar: &Grammar, plan: &SamplingPlan) -> Vec<Example> {
    let mut examples = sample_positives(grammar, plan).examples;
    examples.extend(sample_negatives_unigram(grammar, plan).examples);
    examples
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// All examples relative to `goal_total`.
    pub total: f64,
    /// Positives relative to `max_len * per_len_cap`.
    pub positive: f64,
}

pub fn coverage(examples: &[Example], plan: &SamplingPlan) -> Coverage {
    let ratio = |n: usize, d: usize| {
        if d == 0 {
            0.0
        } else {
            (n as f64 / d as f64).min(1.0)
        }
    };
    let positives = examples
        .iter()
        .filter(|e| e.label == Label::Positive)
        .count();
    Coverage {
        total: ratio(examples.len(), plan.goal_total),
        positive: ratio(positives, plan.max_len * plan.per_len_cap),
    }
}

/// Keeps at most `cap` uniformly chosen examples per `(length, label)` cell,
/// preserving input order.
pub fn subsample_per_length(examples: &[Example], cap: usize, seed: u64) -> Vec<Example> {
    subsample_indices(examples, cap, seed)
        .into_iter()
        .map(|i| examples[i].clone())
        .collect()
}

/// Indices kept by [`subsample_per_length`], ascending.
pub fn subsample_indices(examples: &[Example], cap: usize, seed: u64) -> Vec<usize> {
    let mut cells: BTreeMap<(usize, Label), Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        cells.entry((e.len(), e.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for members in cells.values() {
        if members.len() <= cap {
            keep.extend_from_slice(members);
        } else {
            keep.extend(
                index::sample(&mut rng, members.len(), cap)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognizer::cyk_recognize;

    fn minimal() -> Grammar {
        Grammar::from_rules(vec![Rule::start(1, 1), Rule::lexical(1, 1)])
    }

    fn fragment() -> Grammar {
        Grammar::parse_text(
            "S -> NT5 NT2\nNT5 -> NT0 NT5\nNT0 -> 't30'\nNT0 -> 't24'\nNT5 -> 't23'\nNT2 -> 't4'",
        )
        .unwrap()
    }

    fn small_plan(seed: u64) -> SamplingPlan {
        SamplingPlan {
            max_len: 12,
            per_len_cap: 10,
            goal_total: 240,
            retry_cap: 50,
            seed,
        }
    }

    #[test]
    fn minimal_grammar_has_one_positive() {
        let s = sample_positives(&minimal(), &SamplingPlan::default());
        assert_eq!(s.examples.len(), 1);
        assert_eq!(s.examples[0].tokens.to_string(), "t1 t1");
        assert_eq!(s.examples[0].label, Label::Positive);
        assert_eq!(s.shortfall.len(), 50);
    }

    #[test]
    fn fragment_string_reachable() {
        let target: TokenString = "t30 t24 t24 t23 t4".parse().unwrap();
        let found = (0..20).any(|seed| {
            sample_positives(&fragment(), &SamplingPlan::with_seed(seed))
                .examples
                .iter()
                .any(|e| e.tokens == target)
        });
        assert!(found);
    }

    #[test]
    fn positives_respect_caps_and_verify() {
        let g = fragment();
        let s = sample_positives(&g, &small_plan(5));
        let mut per_len = BTreeMap::new();
        let mut distinct = HashSet::new();
        for e in &s.examples {
            assert!(cyk_recognize(&g, &e.tokens));
            *per_len.entry(e.len()).or_insert(0) += 1;
            assert!(distinct.insert(e.tokens.clone()));
        }
        assert!(per_len.values().all(|&n| n <= 10));
        // fragment language has exactly 2^(l-2) strings of length l
        assert_eq!(per_len.get(&2), Some(&1));
        assert_eq!(per_len.get(&5), Some(&8));
        assert_eq!(per_len.get(&6), Some(&10));
    }

    #[test]
    fn even_runs_fill_odd_lengths_only() {
        // generates t1^(2k) for k >= 1
        let g = Grammar::from_rules(vec![
            Rule::start(1, 1),
            Rule::start(1, 2),
            Rule::binary(2, 1, 3),
            Rule::binary(3, 1, 1),
            Rule::binary(3, 1, 2),
            Rule::lexical(1, 1),
        ]);
        let plan = SamplingPlan {
            max_len: 8,
            per_len_cap: 1,
            goal_total: 16,
            retry_cap: 20,
            seed: 1,
        };
        let s = sample_negatives_unigram(&g, &plan);
        let lens: Vec<usize> = s.examples.iter().map(Example::len).collect();
        assert_eq!(lens, vec![1, 3, 5, 7]);
        assert_eq!(s.shortfall.keys().copied().collect::<Vec<_>>(), vec![2, 4, 6, 8]);
        for e in &s.examples {
            assert!(!cyk_recognize(&g, &e.tokens));
        }
    }

    #[test]
    fn singleton_language_complement_over_two_terminals() {
        let plan = SamplingPlan {
            max_len: 2,
            per_len_cap: 10,
            goal_total: 40,
            retry_cap: 200,
            seed: 3,
        };
        let s = sample_negatives_unigram_over(&minimal(), &[Terminal(1), Terminal(2)], &plan);
        let mut len2: Vec<String> = s
            .examples
            .iter()
            .filter(|e| e.len() == 2)
            .map(|e| e.tokens.to_string())
            .collect();
        len2.sort();
        assert_eq!(len2, vec!["t1 t2", "t2 t1", "t2 t2"]);
    }

    fn edit_distance(a: &[Terminal], b: &[Terminal]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1];
            for (j, y) in b.iter().enumerate() {
                let sub = prev[j] + usize::from(x != y);
                cur.push(sub.min(prev[j + 1] + 1).min(cur[j] + 1));
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn adversarial_negatives_are_close_and_rejected() {
        let g = fragment();
        let positives = sample_positives(&g, &small_plan(2)).examples;
        let adv = sample_negatives_adversarial(&g, &positives, &small_plan(2));
        assert_eq!(adv.examples.len() + adv.not_found.len(), positives.len());
        for (e, &src) in adv.examples.iter().zip(&adv.sources) {
            assert_eq!(e.provenance, Provenance::AdversarialNegative);
            assert!(!cyk_recognize(&g, &e.tokens));
            let d = edit_distance(&e.tokens.0, &positives[src].tokens.0);
            assert!((1..=2).contains(&d), "distance {d}");
            assert!((1..=12).contains(&e.len()));
        }
    }

    #[test]
    fn adversarial_on_singleton_language() {
        let g = Grammar::from_rules(vec![Rule::start(1, 1), Rule::lexical(1, 1)]);
        let positives = sample_positives(&g, &SamplingPlan::default()).examples;
        let adv = sample_negatives_adversarial(&g, &positives, &SamplingPlan::default());
        // with one terminal, only insertions and deletions apply
        assert_eq!(adv.examples.len(), 1);
        assert_ne!(adv.examples[0].len(), 2);
    }

    #[test]
    fn deletion_never_empties_a_string() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut tokens = vec![Terminal(1)];
            random_edit(&mut rng, &mut tokens, &[Terminal(1)], 1);
            assert_eq!(tokens.len(), 1);
        }
    }

    #[test]
    fn coverage_bounds() {
        let plan = SamplingPlan::default();
        assert_eq!(coverage(&[], &plan).total, 0.0);
        let e = Example {
            tokens: "t1 t1".parse().unwrap(),
            label: Label::Positive,
            provenance: Provenance::PcfgSample,
        };
        let all = vec![e; 1000];
        assert_eq!(coverage(&all, &plan).total, 1.0);
        assert_eq!(coverage(&all, &plan).positive, 1.0);
    }

    #[test]
    fn minimal_grammar_full_sampler_coverage() {
        // one positive; over {t1} each length has exactly one string, which
        // is negative for every length except 2
        let g = minimal();
        let plan = SamplingPlan::default();
        let examples = sample_examples(&g, &plan);
        assert_eq!(examples.len(), 1 + 49);
        assert_eq!(coverage(&examples, &plan).total, 50.0 / 1000.0);
    }

    #[test]
    fn subsample_caps_cells() {
        let g = fragment();
        let plan = small_plan(9);
        let examples = sample_examples(&g, &plan);
        assert_eq!(subsample_per_length(&examples, 100, 1), examples);
        let sub = subsample_per_length(&examples, 2, 1);
        let mut cells: BTreeMap<(usize, Label), usize> = BTreeMap::new();
        for e in &sub {
            *cells.entry((e.len(), e.label)).or_default() += 1;
        }
        assert!(cells.values().all(|&n| n <= 2));
        for (len, label) in [(6, Label::Positive), (7, Label::Negative)] {
            assert_eq!(cells[&(len, label)], 2);
        }
        for seed in 0..4 {
            for e in subsample_per_length(&examples, 2, seed) {
                assert!(examples.contains(&e));
            }
        }
        assert_eq!(sub, subsample_per_length(&examples, 2, 1));
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = fragment();
        assert_eq!(
            sample_examples(&g, &small_plan(4)),
            sample_examples(&g, &small_plan(4))
        );
    }
}
