use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use relic::generate::{self, GenParams};
use relic::recognizer::{cyk_recognize, enumerate_language};
use relic::sampling::{self, Label, Provenance, SamplingPlan};
use relic::Grammar;

fn small_plan(seed: u64) -> SamplingPlan {
    SamplingPlan {
        max_len: 8,
        per_len_cap: 4,
        goal_total: 64,
        retry_cap: 50,
        seed,
    }
}

fn small_grammar() -> impl Strategy<Value = Grammar> {
    (1usize..4, 1usize..5, 1usize..8, 1usize..25, any::<u64>()).prop_filter_map("empty language", |(t, n, l, nl, seed)| {
        let mut p = GenParams::new(t, n, l, nl, seed);
        p.n_lex = p.n_lex.min(p.lexical_space());
        p.n_nonlex = p.n_nonlex.min(p.nonlexical_space());
        generate::generate(&p).ok()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn examples_are_sound_distinct_and_capped(g in small_grammar(), seed in any::<u64>()) {
        let plan = small_plan(seed);
        let examples = sampling::sample_examples(&g, &plan);
        let mut seen = HashSet::new();
        let mut cells: BTreeMap<(usize, Label), usize> = BTreeMap::new();
        for e in &examples {
            prop_assert!(!e.is_empty() && e.len() <= plan.max_len);
            prop_assert_eq!(cyk_recognize(&g, &e.tokens), e.label == Label::Positive);
            prop_assert!(e.tokens.tokens().iter().all(|t| g.terminals().contains(t)));
            prop_assert!(seen.insert((e.label, e.tokens.clone())), "duplicate {}", e.tokens);
            *cells.entry((e.len(), e.label)).or_default() += 1;
        }
        prop_assert!(cells.values().all(|&n| n <= plan.per_len_cap));
        prop_assert_eq!(sampling::sample_examples(&g, &plan), examples);
    }

    #[test]
    fn positives_fill_cells_the_language_can_fill(g in small_grammar(), seed in any::<u64>()) {
        let plan = small_plan(seed);
        let lang = enumerate_language(&g, 4).unwrap();
        let sampled = sampling::sample_positives(&g, &plan);
        for len in 1..=4 {
            let available = lang.iter().filter(|s| s.len() == len).count();
            let got = sampled.examples.iter().filter(|e| e.len() == len).count();
            prop_assert!(got <= available.min(plan.per_len_cap));
        }
    }

    #[test]
    fn adversarial_negatives_are_rejected(g in small_grammar(), seed in any::<u64>()) {
        let plan = small_plan(seed);
        let positives = sampling::sample_positives(&g, &plan).examples;
        let adv = sampling::sample_negatives_adversarial(&g, &positives, &plan);
        prop_assert_eq!(adv.examples.len(), adv.sources.len());
        for (e, &src) in adv.examples.iter().zip(&adv.sources) {
            prop_assert!(!cyk_recognize(&g, &e.tokens));
            prop_assert_eq!(e.provenance, Provenance::AdversarialNegative);
            prop_assert!(src < positives.len());
            prop_assert!(!e.is_empty() && e.len() <= plan.max_len);
            prop_assert!(e.len().abs_diff(positives[src].len()) <= 2);
        }
        for &i in &adv.not_found {
            prop_assert!(!adv.sources.contains(&i));
        }
    }

    #[test]
    fn subsampling_caps_every_cell(g in small_grammar(), cap in 1usize..4, seed in any::<u64>()) {
        let examples = sampling::sample_examples(&g, &small_plan(seed));
        let sub = sampling::subsample_per_length(&examples, cap, seed);
        let mut before: BTreeMap<(usize, Label), usize> = BTreeMap::new();
        let mut after: BTreeMap<(usize, Label), usize> = BTreeMap::new();
        for e in &examples {
            *before.entry((e.len(), e.label)).or_default() += 1;
        }
        for e in &sub {
            prop_assert!(examples.contains(e));
            *after.entry((e.len(), e.label)).or_default() += 1;
        }
        for (k, n) in before {
            prop_assert_eq!(after.get(&k).copied().unwrap_or(0), n.min(cap));
        }
    }
}

#[test]
fn even_run_grammar_shortfall() {
    // Strings of t1 with even length >= 2.
    let g: Grammar = "S -> NT1 NT1\nS -> NT2 NT2\nNT1 -> 't1'\nNT2 -> NT1 NT1\nNT2 -> NT2 NT2"
        .parse()
        .unwrap();
    let plan = SamplingPlan {
        max_len: 10,
        per_len_cap: 1,
        goal_total: 20,
        retry_cap: 20,
        seed: 3,
    };
    let neg = sampling::sample_negatives_unigram(&g, &plan);
    let lengths: Vec<usize> = neg.examples.iter().map(|e| e.len()).collect();
    assert_eq!(lengths, vec![1, 3, 5, 7, 9]);
    assert_eq!(neg.shortfall.keys().copied().collect::<Vec<_>>(), vec![2, 4, 6, 8, 10]);
    let pos = sampling::sample_positives(&g, &plan);
    assert!(pos.examples.iter().all(|e| e.len() % 2 == 0));
}
