//! Membership decisions for CNF grammars.
//!
//! [`Recognizer`] runs CYK over bitset cells; [`enumerate_language`] is an
//! independent generative oracle used to cross-check it on small grammars.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::grammar::{Grammar, Head, NonTerminal, Rule, Symbol, Terminal};

/// An ordered sequence of terminals, rendered space separated (`t3 t1 t3`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenString(pub Vec<Terminal>);

impl TokenString {
    pub fn new(tokens: Vec<Terminal>) -> Self {
        TokenString(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Terminal] {
        &self.0
    }
}

impl From<Vec<Terminal>> for TokenString {
    fn from(tokens: Vec<Terminal>) -> Self {
        TokenString(tokens)
    }
}

impl fmt::Display for TokenString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl serde::Serialize for TokenString {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for t in &self.0 {
            seq.serialize_element(&t.to_string())?;
        }
        seq.end()
    }
}

impl<'de> serde::Deserialize<'de> for TokenString {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<String>::deserialize(deserializer)?;
        raw.iter()
            .map(|s| s.parse::<Terminal>())
            .collect::<Result<Vec<_>, _>>()
            .map(TokenString)
            .map_err(serde::de::Error::custom)
    }
}

impl FromStr for TokenString {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()
            .map(TokenString)
    }
}

/// A derivation witness. Leaves are terminals; a node with one child is a
/// lexical rule application and a node with two children a nonlexical one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DerivationTree {
    pub symbol: Symbol,
    pub children: Vec<DerivationTree>,
}

impl DerivationTree {
    fn leaf(t: Terminal) -> Self {
        DerivationTree {
            symbol: Symbol::Terminal(t),
            children: Vec::new(),
        }
    }

    /// Terminals at the leaves, left to right.
    pub fn frontier(&self) -> TokenString {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            match node.symbol {
                Symbol::Terminal(t) if node.children.is_empty() => out.push(t),
                _ => stack.extend(node.children.iter().rev()),
            }
        }
        TokenString(out)
    }

    /// The rule applied at this node, if it is an internal node of a
    /// well-shaped tree.
    pub fn rule(&self) -> Option<Rule> {
        let head = match self.symbol {
            Symbol::Start => Head::Start,
            Symbol::NonTerminal(nt) => Head::Nt(nt),
            Symbol::Terminal(_) => return None,
        };
        match (head, self.children.as_slice()) {
            (Head::Nt(lhs), [child]) => match child.symbol {
                Symbol::Terminal(terminal) if child.children.is_empty() => {
                    Some(Rule::Lexical { lhs, terminal })
                }
                _ => None,
            },
            (lhs, [l, r]) => match (l.symbol, r.symbol) {
                (Symbol::NonTerminal(left), Symbol::NonTerminal(right)) => {
                    Some(Rule::Nonlexical { lhs, left, right })
                }
                _ => None,
            },
            _ => None,
        }
    }

    /// Checks that the root is `S` and every internal node applies a rule of
    /// `grammar`.
    pub fn is_valid_for(&self, grammar: &Grammar) -> bool {
        if self.symbol != Symbol::Start {
            return false;
        }
        let rules: std::collections::HashSet<&Rule> = grammar.rules().iter().collect();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            if let Symbol::Terminal(_) = node.symbol {
                if !node.children.is_empty() {
                    return false;
                }
                continue;
            }
            match node.rule() {
                Some(rule) if rules.contains(&rule) => stack.extend(node.children.iter()),
                _ => return false,
            }
        }
        true
    }
}

impl fmt::Display for DerivationTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.symbol {
            Symbol::Terminal(t) => write!(f, "'{t}'"),
            sym => {
                write!(f, "{sym}(")?;
                for (i, c) in self.children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    c.fmt(f)?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Indicative bounds on the number of chain-of-thought steps needed to
/// recognize a string of length `l` under a grammar of size `G`, with
/// constant factors fixed to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CotBudgetBounds {
    pub lower: f64,
    pub upper: f64,
}

pub fn cot_budget_bounds(grammar_size: usize, length: usize) -> CotBudgetBounds {
    let g = grammar_size as f64;
    let l = length as f64;
    CotBudgetBounds {
        lower: g * l.powf(1.7),
        upper: g * l.powi(6),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BitSet<'a> {
    words: &'a [u64],
}

impl BitSet<'_> {
    #[inline]
    fn contains(&self, i: usize) -> bool {
        self.words[i >> 6] & (1 << (i & 63)) != 0
    }
}

/// CYK chart: one bitset over dense nonterminal ids per span `(start, len)`.
struct Chart {
    n: usize,
    words: usize,
    bits: Vec<u64>,
}

impl Chart {
    fn new(n: usize, symbols: usize) -> Self {
        let words = symbols.div_ceil(64).max(1);
        Chart {
            n,
            words,
            bits: vec![0; n * n * words],
        }
    }

    #[inline]
    fn offset(&self, start: usize, len: usize) -> usize {
        (start * self.n + (len - 1)) * self.words
    }

    #[inline]
    fn cell(&self, start: usize, len: usize) -> BitSet<'_> {
        let o = self.offset(start, len);
        BitSet {
            words: &self.bits[o..o + self.words],
        }
    }

    #[inline]
    fn set(&mut self, start: usize, len: usize, i: usize) {
        let o = self.offset(start, len);
        self.bits[o + (i >> 6)] |= 1 << (i & 63);
    }

    #[inline]
    fn test(&self, start: usize, len: usize, i: usize) -> bool {
        self.cell(start, len).contains(i)
    }
}

/// A grammar compiled for repeated CYK queries.
///
/// Dense id 0 is `S`; nonterminals follow in ascending index order.
pub struct Recognizer<'g> {
    grammar: &'g Grammar,
    symbols: usize,
    /// `names[d - 1]` is the nonterminal with dense id `d`.
    names: Vec<NonTerminal>,
    /// Dense heads of lexical rules, per terminal.
    lexical: HashMap<Terminal, Vec<usize>>,
    /// `(right, head)` pairs of nonlexical rules, per left child.
    by_left: Vec<Vec<(usize, usize)>>,
    /// Nonlexical rules per dense head as `(left, right, rule index)`, in
    /// grammar order.
    by_head: Vec<Vec<(usize, usize, usize)>>,
}

impl<'g> Recognizer<'g> {
    pub fn new(grammar: &'g Grammar) -> Self {
        let mut dense = HashMap::new();
        let mut next = 1;
        let mut nts: BTreeSet<NonTerminal> = grammar.nonterminals().clone();
        for rule in grammar.rules() {
            match *rule {
                Rule::Lexical { lhs, .. } => {
                    nts.insert(lhs);
                }
                Rule::Nonlexical { lhs, left, right } => {
                    if let Head::Nt(nt) = lhs {
                        nts.insert(nt);
                    }
                    nts.insert(left);
                    nts.insert(right);
                }
            }
        }
        let names: Vec<NonTerminal> = nts.into_iter().collect();
        for &nt in &names {
            dense.insert(nt, next);
            next += 1;
        }
        let symbols = next;
        let id = |h: Head| match h {
            Head::Start => 0,
            Head::Nt(nt) => dense[&nt],
        };
        let mut lexical: HashMap<Terminal, Vec<usize>> = HashMap::new();
        let mut by_left = vec![Vec::new(); symbols];
        let mut by_head = vec![Vec::new(); symbols];
        for (ri, rule) in grammar.rules().iter().enumerate() {
            match *rule {
                Rule::Lexical { lhs, terminal } => {
                    let entry = lexical.entry(terminal).or_default();
                    let h = dense[&lhs];
                    if !entry.contains(&h) {
                        entry.push(h);
                    }
                }
                Rule::Nonlexical { lhs, left, right } => {
                    let (h, l, r) = (id(lhs), dense[&left], dense[&right]);
                    by_left[l].push((r, h));
                    by_head[h].push((l, r, ri));
                }
            }
        }
        Recognizer {
            grammar,
            symbols,
            names,
            lexical,
            by_left,
            by_head,
        }
    }

    pub fn grammar(&self) -> &'g Grammar {
        self.grammar
    }

    /// Fills the chart; returns it with the number of rule checks performed.
    fn chart(&self, s: &[Terminal]) -> Option<(Chart, u64)> {
        let n = s.len();
        if n == 0 {
            return None;
        }
        let mut chart = Chart::new(n, self.symbols);
        let mut work = 0u64;
        for (i, t) in s.iter().enumerate() {
            let heads = self.lexical.get(t)?;
            for &h in heads {
                chart.set(i, 1, h);
            }
            work += heads.len() as u64;
        }
        let mut found = Vec::new();
        for len in 2..=n {
            for start in 0..=(n - len) {
                for split in 1..len {
                    let left = chart.cell(start, split);
                    let right = chart.cell(start + split, len - split);
                    for (w, &word) in left.words.iter().enumerate() {
                        let mut bits = word;
                        while bits != 0 {
                            let b = (w << 6) | bits.trailing_zeros() as usize;
                            bits &= bits - 1;
                            for &(r, h) in &self.by_left[b] {
                                work += 1;
                                if right.contains(r) {
                                    found.push(h);
                                }
                            }
                        }
                    }
                }
                for h in found.drain(..) {
                    chart.set(start, len, h);
                }
            }
        }
        Some((chart, work))
    }

    /// True iff `S` derives `s`.
    pub fn recognize(&self, s: &TokenString) -> bool {
        self.recognize_counted(s).0
    }

    /// Like [`Recognizer::recognize`], also returning the number of rule
    /// checks performed; bounded by `G * l^3`.
    pub fn recognize_counted(&self, s: &TokenString) -> (bool, u64) {
        match self.chart(&s.0) {
            Some((chart, work)) => (chart.test(0, s.len(), 0), work),
            None => (false, 0),
        }
    }

    /// Returns a derivation of `s` from `S`, if one exists. Ties are broken
    /// by the smallest split point, then by the earliest rule in grammar
    /// order.
    pub fn parse(&self, s: &TokenString) -> Option<DerivationTree> {
        let (chart, _) = self.chart(&s.0)?;
        if !chart.test(0, s.len(), 0) {
            return None;
        }
        Some(self.build(&chart, &s.0, 0, 0, s.len()))
    }

    fn symbol_of(&self, dense_id: usize) -> Symbol {
        if dense_id == 0 {
            return Symbol::Start;
        }
        Symbol::NonTerminal(self.names[dense_id - 1])
    }

    fn build(
        &self,
        chart: &Chart,
        s: &[Terminal],
        head: usize,
        start: usize,
        len: usize,
    ) -> DerivationTree {
        let symbol = self.symbol_of(head);
        if len == 1 {
            return DerivationTree {
                symbol,
                children: vec![DerivationTree::leaf(s[start])],
            };
        }
        for split in 1..len {
            for &(l, r, ri) in &self.by_head[head] {
                if chart.test(start, split, l) && chart.test(start + split, len - split, r) {
                    debug_assert_eq!(self.grammar.rules()[ri].head(), head_of(symbol));
                    return DerivationTree {
                        symbol,
                        children: vec![
                            self.build(chart, s, l, start, split),
                            self.build(chart, s, r, start + split, len - split),
                        ],
                    };
                }
            }
        }
        unreachable!("chart cell set without a supporting rule")
    }
}

fn head_of(symbol: Symbol) -> Head {
    match symbol {
        Symbol::Start => Head::Start,
        Symbol::NonTerminal(nt) => Head::Nt(nt),
        Symbol::Terminal(_) => unreachable!(),
    }
}

pub fn cyk_recognize(grammar: &Grammar, s: &TokenString) -> bool {
    Recognizer::new(grammar).recognize(s)
}

pub fn cyk_parse(grammar: &Grammar, s: &TokenString) -> Option<DerivationTree> {
    Recognizer::new(grammar).parse(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnumerateError {
    #[error("maximum length {0} exceeds the enumeration limit of {MAX_ENUMERATION_LEN}")]
    LengthTooLarge(usize),
    #[error("language exceeds the cardinality cap of {0} strings")]
    LimitExceeded(usize),
}

pub const MAX_ENUMERATION_LEN: usize = 8;
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// All strings of length `<= max_len` derivable from `S`, computed by
/// bottom-up rule closure layered by length.
pub fn enumerate_language(
    grammar: &Grammar,
    max_len: usize,
) -> Result<BTreeSet<TokenString>, EnumerateError> {
    enumerate_language_capped(grammar, max_len, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_language_capped(
    grammar: &Grammar,
    max_len: usize,
    cap: usize,
) -> Result<BTreeSet<TokenString>, EnumerateError> {
    if max_len > MAX_ENUMERATION_LEN {
        return Err(EnumerateError::LengthTooLarge(max_len));
    }
    // lang[head][len] = strings of exactly that length derivable from head
    let mut lang: HashMap<Head, Vec<BTreeSet<Vec<Terminal>>>> = HashMap::new();
    let mut total = 0usize;
    for rule in grammar.rules() {
        lang.entry(rule.head())
            .or_insert_with(|| vec![BTreeSet::new(); max_len + 1]);
    }
    if max_len >= 1 {
        for rule in grammar.rules() {
            if let Rule::Lexical { lhs, terminal } = *rule {
                lang.get_mut(&Head::Nt(lhs)).unwrap()[1].insert(vec![terminal]);
            }
        }
    }
    let empty = vec![BTreeSet::new(); max_len + 1];
    for len in 2..=max_len {
        let mut additions: Vec<(Head, Vec<Terminal>)> = Vec::new();
        for rule in grammar.rules() {
            let Rule::Nonlexical { lhs, left, right } = *rule else {
                continue;
            };
            let ls = lang.get(&Head::Nt(left)).unwrap_or(&empty);
            let rs = lang.get(&Head::Nt(right)).unwrap_or(&empty);
            for k in 1..len {
                for x in &ls[k] {
                    for y in &rs[len - k] {
                        let mut s = x.clone();
                        s.extend_from_slice(y);
                        additions.push((lhs, s));
                    }
                }
            }
        }
        for (head, s) in additions {
            if lang.get_mut(&head).unwrap()[len].insert(s) {
                total += 1;
                if total > cap {
                    return Err(EnumerateError::LimitExceeded(cap));
                }
            }
        }
    }
    Ok(lang
        .remove(&Head::Start)
        .unwrap_or_default()
        .into_iter()
        .flatten()
        .map(TokenString)
        .collect())
}
