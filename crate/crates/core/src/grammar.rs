//! Grammar data model: CNF rules over `S`, `NT<k>` and `t<k>` symbols, the
//! line-oriented text format, structural validation and reduction.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A terminal symbol `t<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Terminal(pub u32);

/// A non-start nonterminal symbol `NT<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NonTerminal(pub u32);

/// Left-hand side of a nonlexical rule: either the start symbol or an `NT<k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Head {
    Start,
    Nt(NonTerminal),
}

/// Any grammar symbol, used for rendering and derivation trees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Start,
    NonTerminal(NonTerminal),
    Terminal(Terminal),
}

impl fmt::Display for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

impl fmt::Display for NonTerminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NT{}", self.0)
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Start => f.write_str("S"),
            Head::Nt(nt) => nt.fmt(f),
        }
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Start => f.write_str("S"),
            Symbol::NonTerminal(nt) => nt.fmt(f),
            Symbol::Terminal(t) => t.fmt(f),
        }
    }
}

impl From<NonTerminal> for Head {
    fn from(nt: NonTerminal) -> Self {
        Head::Nt(nt)
    }
}

impl From<Head> for Symbol {
    fn from(head: Head) -> Self {
        match head {
            Head::Start => Symbol::Start,
            Head::Nt(nt) => Symbol::NonTerminal(nt),
        }
    }
}

fn parse_index(s: &str, prefix: &str) -> Option<u32> {
    let digits = s.strip_prefix(prefix)?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl FromStr for Terminal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_index(s, "t")
            .map(Terminal)
            .ok_or_else(|| format!("invalid terminal `{s}`"))
    }
}

impl FromStr for NonTerminal {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_index(s, "NT")
            .map(NonTerminal)
            .ok_or_else(|| format!("invalid nonterminal `{s}`"))
    }
}

impl FromStr for Head {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "S" {
            Ok(Head::Start)
        } else {
            s.parse().map(Head::Nt)
        }
    }
}

/// A CNF production. Lexical rules never have `S` on the left and
/// nonlexical rules never have `S` on the right; the variants make both
/// unrepresentable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    Lexical {
        lhs: NonTerminal,
        terminal: Terminal,
    },
    Nonlexical {
        lhs: Head,
        left: NonTerminal,
        right: NonTerminal,
    },
}

impl Rule {
    pub fn lexical(lhs: u32, terminal: u32) -> Self {
        Rule::Lexical {
            lhs: NonTerminal(lhs),
            terminal: Terminal(terminal),
        }
    }

    /// Nonlexical rule whose left-hand side is `NT<lhs>`.
    pub fn binary(lhs: u32, left: u32, right: u32) -> Self {
        Rule::Nonlexical {
            lhs: Head::Nt(NonTerminal(lhs)),
            left: NonTerminal(left),
            right: NonTerminal(right),
        }
    }

    /// Nonlexical rule whose left-hand side is `S`.
    pub fn start(left: u32, right: u32) -> Self {
        Rule::Nonlexical {
            lhs: Head::Start,
            left: NonTerminal(left),
            right: NonTerminal(right),
        }
    }

    pub fn head(&self) -> Head {
        match *self {
            Rule::Lexical { lhs, .. } => Head::Nt(lhs),
            Rule::Nonlexical { lhs, .. } => lhs,
        }
    }

    pub fn is_lexical(&self) -> bool {
        matches!(self, Rule::Lexical { .. })
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Lexical { lhs, terminal } => write!(f, "{lhs} -> '{terminal}'"),
            Rule::Nonlexical { lhs, left, right } => write!(f, "{lhs} -> {left} {right}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl FromStr for Rule {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let (lhs, rhs) = line
            .split_once(" -> ")
            .ok_or_else(|| "expected `LHS -> RHS`".to_string())?;
        let lhs: Head = lhs.parse()?;
        if let Some(quoted) = rhs.strip_prefix('\'') {
            let inner = quoted
                .strip_suffix('\'')
                .ok_or_else(|| "unterminated terminal quote".to_string())?;
            let terminal: Terminal = inner.parse()?;
            match lhs {
                Head::Start => Err("lexical rule with start symbol on the left".to_string()),
                Head::Nt(lhs) => Ok(Rule::Lexical { lhs, terminal }),
            }
        } else {
            let mut parts = rhs.split(' ');
            let (Some(left), Some(right), None) = (parts.next(), parts.next(), parts.next())
            else {
                return Err("expected two right-hand nonterminals or one quoted terminal".into());
            };
            Ok(Rule::Nonlexical {
                lhs,
                left: left.parse()?,
                right: right.parse()?,
            })
        }
    }
}

/// Post-reduction size of a grammar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarStats {
    pub n_term: usize,
    pub n_nonterm: usize,
    pub n_lex: usize,
    pub n_nonlex: usize,
}

impl GrammarStats {
    /// `G = n_lex + n_nonlex`.
    pub fn size(&self) -> usize {
        self.n_lex + self.n_nonlex
    }

    /// The four counts in `(n_term, n_nonterm, n_lex, n_nonlex)` order.
    pub fn as_array(&self) -> [usize; 4] {
        [self.n_term, self.n_nonterm, self.n_lex, self.n_nonlex]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("grammar generates the empty language")]
    EmptyLanguage,
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// A CNF grammar with a privileged start symbol `S`.
///
/// Rule order is preserved exactly as constructed; symbol indices are never
/// renumbered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    rules: Vec<Rule>,
    terminals: BTreeSet<Terminal>,
    nonterminals: BTreeSet<NonTerminal>,
}

impl Grammar {
    /// Builds a grammar whose symbol sets are exactly those used by `rules`.
    pub fn from_rules(rules: Vec<Rule>) -> Self {
        let mut terminals = BTreeSet::new();
        let mut nonterminals = BTreeSet::new();
        for rule in &rules {
            match *rule {
                Rule::Lexical { lhs, terminal } => {
                    nonterminals.insert(lhs);
                    terminals.insert(terminal);
                }
                Rule::Nonlexical { lhs, left, right } => {
                    if let Head::Nt(nt) = lhs {
                        nonterminals.insert(nt);
                    }
                    nonterminals.insert(left);
                    nonterminals.insert(right);
                }
            }
        }
        Grammar {
            rules,
            terminals,
            nonterminals,
        }
    }

    /// Builds a grammar with explicitly declared symbol sets. The result may
    /// violate the grammar invariants; see [`Grammar::validate`].
    pub fn with_symbols(
        rules: Vec<Rule>,
        terminals: BTreeSet<Terminal>,
        nonterminals: BTreeSet<NonTerminal>,
    ) -> Self {
        Grammar {
            rules,
            terminals,
            nonterminals,
        }
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn terminals(&self) -> &BTreeSet<Terminal> {
        &self.terminals
    }

    pub fn nonterminals(&self) -> &BTreeSet<NonTerminal> {
        &self.nonterminals
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Returns every structural violation; an empty list means the grammar
    /// is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        let mut seen = HashSet::with_capacity(self.rules.len());
        let mut used_terminals = BTreeSet::new();
        let mut used_nonterminals = BTreeSet::new();
        for rule in &self.rules {
            if !seen.insert(*rule) {
                violations.push(format!("duplicate rule {rule}"));
            }
            match *rule {
                Rule::Lexical { lhs, terminal } => {
                    used_terminals.insert(terminal);
                    used_nonterminals.insert(lhs);
                }
                Rule::Nonlexical { lhs, left, right } => {
                    if let Head::Nt(nt) = lhs {
                        used_nonterminals.insert(nt);
                    }
                    used_nonterminals.insert(left);
                    used_nonterminals.insert(right);
                }
            }
        }
        for t in self.terminals.difference(&used_terminals) {
            violations.push(format!("orphan terminal {t}"));
        }
        for t in used_terminals.difference(&self.terminals) {
            violations.push(format!("undeclared terminal {t}"));
        }
        for nt in self.nonterminals.difference(&used_nonterminals) {
            violations.push(format!("orphan nonterminal {nt}"));
        }
        for nt in used_nonterminals.difference(&self.nonterminals) {
            violations.push(format!("undeclared nonterminal {nt}"));
        }
        violations
    }

    /// Keeps exactly the rules that are productive and reachable from `S`.
    ///
    /// Productivity is computed first, then reachability over the productive
    /// subgrammar, so one pass of each yields a fully reduced grammar.
    pub fn reduce(&self) -> Result<Grammar, GrammarError> {
        let mut productive: HashSet<Head> = self
            .rules
            .iter()
            .filter(|r| r.is_lexical())
            .map(Rule::head)
            .collect();
        loop {
            let before = productive.len();
            for rule in &self.rules {
                if let Rule::Nonlexical { lhs, left, right } = *rule {
                    if productive.contains(&Head::Nt(left)) && productive.contains(&Head::Nt(right))
                    {
                        productive.insert(lhs);
                    }
                }
            }
            if productive.len() == before {
                break;
            }
        }
        if !productive.contains(&Head::Start) {
            return Err(GrammarError::EmptyLanguage);
        }

        let is_productive_rule = |rule: &Rule| match *rule {
            Rule::Lexical { .. } => true,
            Rule::Nonlexical { left, right, .. } => {
                productive.contains(&Head::Nt(left)) && productive.contains(&Head::Nt(right))
            }
        };

        let mut by_head: HashMap<Head, Vec<&Rule>> = HashMap::new();
        for rule in self.rules.iter().filter(|r| is_productive_rule(r)) {
            by_head.entry(rule.head()).or_default().push(rule);
        }
        let mut reachable = HashSet::from([Head::Start]);
        let mut stack = vec![Head::Start];
        while let Some(head) = stack.pop() {
            for rule in by_head.get(&head).into_iter().flatten() {
                if let Rule::Nonlexical { left, right, .. } = **rule {
                    for child in [Head::Nt(left), Head::Nt(right)] {
                        if reachable.insert(child) {
                            stack.push(child);
                        }
                    }
                }
            }
        }

        let rules = self
            .rules
            .iter()
            .filter(|r| is_productive_rule(r) && reachable.contains(&r.head()))
            .copied()
            .collect();
        Ok(Grammar::from_rules(rules))
    }

    /// Size statistics counted from the rule list.
    pub fn stats(&self) -> GrammarStats {
        let n_lex = self.rules.iter().filter(|r| r.is_lexical()).count();
        GrammarStats {
            n_term: self.terminals.len(),
            n_nonterm: self.nonterminals.len(),
            n_lex,
            n_nonlex: self.rules.len() - n_lex,
        }
    }

    /// One rule per line, without a trailing newline.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&rule.to_string());
        }
        out
    }

    /// Parses the line format produced by [`Grammar::render_text`]. Blank
    /// lines are skipped and a trailing `\r` is tolerated.
    pub fn parse_text(text: &str) -> Result<Grammar, ParseError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            let rule = line.parse().map_err(|message| ParseError {
                line: i + 1,
                message,
            })?;
            rules.push(rule);
        }
        Ok(Grammar::from_rules(rules))
    }

    /// Rules whose left-hand side is `head`, in grammar order.
    pub fn rules_for(&self, head: Head) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(move |r| r.head() == head)
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_text())
    }
}

impl FromStr for Grammar {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Grammar::parse_text(s)
    }
}

impl Serialize for Grammar {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.render_text())
    }
}

impl<'de> Deserialize<'de> for Grammar {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Grammar::parse_text(&text).map_err(serde::de::Error::custom)
    }
}
