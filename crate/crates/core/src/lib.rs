//! Synthetic context-free language recognition benchmarks.
//!
//! Random CNF grammars are generated and reduced ([`generate`]), positive and
//! negative strings are sampled and verified with CYK ([`sampling`],
//! [`recognizer`]), bundled into benchmarks and prompts ([`dataset`]), sent to
//! chat endpoints or offline baselines ([`eval`]) and scored ([`metrics`]).

pub mod dataset;
pub mod eval;
pub mod generate;
pub mod grammar;
pub mod metrics;
pub mod recognizer;
pub mod sampling;
pub mod stats;

pub use grammar::{Grammar, GrammarError, GrammarStats, Head, NonTerminal, Rule, Symbol, Terminal};
pub use recognizer::{Recognizer, TokenString};
