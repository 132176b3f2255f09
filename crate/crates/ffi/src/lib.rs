//! C ABI for the relic library.
//!
//! Objects are handed out as opaque pointers and must be released with the
//! matching `*_free` function. Every fallible call returns a [`RelicStatus`];
//! on failure, [`relic_last_error`] describes the problem. Strings returned
//! through `char **` out-parameters are owned by the caller and released with
//! [`relic_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use relic::dataset::{self, Benchmark, Verify};
use relic::eval::{self, Prediction};
use relic::generate::{self, GenError, GenParams};
use relic::recognizer::cyk_recognize;
use relic::sampling::Label;
use relic::{Grammar, GrammarError, TokenString};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelicStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    EmptyLanguage = 4,
    InvalidArgument = 5,
    IoError = 6,
    DataError = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelicPrediction {
    Positive = 0,
    Negative = 1,
    Unknown = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelicLabel {
    Positive = 0,
    Negative = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RelicStats {
    pub n_term: usize,
    pub n_nonterm: usize,
    pub n_lex: usize,
    pub n_nonlex: usize,
}

/// Opaque grammar handle.
pub struct RelicGrammar {
    inner: Grammar,
}

/// Opaque handle to a loaded benchmark set.
pub struct RelicBenchmarkSet {
    inner: Vec<Benchmark>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: RelicStatus, msg: impl Into<String>) -> RelicStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `RelicStatus::Panic`.
fn guard(f: impl FnOnce() -> RelicStatus) -> RelicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(RelicStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, RelicStatus> {
    if p.is_null() {
        return Err(fail(RelicStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(RelicStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_string(s: String, out: *mut *mut c_char) -> RelicStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            RelicStatus::Ok
        }
        Err(_) => fail(RelicStatus::DataError, "string contains a NUL byte"),
    }
}

fn grammar_status(e: &GrammarError) -> RelicStatus {
    match e {
        GrammarError::EmptyLanguage => RelicStatus::EmptyLanguage,
        _ => RelicStatus::ParseError,
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(RelicStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn relic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn relic_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses the text grammar format (one rule per line).
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_parse(text: *const c_char, out: *mut *mut RelicGrammar) -> RelicStatus {
    guard(|| {
        non_null!(out);
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Grammar::parse_text(text) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(RelicGrammar { inner: g }));
                RelicStatus::Ok
            }
            Err(e) => fail(RelicStatus::ParseError, e.to_string()),
        }
    })
}

/// Generates a random reduced grammar.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_generate(
    n_term: usize,
    n_nonterm: usize,
    n_lex: usize,
    n_nonlex: usize,
    seed: u64,
    out: *mut *mut RelicGrammar,
) -> RelicStatus {
    guard(|| {
        non_null!(out);
        match generate::generate(&GenParams::new(n_term, n_nonterm, n_lex, n_nonlex, seed)) {
            Ok(g) => {
                *out = Box::into_raw(Box::new(RelicGrammar { inner: g }));
                RelicStatus::Ok
            }
            Err(e @ GenError::EmptyLanguage) => fail(RelicStatus::EmptyLanguage, e.to_string()),
            Err(e) => fail(RelicStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `g` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_free(g: *mut RelicGrammar) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Writes a new handle holding the reduced grammar.
///
/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_reduce(g: *const RelicGrammar, out: *mut *mut RelicGrammar) -> RelicStatus {
    guard(|| {
        non_null!(g, out);
        match (*g).inner.reduce() {
            Ok(r) => {
                *out = Box::into_raw(Box::new(RelicGrammar { inner: r }));
                RelicStatus::Ok
            }
            Err(e) => fail(grammar_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_stats(g: *const RelicGrammar, out: *mut RelicStats) -> RelicStatus {
    guard(|| {
        non_null!(g, out);
        let s = (*g).inner.stats();
        *out = RelicStats {
            n_term: s.n_term,
            n_nonterm: s.n_nonterm,
            n_lex: s.n_lex,
            n_nonlex: s.n_nonlex,
        };
        RelicStatus::Ok
    })
}

/// Renders the grammar in its text format.
///
/// # Safety
/// `g` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_render(g: *const RelicGrammar, out: *mut *mut c_char) -> RelicStatus {
    guard(|| {
        non_null!(g, out);
        out_string((*g).inner.render_text(), out)
    })
}

unsafe fn tokens_arg(tokens: *const c_char) -> Result<TokenString, RelicStatus> {
    let text = str_arg(tokens, "tokens")?;
    text.parse::<TokenString>()
        .map_err(|e| fail(RelicStatus::ParseError, e.to_string()))
}

/// Membership test for a space-separated string such as `"t1 t2 t1"`.
///
/// # Safety
/// `g` must be a live handle, `tokens` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relic_grammar_recognize(
    g: *const RelicGrammar,
    tokens: *const c_char,
    out: *mut bool,
) -> RelicStatus {
    guard(|| {
        non_null!(g, out);
        match tokens_arg(tokens) {
            Ok(t) => {
                *out = cyk_recognize(&(*g).inner, &t);
                RelicStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Renders the evaluation prompt for a grammar and a query string.
///
/// # Safety
/// `g` must be a live handle, `tokens` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn relic_render_prompt(
    g: *const RelicGrammar,
    tokens: *const c_char,
    out: *mut *mut c_char,
) -> RelicStatus {
    guard(|| {
        non_null!(g, out);
        match tokens_arg(tokens) {
            Ok(t) => out_string(dataset::render_prompt(&(*g).inner, &t), out),
            Err(s) => s,
        }
    })
}

/// Classifies a model completion by its last standalone yes/no. Null or
/// invalid UTF-8 gives Unknown.
///
/// # Safety
/// `completion` must be null or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn relic_extract_prediction(completion: *const c_char) -> RelicPrediction {
    if completion.is_null() {
        return RelicPrediction::Unknown;
    }
    match CStr::from_ptr(completion).to_str() {
        Ok(s) => match eval::extract_prediction(s) {
            Prediction::Positive => RelicPrediction::Positive,
            Prediction::Negative => RelicPrediction::Negative,
            Prediction::Unknown => RelicPrediction::Unknown,
        },
        Err(_) => RelicPrediction::Unknown,
    }
}

/// Loads a benchmark file (one document or one per line). When `verify_all`
/// is true every label is re-checked, otherwise a fixed sample per grammar.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_benchmark_set_load(
    path: *const c_char,
    verify_all: bool,
    out: *mut *mut RelicBenchmarkSet,
) -> RelicStatus {
    guard(|| {
        non_null!(out);
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let verify = if verify_all { Verify::All } else { Verify::default() };
        match dataset::load_benchmarks(Path::new(path), verify) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(RelicBenchmarkSet { inner: set }));
                RelicStatus::Ok
            }
            Err(dataset::DatasetError::Io(e)) => fail(RelicStatus::IoError, e.to_string()),
            Err(e) => fail(RelicStatus::DataError, e.to_string()),
        }
    })
}

/// # Safety
/// `set` must come from this library and not have been freed. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn relic_benchmark_set_free(set: *mut RelicBenchmarkSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Number of benchmarks; 0 for null.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn relic_benchmark_set_len(set: *const RelicBenchmarkSet) -> usize {
    if set.is_null() {
        0
    } else {
        (*set).inner.len()
    }
}

unsafe fn benchmark<'a>(set: *const RelicBenchmarkSet, index: usize) -> Result<&'a Benchmark, RelicStatus> {
    if set.is_null() {
        return Err(fail(RelicStatus::NullPointer, "set is null"));
    }
    let set = &*set;
    set.inner.get(index).ok_or_else(|| {
        fail(
            RelicStatus::InvalidArgument,
            format!("benchmark index {index} out of range"),
        )
    })
}

/// Copies the grammar of benchmark `index` into a new handle.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_benchmark_set_grammar(
    set: *const RelicBenchmarkSet,
    index: usize,
    out: *mut *mut RelicGrammar,
) -> RelicStatus {
    guard(|| {
        non_null!(out);
        match benchmark(set, index) {
            Ok(b) => {
                *out = Box::into_raw(Box::new(RelicGrammar {
                    inner: b.grammar.clone(),
                }));
                RelicStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Number of examples in benchmark `index`.
///
/// # Safety
/// `set` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_benchmark_example_count(
    set: *const RelicBenchmarkSet,
    index: usize,
    out: *mut usize,
) -> RelicStatus {
    guard(|| {
        non_null!(out);
        match benchmark(set, index) {
            Ok(b) => {
                *out = b.examples.len();
                RelicStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Example `example` of benchmark `index`: its tokens as a space-separated
/// string and its label.
///
/// # Safety
/// `set` must be a live handle; `tokens` and `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn relic_benchmark_example(
    set: *const RelicBenchmarkSet,
    index: usize,
    example: usize,
    tokens: *mut *mut c_char,
    label: *mut RelicLabel,
) -> RelicStatus {
    guard(|| {
        non_null!(tokens, label);
        let b = match benchmark(set, index) {
            Ok(b) => b,
            Err(s) => return s,
        };
        let Some(e) = b.examples.get(example) else {
            return fail(
                RelicStatus::InvalidArgument,
                format!("example index {example} out of range"),
            );
        };
        *label = match e.label {
            Label::Positive => RelicLabel::Positive,
            Label::Negative => RelicLabel::Negative,
        };
        out_string(e.tokens.to_string(), tokens)
    })
}
