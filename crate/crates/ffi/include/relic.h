#ifndef RELIC_H
#define RELIC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum {
  RELIC_STATUS_OK = 0,
  RELIC_STATUS_NULL_POINTER = 1,
  RELIC_STATUS_INVALID_UTF8 = 2,
  RELIC_STATUS_PARSE_ERROR = 3,
  RELIC_STATUS_EMPTY_LANGUAGE = 4,
  RELIC_STATUS_INVALID_ARGUMENT = 5,
  RELIC_STATUS_IO_ERROR = 6,
  RELIC_STATUS_DATA_ERROR = 7,
  RELIC_STATUS_PANIC = 8,
} RelicStatus;

typedef enum {
  RELIC_PREDICTION_POSITIVE = 0,
  RELIC_PREDICTION_NEGATIVE = 1,
  RELIC_PREDICTION_UNKNOWN = 2,
} RelicPrediction;

typedef enum {
  RELIC_LABEL_POSITIVE = 0,
  RELIC_LABEL_NEGATIVE = 1,
} RelicLabel;

/**
 * Opaque handle to a loaded benchmark set.
 */
typedef struct RelicBenchmarkSet RelicBenchmarkSet;

/**
 * Opaque grammar handle.
 */
typedef struct RelicGrammar RelicGrammar;

typedef struct {
  size_t n_term;
  size_t n_nonterm;
  size_t n_lex;
  size_t n_nonlex;
} RelicStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *relic_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void relic_string_free(char *s);

/**
 * Parses the text grammar format (one rule per line).
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
RelicStatus relic_grammar_parse(const char *text, RelicGrammar **out);

/**
 * Generates a random reduced grammar.
 *
 * # Safety
 * `out` must be writable.
 */
RelicStatus relic_grammar_generate(size_t n_term,
                                   size_t n_nonterm,
                                   size_t n_lex,
                                   size_t n_nonlex,
                                   uint64_t seed,
                                   RelicGrammar **out);

/**
 * # Safety
 * `g` must come from this library and not have been freed. Null is ignored.
 */
void relic_grammar_free(RelicGrammar *g);

/**
 * Writes a new handle holding the reduced grammar.
 *
 * # Safety
 * `g` must be a live handle; `out` must be writable.
 */
RelicStatus relic_grammar_reduce(const RelicGrammar *g, RelicGrammar **out);

/**
 * # Safety
 * `g` must be a live handle; `out` must be writable.
 */
RelicStatus relic_grammar_stats(const RelicGrammar *g, RelicStats *out);

/**
 * Renders the grammar in its text format.
 *
 * # Safety
 * `g` must be a live handle; `out` must be writable.
 */
RelicStatus relic_grammar_render(const RelicGrammar *g, char **out);

/**
 * Membership test for a space-separated string such as `"t1 t2 t1"`.
 *
 * # Safety
 * `g` must be a live handle, `tokens` NUL-terminated, `out` writable.
 */
RelicStatus relic_grammar_recognize(const RelicGrammar *g, const char *tokens, bool *out);

/**
 * Renders the evaluation prompt for a grammar and a query string.
 *
 * # Safety
 * `g` must be a live handle, `tokens` NUL-terminated, `out` writable.
 */
RelicStatus relic_render_prompt(const RelicGrammar *g, const char *tokens, char **out);

/**
 * Classifies a model completion by its last standalone yes/no. Null or
 * invalid UTF-8 gives Unknown.
 *
 * # Safety
 * `completion` must be null or NUL-terminated.
 */
RelicPrediction relic_extract_prediction(const char *completion);

/**
 * Loads a benchmark file (one document or one per line). When `verify_all`
 * is true every label is re-checked, otherwise a fixed sample per grammar.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
RelicStatus relic_benchmark_set_load(const char *path, bool verify_all, RelicBenchmarkSet **out);

/**
 * # Safety
 * `set` must come from this library and not have been freed. Null is ignored.
 */
void relic_benchmark_set_free(RelicBenchmarkSet *set);

/**
 * Number of benchmarks; 0 for null.
 *
 * # Safety
 * `set` must be null or a live handle.
 */
size_t relic_benchmark_set_len(const RelicBenchmarkSet *set);

/**
 * Copies the grammar of benchmark `index` into a new handle.
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
RelicStatus relic_benchmark_set_grammar(const RelicBenchmarkSet *set,
                                        size_t index,
                                        RelicGrammar **out);

/**
 * Number of examples in benchmark `index`.
 *
 * # Safety
 * `set` must be a live handle; `out` must be writable.
 */
RelicStatus relic_benchmark_example_count(const RelicBenchmarkSet *set, size_t index, size_t *out);

/**
 * Example `example` of benchmark `index`: its tokens as a space-separated
 * string and its label.
 *
 * # Safety
 * `set` must be a live handle; `tokens` and `label` must be writable.
 */
RelicStatus relic_benchmark_example(const RelicBenchmarkSet *set,
                                    size_t index,
                                    size_t example,
                                    char **tokens,
                                    RelicLabel *label);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RELIC_H */
