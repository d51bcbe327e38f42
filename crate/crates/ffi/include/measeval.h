#ifndef MEASEVAL_H
#define MEASEVAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MeasevalStatus {
  MEASEVAL_STATUS_OK = 0,
  MEASEVAL_STATUS_NULL_ARGUMENT = 1,
  MEASEVAL_STATUS_INVALID_UTF8 = 2,
  MEASEVAL_STATUS_INVALID_ARGUMENT = 3,
  MEASEVAL_STATUS_OVERSIZED_PROMPT = 4,
  MEASEVAL_STATUS_PARSE_FAILED = 5,
  MEASEVAL_STATUS_UNKNOWN_DOCUMENT = 6,
  MEASEVAL_STATUS_NOT_FOUND = 7,
  MEASEVAL_STATUS_PANIC = 99,
} MeasevalStatus;

// Few-shot examples used to build prompts.
typedef struct MeasevalExamples MeasevalExamples;

// Result of scoring predictions against gold.
typedef struct MeasevalReport MeasevalReport;

// Budget settings for `measeval_compute_max_tokens`.
typedef struct MeasevalBudget {
  size_t token_limit;
  size_t max_tokens_cap;
  size_t safety_margin;
} MeasevalBudget;

typedef struct MeasevalExtractStats {
  size_t blocks;
  size_t annotations;
  size_t dropped;
  size_t dedup_removed;
  size_t warnings;
} MeasevalExtractStats;

typedef struct MeasevalClassScore {
  double precision;
  double recall;
  double f_measure;
  size_t n_gold;
  size_t n_pred;
} MeasevalClassScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Error message from the previous call on this thread, or NULL if that
// call succeeded. Valid until the next call from the same thread.
const char *measeval_last_error(void);

// # Safety
// `s` must be NULL or a string returned by this library, freed once.
void measeval_string_free(char *s);

// The shipped few-shot examples. Never NULL.
struct MeasevalExamples *measeval_examples_builtin(void);

// Parses a base prompt in the `Text:` / `Data:` format.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum MeasevalStatus measeval_examples_parse(const char *text, struct MeasevalExamples **out);

// # Safety
// `examples` must be a live handle or NULL.
size_t measeval_examples_len(const struct MeasevalExamples *examples);

// # Safety
// `examples` must be NULL or a handle from this library, freed once.
void measeval_examples_free(struct MeasevalExamples *examples);

// Builds the full prompt for one paragraph.
//
// # Safety
// Pointer arguments must be valid; `out` receives a string to free with
// `measeval_string_free`.
enum MeasevalStatus measeval_build_prompt(const struct MeasevalExamples *examples,
                                          const char *doc_id,
                                          const char *text,
                                          char **out);

// Heuristic token estimate: characters divided by four, rounded up.
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum MeasevalStatus measeval_estimate_tokens(const char *text, size_t *out);

// Defaults used by the pipeline: 2049 / 350 / 0.
struct MeasevalBudget measeval_budget_default(void);

// Completion budget for a prompt of `prompt_tokens` tokens.
//
// # Safety
// `out` must be writable.
enum MeasevalStatus measeval_compute_max_tokens(size_t prompt_tokens,
                                                struct MeasevalBudget budget,
                                                size_t *out);

// Parses a completion, removes repeated blocks and maps the values back
// onto `paragraph`. Writes the annotations as TSV with a header row.
//
// # Safety
// String arguments must be NUL-terminated; `finish_reason` may be NULL
// (treated as "stop"); `stats` may be NULL.
enum MeasevalStatus measeval_extract(const char *doc_id,
                                     const char *paragraph,
                                     const char *completion,
                                     const char *finish_reason,
                                     char **out_tsv,
                                     struct MeasevalExtractStats *stats);

// Scores predicted annotations against gold, both given as TSV text.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum MeasevalStatus measeval_score(const char *gold_tsv,
                                   const char *pred_tsv,
                                   struct MeasevalReport **out);

// # Safety
// `report` must be a live handle; `out` must be writable.
enum MeasevalStatus measeval_report_overall(const struct MeasevalReport *report,
                                            struct MeasevalClassScore *out);

// Scores for one class, e.g. "Quantity" or "HasProperty". Returns
// `NOT_FOUND` when the class had neither gold nor predicted items.
//
// # Safety
// `report` must be a live handle; `class_name` NUL-terminated; `out`
// writable.
enum MeasevalStatus measeval_report_class(const struct MeasevalReport *report,
                                          const char *class_name,
                                          struct MeasevalClassScore *out);

// Renders the report as an aligned table, or as TSV when `tsv` is nonzero.
//
// # Safety
// `report` must be a live handle; `out` writable.
enum MeasevalStatus measeval_report_render(const struct MeasevalReport *report,
                                           int32_t tsv,
                                           char **out);

// # Safety
// `report` must be NULL or a handle from this library, freed once.
void measeval_report_free(struct MeasevalReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEASEVAL_H */
