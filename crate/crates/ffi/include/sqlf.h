#ifndef SQLF_H
#define SQLF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. 1–3 match the command-line exit codes.
 */
typedef enum SqlfStatus {
  SQLF_STATUS_OK = 0,
  /**
   * Invalid argument or configuration.
   */
  SQLF_STATUS_USAGE = 1,
  /**
   * Unreadable, malformed or inconsistent data.
   */
  SQLF_STATUS_DATA = 2,
  /**
   * Non-finite values or a shape mismatch inside a computation.
   */
  SQLF_STATUS_NUMERIC = 3,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  SQLF_STATUS_BAD_POINTER = 4,
  /**
   * The library panicked; the handle involved should be discarded.
   */
  SQLF_STATUS_PANIC = 5,
} SqlfStatus;

/**
 * Trained models of a finished run: embedding, VAE encoder and the final
 * boosted-tree classifier.
 */
typedef struct SqlfDetector SqlfDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *sqlf_last_error(void);

/**
 * Library version as a static string.
 */
const char *sqlf_version(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library.
 */
void sqlf_string_free(char *s);

/**
 * Tokenizes `query` and returns the non-padding tokens joined by newlines.
 *
 * # Safety
 * `query` must be a NUL-terminated string; `out` must be writable.
 */
enum SqlfStatus sqlf_tokenize(const char *query, bool url_decode, char **out);

/**
 * Token-level edit distance between two queries.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings; `out` must be writable.
 */
enum SqlfStatus sqlf_token_levenshtein(const char *a, const char *b, size_t *out);

/**
 * Sentence BLEU (up to 4-grams) of `candidate` against `reference`, on
 * tokens.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be writable.
 */
enum SqlfStatus sqlf_token_bleu(const char *reference, const char *candidate, double *out);

/**
 * Opens the run directory written by a completed pipeline.
 *
 * # Safety
 * `run_dir` must be a NUL-terminated path; `out` must be writable. On
 * success `*out` owns a handle for `sqlf_detector_free`.
 */
enum SqlfStatus sqlf_detector_open(const char *run_dir, struct SqlfDetector **out);

/**
 * Probability that each of `n` queries is malicious.
 *
 * # Safety
 * `detector` must come from `sqlf_detector_open`; `queries` must point to
 * `n` NUL-terminated strings and `out` to `n` writable doubles.
 */
enum SqlfStatus sqlf_detector_score(const struct SqlfDetector *detector,
                                    const char *const *queries,
                                    size_t n,
                                    double *out);

/**
 * # Safety
 * `detector` must be null or a handle from `sqlf_detector_open` that has
 * not been freed.
 */
void sqlf_detector_free(struct SqlfDetector *detector);

/**
 * Runs the whole pipeline into `out_dir`. `profile` is `default`, `desk`
 * or `tiny`; `config_toml` (nullable) is layered over it. Completed stages
 * of an earlier run with the same settings are reused.
 *
 * # Safety
 * `profile` and `out_dir` must be NUL-terminated strings; `config_toml`
 * may be null.
 */
enum SqlfStatus sqlf_run_pipeline(const char *profile,
                                  const char *config_toml,
                                  uint64_t seed,
                                  const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SQLF_H */
