#ifndef NUMPROBE_H
#define NUMPROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NpStatus {
  NP_STATUS_OK = 0,
  NP_STATUS_NULL_POINTER = 1,
  NP_STATUS_INVALID_UTF8 = 2,
  NP_STATUS_INVALID_ARGUMENT = 3,
  NP_STATUS_PARSE = 4,
  NP_STATUS_IO = 5,
  NP_STATUS_PROBE = 6,
  NP_STATUS_METRICS = 7,
  NP_STATUS_BUFFER_TOO_SMALL = 8,
  NP_STATUS_PANIC = 9,
} NpStatus;

/**
 * A hidden-state matrix loaded from or written to a tensor file.
 */
typedef struct NpMatrix NpMatrix;

/**
 * A parsed numeral.
 */
typedef struct NpNumeral NpNumeral;

/**
 * A fitted linear probe.
 */
typedef struct NpProbe NpProbe;

typedef struct NpRegressionMetrics {
  double mse;
  double relative_error;
  double aacc;
  double pearson_rho;
  double r_squared;
} NpRegressionMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next `np_*` call on the same thread.
 */
const char *np_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void np_string_free(char *s);

/**
 * Parses plain integer, plain decimal or `m × 10^e` text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `result` must be writable.
 */
enum NpStatus np_numeral_parse(const char *text, struct NpNumeral **result);

/**
 * # Safety
 * `n` must be null or a handle from `np_numeral_parse`, not yet freed.
 */
void np_numeral_free(struct NpNumeral *n);

/**
 * # Safety
 * `n` must be a live handle; `result` must be writable.
 */
enum NpStatus np_numeral_log2(const struct NpNumeral *n, double *result);

/**
 * Writes -1, 0 or 1 as `a` is smaller than, equal in value to, or larger than `b`.
 *
 * # Safety
 * `a` and `b` must be live handles; `result` must be writable.
 */
enum NpStatus np_numeral_compare(const struct NpNumeral *a,
                                 const struct NpNumeral *b,
                                 int32_t *result);

/**
 * Renders in notation 0 (plain integer), 1 (plain decimal) or 2 (scientific).
 * `decimal_digits` < 0 means as many as the value needs.
 *
 * # Safety
 * `n` must be a live handle; `result` must be writable. Free the string with `np_string_free`.
 */
enum NpStatus np_numeral_render(const struct NpNumeral *n,
                                int32_t notation,
                                int32_t decimal_digits,
                                char **result);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `result` must be writable.
 */
enum NpStatus np_matrix_read(const char *path, struct NpMatrix **result);

/**
 * # Safety
 * `m` must be a live handle and `path` a NUL-terminated string.
 */
enum NpStatus np_matrix_write(const struct NpMatrix *m, const char *path);

/**
 * # Safety
 * `m` must be a live handle; each output may be null to skip it.
 */
enum NpStatus np_matrix_dims(const struct NpMatrix *m, size_t *n, size_t *d, int32_t *layer);

/**
 * # Safety
 * `m` must be null or a handle from `np_matrix_read`, not yet freed.
 */
void np_matrix_free(struct NpMatrix *m);

/**
 * Fits a probe of kind 0 (magnitude ridge), 1 (log-ratio ridge) or 2
 * (logistic classifier) on every row of `m`, with regularisation `reg`
 * (λ for ridge, γ for the classifier).
 *
 * # Safety
 * `m` must be a live handle; `result` must be writable.
 */
enum NpStatus np_probe_fit(const struct NpMatrix *m,
                           int32_t kind_code,
                           double reg,
                           struct NpProbe **result);

/**
 * One score per row of `m`: the regression prediction, or P(first is larger)
 * for a classifier. `scores` must hold at least `capacity` values; fails with
 * `BufferTooSmall` when `capacity` is below the row count.
 *
 * # Safety
 * `probe` and `m` must be live handles and `scores` valid for `capacity` writes.
 */
enum NpStatus np_probe_predict(const struct NpProbe *probe,
                               const struct NpMatrix *m,
                               double *scores,
                               size_t capacity);

/**
 * # Safety
 * `probe` must be a live handle and `path` a NUL-terminated string.
 */
enum NpStatus np_probe_save(const struct NpProbe *probe, const char *path);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `result` must be writable.
 */
enum NpStatus np_probe_load(const char *path, struct NpProbe **result);

/**
 * # Safety
 * `probe` must be null or a handle from this library, not yet freed.
 */
void np_probe_free(struct NpProbe *probe);

/**
 * Comparison prompt for operand surfaces `a` and `b`. `variant` is 0
 * (int-sci) or 1 (dec-sci); `shots` 0 gives the zero-shot form.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings; `result` must be writable.
 * Free the string with `np_string_free`.
 */
enum NpStatus np_make_prompt(const char *a,
                             const char *b,
                             int32_t variant_code,
                             uint8_t shots,
                             char **result);

/**
 * Maps a model's answer to the problem "which is larger, `a` or `b`":
 * writes 0 for the first operand, 1 for the second, -1 when unparsed.
 *
 * # Safety
 * All strings must be NUL-terminated; `result` must be writable.
 */
enum NpStatus np_parse_response(const char *response,
                                const char *a,
                                const char *b,
                                int32_t *result);

/**
 * Regression metrics of log2 predictions against positive gold values.
 *
 * # Safety
 * `pred` and `gold` must be valid for `n` reads; `result` must be writable.
 */
enum NpStatus np_regression_metrics(const double *pred,
                                    const double *gold,
                                    size_t n,
                                    struct NpRegressionMetrics *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NUMPROBE_H */
