#ifndef PREFOPT_H
#define PREFOPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PrefoptStatus {
  PREFOPT_STATUS_OK = 0,
  PREFOPT_STATUS_NULL_POINTER = 1,
  PREFOPT_STATUS_INVALID_UTF8 = 2,
  PREFOPT_STATUS_INDEX = 3,
  PREFOPT_STATUS_CONFIG = 4,
  PREFOPT_STATUS_ARGUMENT = 5,
  PREFOPT_STATUS_DOMAIN = 6,
  PREFOPT_STATUS_PARSE = 7,
  PREFOPT_STATUS_VALIDATION = 8,
  PREFOPT_STATUS_EMPTY_DATASET = 9,
  PREFOPT_STATUS_DIVERGENCE = 10,
  PREFOPT_STATUS_IO = 11,
  PREFOPT_STATUS_JSON = 12,
  PREFOPT_STATUS_PANIC = 13,
} PrefoptStatus;

/**
 * Opaque preference dataset.
 */
typedef struct PrefoptDataset PrefoptDataset;

/**
 * Opaque tabular softmax policy.
 */
typedef struct PrefoptPolicy PrefoptPolicy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *prefopt_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void prefopt_string_free(char *s);

/**
 * Uniform policy over `num_queries` base contexts, plus one augmented
 * context per query when `augmented`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PrefoptStatus prefopt_policy_uniform(size_t num_queries,
                                          size_t num_responses,
                                          bool augmented,
                                          struct PrefoptPolicy **out);

/**
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_policy_from_json(const char *json, struct PrefoptPolicy **out);

/**
 * # Safety
 * `policy` must be a live handle and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_policy_to_json(const struct PrefoptPolicy *policy, char **out);

/**
 * Destroys a policy handle. Null is ignored.
 *
 * # Safety
 * `policy` must come from this library and not have been freed.
 */
void prefopt_policy_free(struct PrefoptPolicy *policy);

/**
 * `log pi(response | context)`.
 *
 * # Safety
 * `policy` must be a live handle and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_policy_log_prob(const struct PrefoptPolicy *policy,
                                           size_t query,
                                           bool augmented,
                                           size_t response,
                                           double *out);

/**
 * `beta * [(log pi - log ref)(y_pos) - (log pi - log ref)(y_neg)]`.
 *
 * # Safety
 * Handles must be live and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_implicit_reward_diff(const struct PrefoptPolicy *pi,
                                                const struct PrefoptPolicy *reference,
                                                size_t query,
                                                bool augmented,
                                                size_t y_pos,
                                                size_t y_neg,
                                                double beta,
                                                double *out);

/**
 * Parses a JSONL dataset held in memory.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_dataset_from_jsonl(const char *text, struct PrefoptDataset **out);

/**
 * Reads a JSONL dataset from disk.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_dataset_load(const char *path, struct PrefoptDataset **out);

/**
 * Number of tuples.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_dataset_len(const struct PrefoptDataset *dataset, size_t *out);

/**
 * Destroys a dataset handle. Null is ignored.
 *
 * # Safety
 * `dataset` must come from this library and not have been freed.
 */
void prefopt_dataset_free(struct PrefoptDataset *dataset);

/**
 * Mean loss of `method` ("dpo", "ipo", "sr-dpo", "sr-ipo") over the whole
 * dataset. When `gradient` is non-null it receives the gradient with
 * respect to `pi`'s logits; `gradient_len` must then equal the number of
 * logits. Refinements are detached, as in training.
 *
 * # Safety
 * Handles must be live; `gradient` must hold `gradient_len` doubles.
 */
enum PrefoptStatus prefopt_loss(const struct PrefoptPolicy *pi,
                                const struct PrefoptPolicy *reference,
                                const struct PrefoptDataset *dataset,
                                const char *method,
                                double beta,
                                double lambda,
                                double *loss,
                                double *gradient,
                                size_t gradient_len);

/**
 * Trains from `init` (or a copy of `reference` when null) using a JSON
 * training config; fields left out take their defaults. Returns the
 * trained policy and the final metrics as JSON.
 *
 * # Safety
 * Handles must be live (`init` may be null); out-pointers must be valid.
 */
enum PrefoptStatus prefopt_train(const char *config_json,
                                 const struct PrefoptDataset *dataset,
                                 const struct PrefoptPolicy *reference,
                                 const struct PrefoptPolicy *init,
                                 struct PrefoptPolicy **out_policy,
                                 char **out_metrics_json);

/**
 * Metrics report of `pi` on `dataset` as JSON.
 *
 * # Safety
 * Handles must be live and `out` a valid pointer.
 */
enum PrefoptStatus prefopt_metrics_json(const struct PrefoptPolicy *pi,
                                        const struct PrefoptPolicy *reference,
                                        const struct PrefoptDataset *dataset,
                                        char **out);

/**
 * Pearson, Spearman and Kendall tau-b of two equal-length arrays. An
 * undefined coefficient is reported as NaN.
 *
 * # Safety
 * `x` and `y` must each hold `len` doubles; out-pointers must be valid.
 */
enum PrefoptStatus prefopt_correlations(const double *x,
                                        const double *y,
                                        size_t len,
                                        double *pearson,
                                        double *spearman,
                                        double *kendall_tau);

/**
 * Runs every registered check. `passed` reports the overall verdict and
 * `out_report_json` the full report. A failing check is not an error.
 *
 * # Safety
 * Out-pointers must be valid.
 */
enum PrefoptStatus prefopt_verify(uint64_t seed, bool *passed, char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREFOPT_H */
