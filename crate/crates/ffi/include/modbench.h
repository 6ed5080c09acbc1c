#ifndef MODBENCH_H
#define MODBENCH_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbFamily {
  MB_FAMILY_MLP = 0,
  MB_FAMILY_MHA = 1,
  MB_FAMILY_RNN = 2,
} MbFamily;

typedef enum MbLevel {
  MB_LEVEL_GT_MODULAR = 0,
  MB_LEVEL_MODULAR_OP = 1,
  MB_LEVEL_MODULAR = 2,
  MB_LEVEL_MONOLITHIC = 3,
  MB_LEVEL_RANDOM_GATE = 4,
} MbLevel;

typedef enum MbMode {
  MB_MODE_CLASSIFICATION = 0,
  MB_MODE_REGRESSION = 1,
} MbMode;

/*
 Result code of every fallible call.
 */
typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_POINTER = 1,
  MB_STATUS_INVALID_ARGUMENT = 2,
  MB_STATUS_SHAPE = 3,
  MB_STATUS_DOMAIN = 4,
  MB_STATUS_UNSUPPORTED = 5,
  MB_STATUS_CONFIG = 6,
  MB_STATUS_IO = 7,
  MB_STATUS_PANIC = 8,
} MbStatus;

typedef struct MbModel MbModel;

typedef struct MbStats MbStats;

typedef struct MbTask MbTask;

/*
 Training settings. Fill with [`mb_train_options_default`] and adjust.
 */
typedef struct MbTrainOptions {
  size_t iterations;
  size_t batch_size;
  double learning_rate;
  /*
   Gradient-norm clip; zero disables it. Only RNN tasks accept clipping.
   */
  double clip_norm;
  size_t eval_every;
  size_t eval_samples;
} MbTrainOptions;

/*
 Metric suite of one set of activation statistics.
 */
typedef struct MbMetricReport {
  double collapse_avg;
  double collapse_worst;
  double alignment;
  double inverse_mutual_information;
} MbMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *mb_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *mb_version(void);

/*
 Samples a task of `family` (an [`MbFamily`] code) with `rules` rules.

 # Safety
 `out` must be a valid pointer to writable storage for a handle.
 */
enum MbStatus mb_task_new(uint32_t family_code,
                          size_t rules,
                          uint64_t task_seed,
                          struct MbTask **out);

/*
 Input features per sample (per token for sequence tasks), or 0 for a null task.

 # Safety
 `task` must be null or a live task handle.
 */
size_t mb_task_features(const struct MbTask *task);

/*
 # Safety
 `task` must be null or a handle from `mb_task_new` not yet freed.
 */
void mb_task_free(struct MbTask *task);

/*
 Builds a model of `level` (an [`MbLevel`] code) for `task` within a
 parameter budget of `capacity`.

 # Safety
 `task` must be a live task handle and `out` writable.
 */
enum MbStatus mb_model_new(const struct MbTask *task,
                           uint32_t level_code,
                           size_t capacity,
                           uint64_t init_seed,
                           struct MbModel **out);

/*
 Number of trainable scalars, or 0 for a null model.

 # Safety
 `model` must be null or a live model handle.
 */
size_t mb_model_param_count(const struct MbModel *model);

/*
 # Safety
 `model` must be null or a model handle not yet freed.
 */
void mb_model_free(struct MbModel *model);

/*
 Default training settings for a family and mode.

 # Safety
 `out` must be writable.
 */
enum MbStatus mb_train_options_default(uint32_t family_code,
                                       uint32_t mode_code,
                                       struct MbTrainOptions *out);

/*
 Trains `model` on `task` and writes the mean training loss of the last
 evaluation window to `final_loss` (if non-null). A diverged run returns
 `Domain`.

 # Safety
 Handles must be live; `options` readable; `final_loss` null or writable.
 */
enum MbStatus mb_model_train(struct MbModel *model,
                             const struct MbTask *task,
                             uint32_t mode_code,
                             const struct MbTrainOptions *options,
                             double *final_loss);

/*
 Evaluates `model` on `n_samples` samples of the named shift (`"id"`,
 `"var2"`, `"len20"`, ...). Writes the error rate or mean absolute error
 to `performance` and, if `stats` is non-null, a new statistics handle
 that the caller frees.

 # Safety
 Handles must be live; `shift` a NUL-terminated string; `performance`
 writable; `stats` null or writable.
 */
enum MbStatus mb_model_evaluate(const struct MbModel *model,
                                const struct MbTask *task,
                                uint32_t mode_code,
                                const char *shift,
                                size_t n_samples,
                                uint64_t eval_seed,
                                double *performance,
                                struct MbStats **stats);

/*
 Writes a checkpoint manifest to `path` and its weights next to it.

 # Safety
 `model` must be live and `path` a NUL-terminated string.
 */
enum MbStatus mb_model_save(const struct MbModel *model, const char *path);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum MbStatus mb_model_load(const char *path, struct MbModel **out);

/*
 Empty statistics over `rules` rules and modules.

 # Safety
 `out` must be writable.
 */
enum MbStatus mb_stats_new(size_t rules, struct MbStats **out);

/*
 Adds `n_points` decision points: `rule_ids[n_points]` and row-major
 `activations[n_points * rules]`.

 # Safety
 `stats` must be live and the arrays readable for the stated lengths.
 */
enum MbStatus mb_stats_accumulate(struct MbStats *stats,
                                  const size_t *rule_ids,
                                  const double *activations,
                                  size_t n_points);

/*
 Decision points accumulated so far, or 0 for a null handle.

 # Safety
 `stats` must be null or live.
 */
uint64_t mb_stats_total(const struct MbStats *stats);

/*
 # Safety
 `stats` must be live and `out` writable.
 */
enum MbStatus mb_stats_report(const struct MbStats *stats, struct MbMetricReport *out);

/*
 # Safety
 `stats` must be null or a handle not yet freed.
 */
void mb_stats_free(struct MbStats *stats);

/*
 Average collapse of a module marginal `p[r]`.

 # Safety
 `p` must be readable for `r` values and `out` writable.
 */
enum MbStatus mb_collapse_avg(const double *p, size_t r, double *out);

/*
 Worst-case collapse of a module marginal `p[r]`.

 # Safety
 `p` must be readable for `r` values and `out` writable.
 */
enum MbStatus mb_collapse_worst(const double *p, size_t r, double *out);

/*
 Alignment of a row-major `r x r` row-stochastic activation matrix.

 # Safety
 `a` must be readable for `r * r` values and `out` writable.
 */
enum MbStatus mb_alignment(const double *a, size_t r, double *out);

/*
 Inverse mutual information of a row-major `r x r` joint distribution.

 # Safety
 `joint` must be readable for `r * r` values and `out` writable.
 */
enum MbStatus mb_inverse_mutual_information(const double *joint, size_t r, double *out);

/*
 Minimum-cost assignment of a row-major `n x n` cost matrix: row `i` is
 assigned column `assignment[i]`.

 # Safety
 `cost` must be readable for `n * n` values and `assignment` writable for `n`.
 */
enum MbStatus mb_hungarian(const double *cost, size_t n, size_t *assignment);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODBENCH_H */
