#ifndef DIFFMIA_H
#define DIFFMIA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DmiaStatus {
  DMIA_STATUS_OK = 0,
  DMIA_STATUS_NULL_POINTER = 1,
  DMIA_STATUS_INVALID_ARGUMENT = 2,
  DMIA_STATUS_BUFFER_SIZE = 3,
  DMIA_STATUS_IO = 4,
  DMIA_STATUS_CHECKPOINT = 5,
  DMIA_STATUS_NUMERIC = 6,
  DMIA_STATUS_INTERNAL = 7,
} DmiaStatus;

// Schedule an attacker assumes when noising queries.
typedef enum DmiaSchedule {
  DMIA_SCHEDULE_ADVERTISED = 0,
  DMIA_SCHEDULE_LINEAR = 1,
  DMIA_SCHEDULE_COSINE = 2,
} DmiaSchedule;

typedef enum DmiaStatistic {
  DMIA_STATISTIC_SUM = 0,
  DMIA_STATISTIC_MEDIAN = 1,
  DMIA_STATISTIC_MIN = 2,
  DMIA_STATISTIC_MAX = 3,
} DmiaStatistic;

// Opaque handle to a trained model.
typedef struct DmiaModel DmiaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none. The pointer
// stays valid until the next failing call on the same thread.
const char *dmia_last_error_message(void);

// Loads a checkpoint file. On success `*out` receives a handle that must be
// released with [`dmia_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DmiaStatus dmia_model_load(const char *path, struct DmiaModel **out);

// Releases a handle from [`dmia_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void dmia_model_free(struct DmiaModel *model);

// Data dimension of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dmia_model_data_dim(const struct DmiaModel *model);

// Number of diffusion steps T, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t dmia_model_steps(const struct DmiaModel *model);

// Exact loss terms of one point. `out` must hold T + 1 values: index 0 is the
// reconstruction term, index T the prior term.
//
// # Safety
// `x0` must point to `dim` values and `out` to `out_len` writable values.
enum DmiaStatus dmia_exact_trajectory(const struct DmiaModel *model,
                                      uint64_t sample_id,
                                      const double *x0,
                                      size_t dim,
                                      uint64_t noise_seed,
                                      size_t noise_draws,
                                      double *out,
                                      size_t out_len);

// Reconstruction errors of one point at steps 1..=T, using only the model's
// reconstruction interface. `out` must hold T values.
//
// # Safety
// `x0` must point to `dim` values and `out` to `out_len` writable values.
enum DmiaStatus dmia_estimated_trajectory(const struct DmiaModel *model,
                                          uint64_t sample_id,
                                          const double *x0,
                                          size_t dim,
                                          enum DmiaSchedule schedule,
                                          uint64_t noise_seed,
                                          double *out,
                                          size_t out_len);

// White-box membership scores for `n` points stored row-major in `xs`.
// Lower scores indicate membership. `schedule` is ignored.
//
// # Safety
// `xs` must point to `n * dim` values and `out` to `out_len` writable values.
enum DmiaStatus dmia_whitebox_scores(const struct DmiaModel *model,
                                     const double *xs,
                                     size_t n,
                                     size_t dim,
                                     enum DmiaStatistic statistic,
                                     double truncation_fraction,
                                     uint64_t noise_seed,
                                     double *out,
                                     size_t out_len);

// Gray-box membership scores, computed from reconstructions only.
//
// # Safety
// `xs` must point to `n * dim` values and `out` to `out_len` writable values.
enum DmiaStatus dmia_graybox_scores(const struct DmiaModel *model,
                                    const double *xs,
                                    size_t n,
                                    size_t dim,
                                    enum DmiaStatistic statistic,
                                    double truncation_fraction,
                                    enum DmiaSchedule schedule,
                                    uint64_t noise_seed,
                                    double *out,
                                    size_t out_len);

// ROC AUC of lower-is-member scores. Nonzero labels mark members.
//
// # Safety
// `scores` and `labels` must point to `n` values; `out` must be writable.
enum DmiaStatus dmia_auc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Highest true-positive rate whose false-positive rate does not exceed `fpr`.
//
// # Safety
// `scores` and `labels` must point to `n` values; `out` must be writable.
enum DmiaStatus dmia_tpr_at_fpr(const double *scores,
                                const uint8_t *labels,
                                size_t n,
                                double fpr,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFMIA_H */
