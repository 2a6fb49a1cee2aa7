#ifndef BLC_H
#define BLC_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum BlcStatus {
  BLC_STATUS_OK = 0,
  BLC_STATUS_NULL_POINTER = 1,
  BLC_STATUS_INVALID_ARGUMENT = 2,
  BLC_STATUS_PARSE = 3,
  BLC_STATUS_DIVERGENCE = 4,
  BLC_STATUS_IO = 5,
  BLC_STATUS_PANIC = 6,
} BlcStatus;

/**
 * A trained nym model.
 */
typedef struct BlcModel BlcModel;

/**
 * A set of (user, item, rating) triplets.
 */
typedef struct BlcRatings BlcRatings;

/**
 * Model and schedule settings for [`blc_fit`].
 */
typedef struct BlcFitConfig {
  size_t d;
  size_t nyms;
  double sigma2;
  double sigma2_u;
  double sigma2_v;
  double epsilon;
  size_t max_iters;
  double init_std;
  /**
   * Fraction of users choosing their nym between factorizations.
   */
  double period;
  size_t passes;
  uint64_t seed;
  bool reseed_idle;
} BlcFitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *blc_last_error(void);

/**
 * Library defaults: d = 4, 5 nyms, σ² = 1, prior variances 1000,
 * ε = 1e-4, 200 iterations, period 0.1, 30 passes, seed 0.
 */
struct BlcFitConfig blc_fit_config_default(void);

/**
 * Builds a ratings set from parallel arrays of dense 0-based ids.
 *
 * # Safety
 * `users`, `items` and `values` must each point to `len` readable elements
 * (they may be NULL when `len` is 0). `out` must be writable.
 */
enum BlcStatus blc_ratings_new(size_t n_users,
                               size_t n_items,
                               const uint32_t *users,
                               const uint32_t *items,
                               const double *values,
                               size_t len,
                               struct BlcRatings **out);

/**
 * Loads a ratings file. `format` is "csv", "tab" or "movielens".
 * External ids are re-indexed densely in order of first appearance.
 *
 * # Safety
 * `path` and `format` must be NUL-terminated strings; `out` must be writable.
 */
enum BlcStatus blc_ratings_load(const char *path, const char *format, struct BlcRatings **out);

/**
 * Number of ratings, or 0 for NULL.
 *
 * # Safety
 * `ratings` must be NULL or a live handle.
 */
size_t blc_ratings_len(const struct BlcRatings *ratings);

/**
 * Number of users, or 0 for NULL.
 *
 * # Safety
 * `ratings` must be NULL or a live handle.
 */
size_t blc_ratings_num_users(const struct BlcRatings *ratings);

/**
 * Number of items, or 0 for NULL.
 *
 * # Safety
 * `ratings` must be NULL or a live handle.
 */
size_t blc_ratings_num_items(const struct BlcRatings *ratings);

/**
 * # Safety
 * `ratings` must be NULL or a handle not yet freed.
 */
void blc_ratings_free(struct BlcRatings *ratings);

/**
 * Trains with a fixed nym count.
 *
 * # Safety
 * `ratings` and `config` must be live; `out` must be writable.
 */
enum BlcStatus blc_fit(const struct BlcRatings *ratings,
                       const struct BlcFitConfig *config,
                       struct BlcModel **out);

/**
 * Trains starting from one nym, doubling until the training error per
 * rating drops below `error_threshold` or `max_nyms` would be exceeded.
 * `config.nyms` is ignored.
 *
 * # Safety
 * `ratings` and `config` must be live; `out` must be writable.
 */
enum BlcStatus blc_fit_adaptive(const struct BlcRatings *ratings,
                                const struct BlcFitConfig *config,
                                double error_threshold,
                                size_t max_nyms,
                                struct BlcModel **out);

/**
 * Predicted rating of `item` for `user`.
 *
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum BlcStatus blc_model_predict(const struct BlcModel *model,
                                 size_t user,
                                 size_t item,
                                 double *out);

/**
 * Prediction refined with the user's own ratings from `ratings`, anchored
 * to their nym with weight `w` and prior variance `sigma2_l`.
 *
 * # Safety
 * `model` and `ratings` must be live; `out` must be writable.
 */
enum BlcStatus blc_model_predict_local(const struct BlcModel *model,
                                       const struct BlcRatings *ratings,
                                       size_t user,
                                       size_t item,
                                       double w,
                                       double sigma2_l,
                                       double *out);

/**
 * Nym held by `user`.
 *
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum BlcStatus blc_model_nym_of(const struct BlcModel *model, size_t user, size_t *out);

/**
 * Number of nyms, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t blc_model_num_nyms(const struct BlcModel *model);

/**
 * Largest nym's share of users.
 *
 * # Safety
 * `model` must be live; `out` must be writable.
 */
enum BlcStatus blc_model_guessing_probability(const struct BlcModel *model, double *out);

/**
 * Root mean square error of the model's predictions on `test`.
 *
 * # Safety
 * `model` and `test` must be live; `out` must be writable.
 */
enum BlcStatus blc_model_rmse(const struct BlcModel *model,
                              const struct BlcRatings *test,
                              double *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void blc_model_free(struct BlcModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLC_H */
