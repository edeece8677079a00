#ifndef MTDISTILL_H
#define MTDISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MTD_AU_DIM 8

#define MTD_EXPR_DIM 7

#define MTD_VA_DIM 40

/**
 * Length of a flattened output: AU, then expression, then VA logits.
 */
#define MTD_OUTPUT_DIM 55

#define MTD_VA_BINS 20

typedef enum MtdEnsembleMethod {
  MTD_ENSEMBLE_METHOD_MEAN = 0,
  MTD_ENSEMBLE_METHOD_MAJORITY_VOTE = 1,
} MtdEnsembleMethod;

typedef enum MtdStatus {
  MTD_STATUS_OK = 0,
  MTD_STATUS_NULL_POINTER = 1,
  MTD_STATUS_INVALID_ARGUMENT = 2,
  MTD_STATUS_IO = 3,
  MTD_STATUS_FORMAT = 4,
  MTD_STATUS_PANIC = 5,
} MtdStatus;

/**
 * Opaque network handle.
 */
typedef struct MtdNet MtdNet;

/**
 * Decoded prediction for one input.
 */
typedef struct MtdPrediction {
  double au_probs[MTD_AU_DIM];
  /**
   * 0 or 1 per AU
   */
  uint8_t au_binary[MTD_AU_DIM];
  double expr_probs[MTD_EXPR_DIM];
  uint32_t expr_class;
  double valence;
  double arousal;
} MtdPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *mtd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mtd_version(void);

/**
 * Creates a freshly initialized net.
 *
 * # Safety
 * `hidden_dims` must point to `num_hidden` values; `out` must be writable.
 */
enum MtdStatus mtd_net_new(size_t input_dim,
                           const size_t *hidden_dims,
                           size_t num_hidden,
                           uint64_t seed,
                           struct MtdNet **out);

/**
 * Loads a `.mtnet` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MtdStatus mtd_net_load(const char *path, struct MtdNet **out);

/**
 * Writes a `.mtnet` checkpoint.
 *
 * # Safety
 * `net` must come from this library; `path` must be NUL-terminated.
 */
enum MtdStatus mtd_net_save(const struct MtdNet *net, const char *path);

/**
 * Releases a net. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and must not be used afterwards.
 */
void mtd_net_free(struct MtdNet *net);

/**
 * Number of input features, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or come from this library.
 */
size_t mtd_net_input_dim(const struct MtdNet *net);

/**
 * Number of parameters, or 0 for a null handle.
 *
 * # Safety
 * `net` must be null or come from this library.
 */
size_t mtd_net_num_params(const struct MtdNet *net);

/**
 * Raw logits, flattened as AU (8), expression (7), VA (40).
 *
 * # Safety
 * `x` must point to `len` values and `out` to `MTD_OUTPUT_DIM` writable
 * values.
 */
enum MtdStatus mtd_net_forward(const struct MtdNet *net, const double *x, size_t len, double *out);

/**
 * Decoded prediction of one net.
 *
 * # Safety
 * `x` must point to `len` values; `out` must be writable.
 */
enum MtdStatus mtd_net_predict(const struct MtdNet *net,
                               const double *x,
                               size_t len,
                               struct MtdPrediction *out);

/**
 * Combined prediction of `count` nets.
 *
 * # Safety
 * `nets` must point to `count` handles from this library; `x` to `len`
 * values; `out` must be writable.
 */
enum MtdStatus mtd_ensemble_predict(const struct MtdNet *const *nets,
                                    size_t count,
                                    enum MtdEnsembleMethod method,
                                    const double *x,
                                    size_t len,
                                    struct MtdPrediction *out);

/**
 * Temperature softmax of `n` logits into `out`.
 *
 * # Safety
 * `logits` and `out` must each point to `n` values.
 */
enum MtdStatus mtd_softmax_t(const double *logits, size_t n, double temperature, double *out);

/**
 * Concordance correlation coefficient of two length-`n` sequences.
 *
 * # Safety
 * `y` and `t` must each point to `n` values; `out` must be writable.
 */
enum MtdStatus mtd_ccc(const double *y, const double *t, size_t n, double *out);

/**
 * Expected bin center of `MTD_VA_BINS` logits (softmax at T = 1).
 *
 * # Safety
 * `logits` must point to `MTD_VA_BINS` values; `out` must be writable.
 */
enum MtdStatus mtd_bin_expectation(const double *logits, double *out);

/**
 * Mean imbalance ratio of per-label positive counts.
 *
 * # Safety
 * `counts` must point to `n` values; `out` must be writable.
 */
enum MtdStatus mtd_mean_ir(const uint64_t *counts, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTDISTILL_H */
