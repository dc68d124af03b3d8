#ifndef TRAFFICAPS_H
#define TRAFFICAPS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum TcStatus {
  TC_STATUS_OK = 0,
  TC_STATUS_NULL_POINTER = 1,
  TC_STATUS_INVALID_ARGUMENT = 2,
  TC_STATUS_BUFFER_TOO_SMALL = 3,
  TC_STATUS_IO = 4,
  TC_STATUS_PARSE = 5,
  TC_STATUS_CONFIG = 6,
  TC_STATUS_SHAPE = 7,
  TC_STATUS_MISSING_CHECKPOINT = 8,
  TC_STATUS_ARCHITECTURE_MISMATCH = 9,
  TC_STATUS_NUMERIC = 10,
  TC_STATUS_PANIC = 11,
  TC_STATUS_OTHER = 12,
} TcStatus;

/**
 * A trained model and its parameters.
 */
typedef struct TcModel TcModel;

/**
 * A road network indexed onto its grid.
 */
typedef struct TcNetwork TcNetwork;

/**
 * Dimensions of a loaded model.
 */
typedef struct TcModelInfo {
  size_t rows;
  size_t cols;
  size_t lag;
  size_t links;
  size_t horizons;
} TcModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *tc_last_error(void);

/**
 * Total trainable parameters of an architecture preset.
 * `paper_scale` nonzero selects the full-size layout, zero the desk one.
 *
 * # Safety
 * `arch` must be a NUL-terminated string and `out` writable.
 */
enum TcStatus tc_param_count(const char *arch, int paper_scale, uint64_t *out);

/**
 * Loads a model file written by the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable. On success
 * `*out` owns a handle to release with [`tc_model_free`].
 */
enum TcStatus tc_model_load(const char *path, struct TcModel **out);

/**
 * # Safety
 * `model` must come from [`tc_model_load`] and not be used afterwards.
 */
void tc_model_free(struct TcModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum TcStatus tc_model_info(const struct TcModel *model, struct TcModelInfo *out);

/**
 * Writes the model's horizons (in periods, ascending) to `out`.
 *
 * # Safety
 * `model` must be a live handle; `out` must hold `out_len` values.
 */
enum TcStatus tc_model_horizons(const struct TcModel *model, size_t *out, size_t out_len);

/**
 * Forecasts from `lag` consecutive frames of km/h values, row-major and
 * oldest first (`lag * rows * cols` values). Writes `horizons * links`
 * km/h values, one row of links per horizon in ascending horizon order.
 *
 * # Safety
 * `model` must be a live handle; `frames` must hold `frames_len` values
 * and `out` `out_len` values.
 */
enum TcStatus tc_model_predict(const struct TcModel *model,
                               const float *frames,
                               size_t frames_len,
                               double *out,
                               size_t out_len);

/**
 * Loads a geometry file and indexes it on cells of `cell_lat` by
 * `cell_lon` degrees.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable. On success
 * `*out` owns a handle to release with [`tc_network_free`].
 */
enum TcStatus tc_network_load(const char *path,
                              double cell_lat,
                              double cell_lon,
                              struct TcNetwork **out);

/**
 * # Safety
 * `network` must come from [`tc_network_load`] and not be used afterwards.
 */
void tc_network_free(struct TcNetwork *network);

/**
 * Grid rows, columns and link count.
 *
 * # Safety
 * `network` must be a live handle; the outputs must be writable.
 */
enum TcStatus tc_network_dims(const struct TcNetwork *network,
                              size_t *rows,
                              size_t *cols,
                              size_t *links);

/**
 * Rasterizes one speed per link (ascending link id order) into a
 * row-major `rows * cols` frame; untouched cells are zero.
 *
 * # Safety
 * `network` must be a live handle; `speeds` must hold `speeds_len`
 * values and `out` `out_len` values.
 */
enum TcStatus tc_network_rasterize(const struct TcNetwork *network,
                                   const double *speeds,
                                   size_t speeds_len,
                                   float *out,
                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAFFICAPS_H */
