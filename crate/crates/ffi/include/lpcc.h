#ifndef LPCC_H
#define LPCC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LpccStatus {
  LPCC_STATUS_OK = 0,
  LPCC_STATUS_NULL_POINTER = 1,
  LPCC_STATUS_INVALID = 2,
  LPCC_STATUS_CORRUPT = 3,
  LPCC_STATUS_CHECKSUM_MISMATCH = 4,
  LPCC_STATUS_IO = 5,
  LPCC_STATUS_NUMERICAL = 6,
  LPCC_STATUS_FORMAT = 7,
  LPCC_STATUS_PANIC = 8,
} LpccStatus;

/**
 * An owned byte buffer, e.g. a compressed frame.
 */
typedef struct LpccBuffer LpccBuffer;

/**
 * Decoded points, stored as interleaved x, y, z.
 */
typedef struct LpccCloud LpccCloud;

/**
 * A loaded model.
 */
typedef struct LpccModel LpccModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *lpcc_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LpccStatus lpcc_model_load(const char *path, struct LpccModel **out);

/**
 * Builds a freshly initialized model from a TOML configuration; an empty
 * string selects the defaults.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LpccStatus lpcc_model_new(const char *config, struct LpccModel **out);

/**
 * Writes a model to a checkpoint file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum LpccStatus lpcc_model_save(const struct LpccModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library, or be null.
 */
enum LpccStatus lpcc_model_checksum(const struct LpccModel *model, uint64_t *out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void lpcc_model_free(struct LpccModel *model);

/**
 * Compresses `count` points given as interleaved x, y, z.
 *
 * # Safety
 * `xyz` must point to `3 * count` doubles; `model` and `out` must be valid.
 */
enum LpccStatus lpcc_compress(const struct LpccModel *model,
                              const double *xyz,
                              size_t count,
                              uint32_t depth,
                              struct LpccBuffer **out);

/**
 * Decompresses a frame.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `model` and `out` must be valid.
 */
enum LpccStatus lpcc_decompress(const struct LpccModel *model,
                                const uint8_t *data,
                                size_t len,
                                struct LpccCloud **out);

/**
 * Length in bytes, or 0 for null.
 *
 * # Safety
 * `buf` must come from this library, or be null.
 */
size_t lpcc_buffer_len(const struct LpccBuffer *buf);

/**
 * Pointer to the bytes, valid until the buffer is freed; null for null.
 *
 * # Safety
 * `buf` must come from this library, or be null.
 */
const uint8_t *lpcc_buffer_data(const struct LpccBuffer *buf);

/**
 * # Safety
 * `buf` must come from this library and not be used afterwards.
 */
void lpcc_buffer_free(struct LpccBuffer *buf);

/**
 * Number of points, or 0 for null.
 *
 * # Safety
 * `cloud` must come from this library, or be null.
 */
size_t lpcc_cloud_len(const struct LpccCloud *cloud);

/**
 * Interleaved x, y, z coordinates, valid until the cloud is freed.
 *
 * # Safety
 * `cloud` must come from this library, or be null.
 */
const double *lpcc_cloud_xyz(const struct LpccCloud *cloud);

/**
 * # Safety
 * `cloud` must come from this library and not be used afterwards.
 */
void lpcc_cloud_free(struct LpccCloud *cloud);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPCC_H */
