#ifndef BNN_H
#define BNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. `Ok` is zero.
 */
typedef enum BnnStatus {
  BNN_STATUS_OK = 0,
  BNN_STATUS_NULL_POINTER = 1,
  BNN_STATUS_INVALID_ARGUMENT = 2,
  BNN_STATUS_SHAPE = 3,
  BNN_STATUS_IO = 4,
  BNN_STATUS_FORMAT = 5,
  BNN_STATUS_BAD_MAGIC = 6,
  BNN_STATUS_VERSION_MISMATCH = 7,
  BNN_STATUS_CHECKSUM = 8,
  BNN_STATUS_TRUNCATED = 9,
  BNN_STATUS_STORAGE_MISMATCH = 10,
  BNN_STATUS_NUMERIC = 11,
  BNN_STATUS_INTERNAL = 12,
  BNN_STATUS_PANIC = 13,
} BnnStatus;

/**
 * Opaque handle to a loaded model. Create with [`bnn_model_load`] or
 * [`bnn_model_load_bytes`], release with [`bnn_model_free`].
 */
typedef struct BnnModel BnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bnn_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next `bnn_*` call on the same thread.
 */
const char *bnn_last_error_message(void);

/**
 * Loads a model file in either storage class. On success `*out` owns a new
 * handle; on failure it is set to null.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum BnnStatus bnn_model_load(const char *path, struct BnnModel **out);

/**
 * Same as [`bnn_model_load`] from an in-memory copy of the file.
 *
 * # Safety
 * `data` must be valid for `len` reads and `out` valid for one write.
 */
enum BnnStatus bnn_model_load_bytes(const uint8_t *data, size_t len, struct BnnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void bnn_model_free(struct BnnModel *model);

/**
 * Writes the `C, H, W` shape of one input item to `shape[0..3]`.
 *
 * # Safety
 * `model` must be a live handle and `shape` valid for 3 writes.
 */
enum BnnStatus bnn_model_input_shape(const struct BnnModel *model, size_t *shape);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bnn_model_num_classes(const struct BnnModel *model);

/**
 * 1 when the file used packed (bit) storage for binary layers, 0 for the
 * float export, -1 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t bnn_model_is_packed(const struct BnnModel *model);

/**
 * Logits for `batch` already-normalized items laid out `N×C×H×W`.
 * `logits_len` must equal `batch × num_classes`.
 *
 * # Safety
 * `model` must be a live handle, `input` valid for `batch × C × H × W`
 * reads and `logits` valid for `logits_len` writes.
 */
enum BnnStatus bnn_model_infer(const struct BnnModel *model,
                               const float *input,
                               size_t batch,
                               float *logits,
                               size_t logits_len);

/**
 * Logits for `batch` raw 8-bit images laid out `N×C×H×W`, normalized with
 * the statistics stored in the model.
 *
 * # Safety
 * Same as [`bnn_model_infer`] with `pixels` in place of `input`.
 */
enum BnnStatus bnn_model_infer_pixels(const struct BnnModel *model,
                                      const uint8_t *pixels,
                                      size_t batch,
                                      float *logits,
                                      size_t logits_len);

/**
 * Dot product of `sign(x)` and `sign(w)` over `n` entries, with
 * `sign(0) = +1`, computed on packed bits.
 *
 * # Safety
 * `x` and `w` must be valid for `n` reads and `out` for one write.
 */
enum BnnStatus bnn_binary_dot(const float *x, const float *w, size_t n, int64_t *out);

/**
 * `out = sign(A) · sign(Bt)ᵀ` where `A` is `m×k` and `Bt` is `n×k`, both
 * row-major; `out` is `m×n` row-major.
 *
 * # Safety
 * `a` must be valid for `m × k` reads, `bt` for `n × k` reads and `out`
 * for `m × n` writes.
 */
enum BnnStatus bnn_binary_gemm(const float *a,
                               const float *bt,
                               size_t m,
                               size_t k,
                               size_t n,
                               float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BNN_H */
