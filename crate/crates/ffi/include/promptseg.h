/* C ABI for the promptseg segmentation workbench. */

#ifndef PROMPTSEG_H
#define PROMPTSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define PSEG_OK 0

/**
 * Null pointer, bad UTF-8, or a panic inside the library.
 */
#define PSEG_ERR_USAGE 1

/**
 * Invalid configuration or contract violation.
 */
#define PSEG_ERR_CONFIG 2

/**
 * Missing or malformed data (files, checkpoints, fingerprints).
 */
#define PSEG_ERR_DATA 3

/**
 * Numerical failure or degenerate input.
 */
#define PSEG_ERR_NUMERIC 4

/**
 * Opaque 32-bit segmentation model handle.
 */
typedef struct PsegModel PsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message (NUL-terminated, truncated to `len`) into
 * `buf`; returns the full message length in bytes.
 */
 uintptr_t pseg_last_error(char *buf, uintptr_t len);

/**
 * Library version as a static NUL-terminated string.
 */
 const char *pseg_version(void);

/**
 * Load a full checkpoint; returns null on failure.
 */
 struct PsegModel *pseg_model_load_full(const char *path);

/**
 * Load a delta checkpoint onto a backbone handle; returns a new handle,
 * null on failure. The backbone is not consumed.
 */
 struct PsegModel *pseg_model_load_delta(const char *path, const struct PsegModel *backbone);

/**
 * Release a model handle.
 */
 void pseg_model_free(struct PsegModel *model);

/**
 * Input extents: channels, then the three spatial axes.
 */
 int32_t pseg_model_input_shape(const struct PsegModel *model, uintptr_t *out_shape);

/**
 * Number of segmentation classes (including background).
 */
 int32_t pseg_model_num_classes(const struct PsegModel *model);

/**
 * Total scalar parameter count.
 */
 uintptr_t pseg_model_param_count(const struct PsegModel *model);

/**
 * Segment one volume.
 *
 * `volume` holds `channels · H · W · D` floats in channel-major order;
 * `out_mask` receives `H · W · D` class labels.
 */

int32_t pseg_model_predict(const struct PsegModel *model,
                           const float *volume,
                           uintptr_t volume_len,
                           uint8_t *out_mask,
                           uintptr_t mask_len);

/**
 * Dice overlap of one class between two label masks; negative on error.
 */
 double pseg_dice(const uint8_t *pred, const uint8_t *truth, uintptr_t len, uint8_t class_);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPTSEG_H */
