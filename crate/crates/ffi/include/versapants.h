#ifndef VERSAPANTS_H
#define VERSAPANTS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum VpStatus {
  VP_STATUS_OK = 0,
  VP_STATUS_NULL_POINTER = 1,
  VP_STATUS_INVALID_ARGUMENT = 2,
  VP_STATUS_IO = 3,
  VP_STATUS_FORMAT = 4,
  VP_STATUS_SHAPE = 5,
  VP_STATUS_CONFIG = 6,
  VP_STATUS_INSUFFICIENT_DATA = 7,
  VP_STATUS_NUMERIC = 8,
  VP_STATUS_PANIC = 9,
} VpStatus;

/**
 * Model architecture selector.
 */
typedef enum VpArchitecture {
  VP_ARCHITECTURE_VERSAPANTS = 0,
  VP_ARCHITECTURE_CNN_HYBRID = 1,
  VP_ARCHITECTURE_BILSTM = 2,
} VpArchitecture;

/**
 * Opaque model handle.
 */
typedef struct VpModel VpModel;

/**
 * One decoded pose. Joint order for rotations is left hip, right hip, left
 * knee, right knee; for positions left knee, right knee, left ankle, right ankle.
 */
typedef struct VpPose {
  double rot6d[24];
  /**
   * Axis-angle per rotation joint, radians.
   */
  double axis_angle[12];
  /**
   * Joint positions relative to the pelvis, metres.
   */
  double positions[12];
} VpPose;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *vp_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vp_version(void);

/**
 * Builds an architecture with its default configuration and seeded random weights.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum VpStatus vp_model_new(enum VpArchitecture arch, uint64_t seed, struct VpModel **out);

/**
 * Builds a model from a JSON configuration string.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` as for [`vp_model_new`].
 */
enum VpStatus vp_model_from_json(const char *config_json, uint64_t seed, struct VpModel **out);

/**
 * Replaces the model's weights with those in a VPW1 file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum VpStatus vp_model_load_weights(struct VpModel *model, const char *path);

/**
 * Writes the model's weights as a VPW1 file.
 *
 * # Safety
 * As for [`vp_model_load_weights`].
 */
enum VpStatus vp_model_save_weights(const struct VpModel *model, const char *path);

/**
 * Releases a model. Null is accepted and ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void vp_model_free(struct VpModel *model);

/**
 * Stored parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
uint64_t vp_model_param_count(const struct VpModel *model);

/**
 * Forward-pass FLOPs for one window, or 0 for a null handle.
 *
 * # Safety
 * As for [`vp_model_param_count`].
 */
uint64_t vp_model_flops(const struct VpModel *model);

/**
 * Number of floats in one input window, `N × K × 2`.
 *
 * # Safety
 * As for [`vp_model_param_count`].
 */
size_t vp_model_input_len(const struct VpModel *model);

/**
 * Predicts the pose for one normalized `(N, K, 2)` window. Positions use
 * the default skeleton rescaled to `tibia_length_m`.
 *
 * # Safety
 * `window` must point to `len` floats and `out` to one writable [`VpPose`].
 */
enum VpStatus vp_model_predict(const struct VpModel *model,
                               const float *window,
                               size_t len,
                               double tibia_length_m,
                               struct VpPose *out);

/**
 * Gram–Schmidt reconstruction of a 6D rotation into a row-major 3×3 matrix.
 *
 * # Safety
 * `rot6d` must point to 6 doubles and `out` to 9 writable doubles.
 */
enum VpStatus vp_rot6d_to_matrix(const double *rot6d, double *out);

/**
 * Writes a synthetic dataset of `n_subjects` sessions covering every
 * implemented movement, with default artifacts.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated path.
 */
enum VpStatus vp_simulate_dataset(const char *out_dir, uint32_t n_subjects, uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VERSAPANTS_H */
