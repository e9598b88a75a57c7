#ifndef DASNET_H
#define DASNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Training stage recorded in a checkpoint.
typedef enum DasnetStage {
  DASNET_STAGE_DETECTOR = 0,
  DASNET_STAGE_SEMANTIC = 1,
  DASNET_STAGE_INSTANCE = 2,
} DasnetStage;

// Result code of every exported function.
typedef enum DasnetStatus {
  DASNET_STATUS_OK = 0,
  DASNET_STATUS_NULL_POINTER = 1,
  DASNET_STATUS_INVALID_ARGUMENT = 2,
  DASNET_STATUS_SHAPE = 3,
  DASNET_STATUS_FORMAT = 4,
  DASNET_STATUS_IO = 5,
  // Checkpoint was trained for a different stage than the call needs.
  DASNET_STATUS_WRONG_STAGE = 6,
  // Index past the end of a result set.
  DASNET_STATUS_OUT_OF_RANGE = 7,
  // Caller buffer length differs from the required length.
  DASNET_STATUS_BUFFER_SIZE = 8,
  // Parameter missing from or unexpected in a checkpoint.
  DASNET_STATUS_PARAM = 9,
  DASNET_STATUS_PANIC = 10,
} DasnetStatus;

// A loaded checkpoint ready for inference.
typedef struct DasnetModel DasnetModel;

// Detections or instances of one image.
typedef struct DasnetResult DasnetResult;

// One detection or instance. Coordinates are normalized to `[0, 1]`.
typedef struct DasnetInstance {
  float x_min;
  float y_min;
  float x_max;
  float y_max;
  // Class label, 1-based.
  uint32_t label;
  // Detection score, times the mask score for instances.
  float score;
  // Mask score; 1 for plain detections.
  float instance_score;
  // Whether [`dasnet_result_mask`] has a mask for this entry.
  bool has_mask;
} DasnetInstance;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into this library on the thread.
const char *dasnet_last_error(void);

// Library version as a static NUL-terminated string.
const char *dasnet_version(void);

// Loads a checkpoint file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` writable.
enum DasnetStatus dasnet_model_load(const char *path, struct DasnetModel **out);

// # Safety
// `model` must come from [`dasnet_model_load`] and not be used afterwards.
void dasnet_model_free(struct DasnetModel *model);

// Number of object classes, background excluded.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum DasnetStatus dasnet_model_classes(const struct DasnetModel *model, uint32_t *out);

// # Safety
// `model` must be a live handle and `out` writable.
enum DasnetStatus dasnet_model_stage(const struct DasnetModel *model, enum DasnetStage *out);

// Replaces the detection score and NMS IoU thresholds. The model is left
// unchanged when the values are rejected.
//
// # Safety
// `model` must be a live handle.
enum DasnetStatus dasnet_model_set_thresholds(struct DasnetModel *model,
                                              float score_thresh,
                                              float nms_thresh);

// Runs the detector on one image. Works with a checkpoint of any stage.
//
// # Safety
// `model` must be a live handle, `rgb` must hold `3·width·height` bytes and
// `out` must be writable.
enum DasnetStatus dasnet_detect(const struct DasnetModel *model,
                                const uint8_t *rgb,
                                size_t width,
                                size_t height,
                                struct DasnetResult **out);

// Per-pixel class labels (0 = background) of one image into `labels`,
// which must hold exactly `width·height` bytes. Needs a semantic checkpoint.
//
// # Safety
// `model` must be a live handle, `rgb` must hold `3·width·height` bytes and
// `labels` must be writable for `labels_len` bytes.
enum DasnetStatus dasnet_segment_semantic(const struct DasnetModel *model,
                                          const uint8_t *rgb,
                                          size_t width,
                                          size_t height,
                                          uint8_t *labels,
                                          size_t labels_len);

// Instance masks of one image, sorted by descending score. Needs an
// instance checkpoint.
//
// # Safety
// `model` must be a live handle, `rgb` must hold `3·width·height` bytes and
// `out` must be writable.
enum DasnetStatus dasnet_segment_instances(const struct DasnetModel *model,
                                           const uint8_t *rgb,
                                           size_t width,
                                           size_t height,
                                           struct DasnetResult **out);

// # Safety
// `result` must be a live handle and `out` writable.
enum DasnetStatus dasnet_result_len(const struct DasnetResult *result, size_t *out);

// # Safety
// `result` must be a live handle and `out` writable.
enum DasnetStatus dasnet_result_get(const struct DasnetResult *result,
                                    size_t index,
                                    struct DasnetInstance *out);

// Writes the 0/1 mask of entry `index` into `mask`, which must hold exactly
// `width·height` bytes of the segmented image.
//
// # Safety
// `result` must be a live handle and `mask` writable for `mask_len` bytes.
enum DasnetStatus dasnet_result_mask(const struct DasnetResult *result,
                                     size_t index,
                                     uint8_t *mask,
                                     size_t mask_len);

// # Safety
// `result` must come from this library and not be used afterwards.
void dasnet_result_free(struct DasnetResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DASNET_H */
