#ifndef DDETR_H
#define DDETR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum DdetrStatus {
  DdetrOk = 0,
  DdetrNullArgument = 1,
  DdetrInvalidUtf8 = 2,
  DdetrLoadFailed = 3,
  DdetrBadInput = 4,
  DdetrInferenceFailed = 5,
  DdetrPanic = 6,
} DdetrStatus;

/**
 * Opaque model handle.
 */
typedef struct DdetrModel DdetrModel;

/**
 * One detection in normalized image coordinates.
 */
typedef struct DdetrDetection {
  double cx;
  double cy;
  double w;
  double h;
  double score;
  uint32_t class_id;
} DdetrDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *ddetr_last_error(void);

/**
 * Build a model from a JSON model-config file and a checkpoint, writing the
 * handle to `out`. On failure `out` is untouched and a status is returned.
 *
 * # Safety
 * `config_path` and `checkpoint_path` must be NUL-terminated strings and
 * `out` a valid pointer.
 */
enum DdetrStatus ddetr_model_load(const char *config_path,
                                  const char *checkpoint_path,
                                  struct DdetrModel **out);

/**
 * Number of object classes the model predicts, or 0 on a null handle.
 *
 * # Safety
 * `model` must be null or a handle returned by [`ddetr_model_load`].
 */
uint32_t ddetr_model_num_classes(const struct DdetrModel *model);

/**
 * Run detection on one square `[3, size, size]` image (row-major,
 * channel-first, values in [0, 1]). Up to `max_out` detections are written
 * to `out` in descending score order; `*n_out` receives the count.
 *
 * # Safety
 * `image` must point to `3 * size * size` doubles, `out` to `max_out`
 * records, and `n_out` to a writable size_t.
 */
enum DdetrStatus ddetr_model_detect(const struct DdetrModel *model,
                                    const double *image,
                                    uintptr_t size,
                                    uintptr_t max_out,
                                    struct DdetrDetection *out,
                                    uintptr_t *n_out);

/**
 * Destroy a handle created by [`ddetr_model_load`]. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by `ddetr_model_load` and
 * not freed before.
 */
void ddetr_model_free(struct DdetrModel *model);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DDETR_H */
