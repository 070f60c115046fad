#ifndef DEQDET_H
#define DEQDET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DeqdetStatus {
  DEQDET_STATUS_OK = 0,
  DEQDET_STATUS_NULL_POINTER = 1,
  DEQDET_STATUS_INVALID_UTF8 = 2,
  DEQDET_STATUS_CONFIG = 3,
  DEQDET_STATUS_IO = 4,
  DEQDET_STATUS_TRAIN = 5,
  DEQDET_STATUS_OUT_OF_RANGE = 6,
  DEQDET_STATUS_PANIC = 7,
} DeqdetStatus;

/*
 Training configuration.
 */
typedef struct DeqdetConfig DeqdetConfig;

/*
 A decoder together with the configuration it was built from.
 */
typedef struct DeqdetModel DeqdetModel;

/*
 One detection in pixel corner form.
 */
typedef struct DeqdetDetection {
  uint32_t class_index;
  double score;
  double x1;
  double y1;
  double x2;
  double y2;
} DeqdetDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next failing call on the same thread.
 */
const char *deqdet_last_error(void);

/*
 Default configuration.

 # Safety
 `out` must be a valid pointer.
 */
enum DeqdetStatus deqdet_config_new(struct DeqdetConfig **out);

/*
 Parses `key = value` lines on top of the defaults.

 # Safety
 `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DeqdetStatus deqdet_config_from_text(const char *text, struct DeqdetConfig **out);

/*
 Sets one key. The config is unchanged on failure.

 # Safety
 `cfg` must come from this library; `key` and `value` must be
 NUL-terminated strings.
 */
enum DeqdetStatus deqdet_config_set(struct DeqdetConfig *cfg, const char *key, const char *value);

/*
 Writes the config as text into `buf`. `needed` receives the length
 including the terminating NUL; a short buffer yields `OutOfRange`.

 # Safety
 `buf` must hold `len` bytes (or be null with `len` 0).
 */
enum DeqdetStatus deqdet_config_to_text(const struct DeqdetConfig *cfg,
                                        char *buf,
                                        size_t len,
                                        size_t *needed);

/*
 # Safety
 `cfg` must come from this library and not be used afterwards.
 */
void deqdet_config_free(struct DeqdetConfig *cfg);

/*
 Freshly initialized model for `cfg`.

 # Safety
 `cfg` must come from this library and `out` be a valid pointer.
 */
enum DeqdetStatus deqdet_model_new(const struct DeqdetConfig *cfg, struct DeqdetModel **out);

/*
 Trains with `cfg` and returns the trained model and its held-out AP.

 # Safety
 `cfg` must come from this library; `out` must be valid; `ap50` and `ap`
 may be null.
 */
enum DeqdetStatus deqdet_train(const struct DeqdetConfig *cfg,
                               struct DeqdetModel **out,
                               double *ap50,
                               double *ap);

/*
 Loads a checkpoint written by [`deqdet_model_save`] or the CLI.

 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DeqdetStatus deqdet_model_load(const char *path, struct DeqdetModel **out);

/*
 # Safety
 `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum DeqdetStatus deqdet_model_save(const struct DeqdetModel *model, const char *path);

/*
 Total scalar parameter count.

 # Safety
 `model` must come from this library and `out` be a valid pointer.
 */
enum DeqdetStatus deqdet_model_num_params(const struct DeqdetModel *model, size_t *out);

/*
 AP@0.5 and AP@[0.5:0.95] on the first `num_scenes` held-out scenes
 (0 means the configured count).

 # Safety
 `model` must come from this library; `ap50` and `ap` must be valid.
 */
enum DeqdetStatus deqdet_model_evaluate(const struct DeqdetModel *model,
                                        size_t num_scenes,
                                        double *ap50,
                                        double *ap);

/*
 Detections above the score threshold on held-out scene `scene`.
 `count` receives the total; at most `capacity` are written to `buf`.

 # Safety
 `model` must come from this library; `buf` must hold `capacity` entries
 (or be null with `capacity` 0); `count` must be valid.
 */
enum DeqdetStatus deqdet_model_detect(const struct DeqdetModel *model,
                                      size_t scene,
                                      struct DeqdetDetection *buf,
                                      size_t capacity,
                                      size_t *count);

/*
 # Safety
 `model` must come from this library and not be used afterwards.
 */
void deqdet_model_free(struct DeqdetModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEQDET_H */
