#ifndef WLAS_H
#define WLAS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WlasMode {
  WLAS_MODE_AUDIO = 0,
  WLAS_MODE_LIPS = 1,
  WLAS_MODE_BOTH = 2,
} WlasMode;

typedef enum WlasStatus {
  WLAS_STATUS_OK = 0,
  WLAS_STATUS_NULL_POINTER = 1,
  WLAS_STATUS_INVALID_ARGUMENT = 2,
  WLAS_STATUS_IO = 3,
  WLAS_STATUS_FORMAT = 4,
  WLAS_STATUS_SHAPE = 5,
  WLAS_STATUS_BUFFER_TOO_SMALL = 6,
  WLAS_STATUS_INTERNAL = 7,
} WlasStatus;

/**
 * Opaque model handle.
 */
typedef struct WlasModel WlasModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *wlas_version(void);

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `written` may be null.
 */
enum WlasStatus wlas_last_error(char *buf, size_t cap, size_t *written);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WlasStatus wlas_model_load(const char *path, struct WlasModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`wlas_model_load`] and not be used afterwards.
 */
void wlas_model_free(struct WlasModel *model);

/**
 * Frame height and width the model expects, and its vocabulary size.
 *
 * # Safety
 * `model` must be a live handle; output pointers may be null.
 */
enum WlasStatus wlas_model_info(const struct WlasModel *model,
                                size_t *height,
                                size_t *width,
                                size_t *vocab_size);

/**
 * Transcribes one utterance into `out` (NUL-terminated UTF-8).
 *
 * `video` holds `frames × height × width` grayscale bytes and may be null
 * (treated as absent, zeros to the encoder). `audio` holds
 * `audio_frames × 13` MFCC values, row-major.
 *
 * # Safety
 * Buffers must be valid for the stated sizes; `written` may be null.
 */
enum WlasStatus wlas_transcribe(const struct WlasModel *model,
                                const uint8_t *video,
                                size_t frames,
                                size_t height,
                                size_t width,
                                const float *audio,
                                size_t audio_frames,
                                enum WlasMode mode,
                                size_t beam_width,
                                char *out,
                                size_t out_cap,
                                size_t *written);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* WLAS_H */
