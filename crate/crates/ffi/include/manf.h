#ifndef MANF_H
#define MANF_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Lambda index reported by [`manf_codec_lambda_index`] for checkpoints without one.
 */
#define MANF_NO_LAMBDA -1

typedef enum ManfMaskMode {
  MANF_MASK_MODE_VARIANCE = 0,
  MANF_MASK_MODE_RDO = 1,
  MANF_MASK_MODE_FINE = 2,
  MANF_MASK_MODE_COARSE = 3,
} ManfMaskMode;

typedef enum ManfModelKind {
  MANF_MODEL_KIND_M_ANFIC = 0,
  MANF_MODEL_KIND_MS_ANFIC = 1,
} ManfModelKind;

typedef enum ManfStatus {
  MANF_STATUS_OK = 0,
  MANF_STATUS_NULL_POINTER = 1,
  MANF_STATUS_INVALID_ARGUMENT = 2,
  MANF_STATUS_IO = 3,
  MANF_STATUS_MALFORMED = 4,
  MANF_STATUS_TRUNCATED = 5,
  MANF_STATUS_CHECKSUM = 6,
  MANF_STATUS_VERSION = 7,
  MANF_STATUS_CHECKPOINT = 8,
  MANF_STATUS_INTERNAL = 9,
} ManfStatus;

/**
 * Opaque codec handle.
 */
typedef struct ManfCodec ManfCodec;

/**
 * Byte buffer owned by the library.
 */
typedef struct ManfBuffer {
  uint8_t *data;
  size_t len;
} ManfBuffer;

typedef struct ManfEncodeStats {
  double bpp;
  double estimated_bits;
  double psnr_rgb_db;
  double level1_fraction;
} ManfEncodeStats;

/**
 * Interleaved 8-bit RGB image owned by the library.
 */
typedef struct ManfImage {
  uint8_t *data;
  size_t width;
  size_t height;
} ManfImage;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Description of the last failure on this thread, or an empty string.
 * The pointer stays valid until the next library call on this thread.
 */
const char *manf_last_error(void);

/**
 * Loads a codec from checkpoint bytes.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` to writable storage.
 */
enum ManfStatus manf_codec_from_checkpoint(const uint8_t *data, size_t len, struct ManfCodec **out);

/**
 * Loads a codec from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum ManfStatus manf_codec_open(const char *path, struct ManfCodec **out);

/**
 * Freshly initialized, untrained codec. `lambda_index` may be
 * [`MANF_NO_LAMBDA`].
 *
 * # Safety
 * `out` must be writable.
 */
enum ManfStatus manf_codec_new(enum ManfModelKind kind,
                               size_t transform_channels,
                               size_t latent_channels,
                               uint64_t seed,
                               int32_t lambda_index,
                               struct ManfCodec **out);

/**
 * Serialized checkpoint of `codec`, released with [`manf_buffer_free`].
 *
 * # Safety
 * `codec` must come from this library and `out` must be writable.
 */
enum ManfStatus manf_codec_checkpoint(const struct ManfCodec *codec, struct ManfBuffer *out);

/**
 * # Safety
 * `codec` must come from this library and `out` must be writable.
 */
enum ManfStatus manf_codec_lambda_index(const struct ManfCodec *codec, int32_t *out);

/**
 * # Safety
 * `codec` must be null or come from this library, and not be used afterwards.
 */
void manf_codec_free(struct ManfCodec *codec);

/**
 * Compresses a `width` × `height` interleaved RGB image. A negative
 * `lambda_index` uses the one stored in the checkpoint. `stats` may be null.
 *
 * # Safety
 * `rgb` must hold `3 · width · height` bytes; `out` must be writable.
 */
enum ManfStatus manf_encode_rgb8(const struct ManfCodec *codec,
                                 const uint8_t *rgb,
                                 size_t width,
                                 size_t height,
                                 int32_t lambda_index,
                                 enum ManfMaskMode mask,
                                 struct ManfBuffer *out,
                                 struct ManfEncodeStats *stats);

/**
 * Reconstructs an image from a bitstream, released with [`manf_image_free`].
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum ManfStatus manf_decode_rgb8(const struct ManfCodec *codec,
                                 const uint8_t *data,
                                 size_t len,
                                 struct ManfImage *out);

/**
 * # Safety
 * `buffer` must be null or filled by this library; it is reset to empty.
 */
void manf_buffer_free(struct ManfBuffer *buffer);

/**
 * # Safety
 * `image` must be null or filled by this library; it is reset to empty.
 */
void manf_image_free(struct ManfImage *image);

/**
 * PSNR over R, G and B of two interleaved RGB images, in dB.
 *
 * # Safety
 * `a` and `b` must each hold `3 · width · height` bytes; `out` must be writable.
 */
enum ManfStatus manf_psnr_rgb8(const uint8_t *a,
                               const uint8_t *b,
                               size_t width,
                               size_t height,
                               double *out);

/**
 * MS-SSIM of two interleaved RGB images on a linear scale.
 *
 * # Safety
 * As for [`manf_psnr_rgb8`].
 */
enum ManfStatus manf_ms_ssim_rgb8(const uint8_t *a,
                                  const uint8_t *b,
                                  size_t width,
                                  size_t height,
                                  double *out);

/**
 * BD rate in percent of the test curve against the anchor, quality in dB.
 *
 * # Safety
 * Each rate and quality array must hold the stated number of values.
 */
enum ManfStatus manf_bd_rate(const double *anchor_bpp,
                             const double *anchor_quality,
                             size_t anchor_len,
                             const double *test_bpp,
                             const double *test_quality,
                             size_t test_len,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MANF_H */
