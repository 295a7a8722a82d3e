#ifndef DESPOOF_H
#define DESPOOF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DspStatus {
  DSP_STATUS_OK = 0,
  DSP_STATUS_NULL_POINTER = 1,
  DSP_STATUS_INVALID_ARGUMENT = 2,
  DSP_STATUS_IO = 3,
  DSP_STATUS_FORMAT = 4,
  DSP_STATUS_NUMERIC = 5,
  DSP_STATUS_CONFIG = 6,
  DSP_STATUS_PANIC = 7,
} DspStatus;

// Which data a denoiser was trained on.
typedef enum DspDomainTag {
  DSP_DOMAIN_TAG_SPOOF_UNION = 0,
  DSP_DOMAIN_TAG_GENUINE_ONLY = 1,
} DspDomainTag;

// Trained denoiser with the schedule it was trained under.
typedef struct DspDenoiser DspDenoiser;

// Trained detector.
typedef struct DspDetector DspDetector;

// Metrics at a threshold fixed on development scores.
typedef struct DspMetrics {
  double apcer;
  double bpcer;
  double acer;
  double eer;
  double hter;
  double threshold;
} DspMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dsp_version(void);

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into the library on this thread.
const char *dsp_last_error(void);

// Loads a denoiser checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DspStatus dsp_denoiser_load(const char *path, struct DspDenoiser **out);

// Domain tag stored in a denoiser checkpoint.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DspStatus dsp_denoiser_domain_tag(const struct DspDenoiser *model, enum DspDomainTag *out);

// Releases a denoiser handle; null is ignored.
//
// # Safety
// `model` must come from [`dsp_denoiser_load`] and not be used afterwards.
void dsp_denoiser_free(struct DspDenoiser *model);

// De-spoofs one `[channels,height,width]` image through the spoof-union and
// genuine-only models. Writes the noise map (same size as the image) and its
// mean energy; `out_reconstruction` and `out_energy` may be null.
//
// # Safety
// Handles must be live; `image`, `out_noise` and a non-null
// `out_reconstruction` must each hold `channels*height*width` floats.
enum DspStatus dsp_despoof(const struct DspDenoiser *spoof,
                           const struct DspDenoiser *genuine,
                           const float *image,
                           size_t channels,
                           size_t height,
                           size_t width,
                           size_t steps,
                           float *out_reconstruction,
                           float *out_noise,
                           double *out_energy);

// Loads a detector checkpoint. On success `*out` owns a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DspStatus dsp_detector_load(const char *path, struct DspDetector **out);

// Whether the detector consumes a noise map (1) or not (0).
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum DspStatus dsp_detector_needs_noise(const struct DspDetector *model, uint8_t *out);

// Releases a detector handle; null is ignored.
//
// # Safety
// `model` must come from [`dsp_detector_load`] and not be used afterwards.
void dsp_detector_free(struct DspDetector *model);

// Liveness score of one `[3,size,size]` image, higher meaning more genuine.
// `noise` is required when the detector consumes noise and ignored
// otherwise. With `fuse` nonzero the score is the mean of the two per-stream
// heads. `out_depth` may be null or hold the 32x32 predicted depth map.
//
// # Safety
// The handle must be live and every non-null buffer correctly sized.
enum DspStatus dsp_detector_score(const struct DspDetector *model,
                                  const float *rgb,
                                  const float *noise,
                                  size_t size,
                                  uint8_t fuse,
                                  double *out_score,
                                  float *out_depth);

// Equal error rate of a labelled score set and the threshold reaching it.
//
// # Safety
// `scores` and `labels` must hold `len` elements; outputs must be valid.
enum DspStatus dsp_eer(const double *scores,
                       const uint8_t *labels,
                       size_t len,
                       double *out_eer,
                       double *out_threshold);

// Full report on the test scores at the threshold where the development
// scores reach their equal error rate. With `dev_len` zero the test set
// fixes its own threshold.
//
// # Safety
// Each score/label pair must hold its stated number of elements.
enum DspStatus dsp_metrics(const double *dev_scores,
                           const uint8_t *dev_labels,
                           size_t dev_len,
                           const double *test_scores,
                           const uint8_t *test_labels,
                           size_t test_len,
                           struct DspMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DESPOOF_H */
