#ifndef IXVECTOR_H
#define IXVECTOR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every function.
 */
typedef enum IxvStatus {
  IXV_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IXV_STATUS_NULL_POINTER = 1,
  /**
   * Arguments or inputs are invalid (bad shape, bad config, unknown name).
   */
  IXV_STATUS_INVALID = 2,
  /**
   * Two inputs disagree (dimensions, fingerprints, config hashes).
   */
  IXV_STATUS_MISMATCH = 3,
  /**
   * A file is missing, unreadable or corrupt.
   */
  IXV_STATUS_ARTIFACT = 4,
  /**
   * A numerical routine failed.
   */
  IXV_STATUS_NUMERICAL = 5,
  /**
   * The caller's output buffer is too small; the needed size was reported.
   */
  IXV_STATUS_BUFFER_TOO_SMALL = 6,
  /**
   * A bug inside the library; the handle arguments should be discarded.
   */
  IXV_STATUS_PANIC = 7,
} IxvStatus;

/**
 * Subject references.
 */
typedef struct IxvEnrollment IxvEnrollment;

/**
 * Feature tensor of one segment.
 */
typedef struct IxvFeatures IxvFeatures;

/**
 * A trained system loaded from its directory.
 */
typedef struct IxvSystem IxvSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ixv_version(void);

/**
 * Copies the calling thread's last error message into `buf`. `needed`
 * (optional) receives the size including the NUL. Returns `Ok` with an
 * empty string when there is no error.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes or null; `needed` must be valid or null.
 */
enum IxvStatus ixv_last_error_message(char *buf, size_t cap, size_t *needed);

/**
 * Reads a feature file written by `extract-features`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum IxvStatus ixv_features_load(const char *path, struct IxvFeatures **out);

/**
 * PSD features of one segment of raw signal. `samples` is channel-major:
 * `n_channels` consecutive runs of `n_samples` values. Every channel is kept
 * and no standardisation is applied, so the result matches what
 * `extract-features` writes under a config that keeps the full montage
 * unstandardised.
 *
 * # Safety
 * `subject` must be a NUL-terminated string; `samples` must hold
 * `n_channels * n_samples` floats; `out` must be valid for writes.
 */
enum IxvStatus ixv_features_compute(const char *subject,
                                    const float *samples,
                                    size_t n_channels,
                                    size_t n_samples,
                                    double sample_rate_hz,
                                    double frame_len_ms,
                                    double band_lo_hz,
                                    double band_hi_hz,
                                    struct IxvFeatures **out);

/**
 * Channels, frames and per-frame dimension of a feature tensor.
 *
 * # Safety
 * `f` must be a live handle; the out pointers must be valid or null.
 */
enum IxvStatus ixv_features_shape(const struct IxvFeatures *f,
                                  size_t *n_channels,
                                  size_t *n_frames,
                                  size_t *dim);

/**
 * Copies the tensor, channel-major then frame-major, into `out`.
 *
 * # Safety
 * `f` must be a live handle; `out` must be valid for `cap` doubles.
 */
enum IxvStatus ixv_features_data(const struct IxvFeatures *f, double *out, size_t cap);

/**
 * # Safety
 * `f` must come from this library and not be used afterwards; null is ignored.
 */
void ixv_features_free(struct IxvFeatures *f);

/**
 * Loads a system directory. `config_path` may be null for the default
 * desk config; otherwise it names the TOML file the system was trained
 * with, and a different config hash is reported as `Mismatch`.
 *
 * # Safety
 * String arguments must be NUL-terminated (or null where allowed); `out`
 * must be valid for writes.
 */
enum IxvStatus ixv_system_load(const char *dir, const char *config_path, struct IxvSystem **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards; null is ignored.
 */
void ixv_system_free(struct IxvSystem *s);

/**
 * Copies the system kind name (e.g. `ix`) into `buf`.
 *
 * # Safety
 * `s` must be a live handle; `buf` valid for `cap` bytes; `needed` valid or null.
 */
enum IxvStatus ixv_system_kind(const struct IxvSystem *s, char *buf, size_t cap, size_t *needed);

/**
 * Writes the LDA-projected embedding of `f` into `out` (capacity `cap`);
 * `len` receives its length. Not available for GMM or per-channel systems.
 *
 * # Safety
 * Handles must be live; `out` valid for `cap` doubles; `len` valid or null.
 */
enum IxvStatus ixv_system_embed(const struct IxvSystem *s,
                                const struct IxvFeatures *f,
                                double *out,
                                size_t cap,
                                size_t *len);

/**
 * Enrolls every subject found among `features` (by the subject each tensor
 * was labelled with), using the enrollment mode of the system's config.
 *
 * # Safety
 * `features` must point to `n` live handles; `out` must be valid for writes.
 */
enum IxvStatus ixv_system_enroll(const struct IxvSystem *s,
                                 const struct IxvFeatures *const *features,
                                 size_t n,
                                 struct IxvEnrollment **out);

/**
 * Reads an enrollment file written by the `enroll` command.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be valid for writes.
 */
enum IxvStatus ixv_enrollment_load(const char *path, struct IxvEnrollment **out);

/**
 * Number of enrolled subjects, which is the length of every score row.
 *
 * # Safety
 * `e` must be a live handle; `n` must be valid for writes.
 */
enum IxvStatus ixv_enrollment_n_subjects(const struct IxvEnrollment *e, size_t *n);

/**
 * Copies the id of the `i`-th enrolled subject (score column `i`).
 *
 * # Safety
 * `e` must be a live handle; `buf` valid for `cap` bytes; `needed` valid or null.
 */
enum IxvStatus ixv_enrollment_subject(const struct IxvEnrollment *e,
                                      size_t i,
                                      char *buf,
                                      size_t cap,
                                      size_t *needed);

/**
 * # Safety
 * `e` must come from this library and not be used afterwards; null is ignored.
 */
void ixv_enrollment_free(struct IxvEnrollment *e);

/**
 * Scores one segment against every enrolled subject, writing one score per
 * subject into `scores` (capacity `cap`).
 *
 * # Safety
 * Handles must be live; `scores` must be valid for `cap` doubles.
 */
enum IxvStatus ixv_system_score(const struct IxvSystem *s,
                                const struct IxvEnrollment *e,
                                const struct IxvFeatures *f,
                                double *scores,
                                size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IXVECTOR_H */
