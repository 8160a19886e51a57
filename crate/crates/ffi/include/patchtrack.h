#ifndef PATCHTRACK_H
#define PATCHTRACK_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum PtStatus {
  PT_STATUS_OK = 0,
  PT_STATUS_NULL_POINTER = 1,
  PT_STATUS_INVALID_ARGUMENT = 2,
  PT_STATUS_DIMENSION = 3,
  PT_STATUS_NUMERIC = 4,
  PT_STATUS_INVALID_STATE = 5,
  PT_STATUS_INTERNAL = 6,
} PtStatus;

/**
 * Opaque tracker handle.
 */
typedef struct PtTracker PtTracker;

/**
 * Tunable subset of the tracker configuration. Fill with
 * [`pt_config_default`] before changing fields.
 */
typedef struct PtConfig {
  uint32_t n_particles;
  uint32_t n_templates;
  uint32_t upsilon;
  /**
   * Random-walk standard deviations for (lx, ly, theta, s, psi, phi).
   */
  double sigma[6];
  double eps;
  double delta;
  uint64_t seed;
} PtConfig;

/**
 * Result of one tracked frame.
 */
typedef struct PtRecord {
  uint64_t frame_index;
  /**
   * 0-based `(x, y, w, h)`.
   */
  double bbox[4];
  double likelihood;
  double gamma;
  double clear_small;
  double clear_large;
  bool dictionary_gate;
  bool degenerate;
} PtRecord;

typedef struct PtMetrics {
  double dp20;
  double auc;
} PtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pt_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *pt_last_error(void);

/**
 * Writes the default configuration to `out`.
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one `PtConfig`.
 */
enum PtStatus pt_config_default(struct PtConfig *out);

/**
 * Creates a tracker from the first frame and a 0-based `(x, y, w, h)` box.
 * `config` may be NULL for defaults. On success `*out` owns the handle.
 *
 * # Safety
 * `pixels` must satisfy [`pt_tracker_step`]'s frame contract, `bbox` must
 * point to 4 doubles, `config` must be NULL or valid, `out` must be writable.
 */
enum PtStatus pt_tracker_new(const uint8_t *pixels,
                             uint32_t width,
                             uint32_t height,
                             uint32_t stride,
                             const double *bbox,
                             const struct PtConfig *config,
                             struct PtTracker **out);

/**
 * Tracks one frame and writes the result to `out`.
 *
 * # Safety
 * `tracker` must come from [`pt_tracker_new`] and not be freed. `pixels`
 * must point to `stride * (height - 1) + width` readable bytes. `out` must
 * be writable.
 */
enum PtStatus pt_tracker_step(struct PtTracker *tracker,
                              const uint8_t *pixels,
                              uint32_t width,
                              uint32_t height,
                              uint32_t stride,
                              struct PtRecord *out);

/**
 * Releases a tracker. NULL is ignored.
 *
 * # Safety
 * `tracker` must be NULL or a live handle from [`pt_tracker_new`].
 */
void pt_tracker_free(struct PtTracker *tracker);

/**
 * Distance precision at 20 px and success AUC of `n` tracked boxes against
 * `n` ground-truth boxes, both packed as `(x, y, w, h)`.
 *
 * # Safety
 * `track` and `gt` must each point to `4 * n` doubles; `out` must be writable.
 */
enum PtStatus pt_metrics(const double *track, const double *gt, size_t n, struct PtMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHTRACK_H */
