#ifndef EMSEG_H
#define EMSEG_H

#include <stddef.h>
#include <stdint.h>

/*
 Outcome of an FFI call.
 */
typedef enum EmsegStatus {
  EMSEG_STATUS_OK = 0,
  /*
   A required pointer was null or a string was not UTF-8.
   */
  EMSEG_STATUS_INVALID_ARGUMENT = 1,
  EMSEG_STATUS_SHAPE_MISMATCH = 2,
  EMSEG_STATUS_NON_FINITE_VALUE = 3,
  EMSEG_STATUS_INVALID_LABEL = 4,
  EMSEG_STATUS_DOMAIN = 5,
  EMSEG_STATUS_INVALID_CONFIG = 6,
  EMSEG_STATUS_NO_LABELED_CLUSTER = 7,
  EMSEG_STATUS_EMPTY_INPUT = 8,
  EMSEG_STATUS_OFFSET_OUT_OF_RANGE = 9,
  EMSEG_STATUS_INFEASIBLE_SPEC = 10,
  EMSEG_STATUS_DIVERGENCE_DETECTED = 11,
  EMSEG_STATUS_BAD_MAGIC = 12,
  EMSEG_STATUS_UNSUPPORTED_VERSION = 13,
  EMSEG_STATUS_TRUNCATED_FILE = 14,
  EMSEG_STATUS_ENCODE = 15,
  EMSEG_STATUS_IO = 16,
  EMSEG_STATUS_PANIC = 17,
} EmsegStatus;

/*
 Field value type used when writing EMB1 files.
 */
typedef enum EmsegDtype {
  EMSEG_DTYPE_F32 = 0,
  EMSEG_DTYPE_F64 = 1,
} EmsegDtype;

/*
 Supervision mode for `emseg_optimize`.
 */
typedef enum EmsegMode {
  EMSEG_MODE_FULL = 0,
  EMSEG_MODE_SPARSE = 1,
} EmsegMode;

/*
 Opaque run configuration.
 */
typedef struct EmsegConfig EmsegConfig;

/*
 Opaque embedding field.
 */
typedef struct EmsegField EmsegField;

/*
 Opaque label image.
 */
typedef struct EmsegLabels EmsegLabels;

/*
 Segmentation scores from `emseg_evaluate`.
 */
typedef struct EmsegMetrics {
  double sbd;
  double abs_dic;
  double arand;
  double ap50;
  double map;
} EmsegMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the most recent failure on this thread, or an empty string.
 The pointer stays valid until the next failing call on this thread.
 */
const char *emseg_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *emseg_version(void);

/*
 Copies `height * width * channels` row-major, channel-last values into a
 new field.

 # Safety
 `data` must point to that many readable doubles; `out` must be writable.
 */
enum EmsegStatus emseg_field_new(size_t height,
                                 size_t width,
                                 size_t channels,
                                 const double *data,
                                 struct EmsegField **out);

/*
 # Safety
 `field` must be null or a handle from this library not yet freed.
 */
void emseg_field_free(struct EmsegField *field);

/*
 # Safety
 `field` must be a live handle; the output pointers must be writable or null.
 */
enum EmsegStatus emseg_field_shape(const struct EmsegField *field,
                                   size_t *height,
                                   size_t *width,
                                   size_t *channels);

/*
 Copies the values into `out`, which must hold exactly
 `height * width * channels` doubles.

 # Safety
 `field` must be a live handle; `out` must point to `len` writable doubles.
 */
enum EmsegStatus emseg_field_copy_data(const struct EmsegField *field, double *out, size_t len);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EmsegStatus emseg_field_read(const char *path, struct EmsegField **out);

/*
 # Safety
 `field` must be a live handle; `path` must be a NUL-terminated string.
 */
enum EmsegStatus emseg_field_write(const struct EmsegField *field,
                                   const char *path,
                                   enum EmsegDtype dtype);

/*
 Copies `height * width` row-major labels into a new label image.

 # Safety
 `data` must point to that many readable values; `out` must be writable.
 */
enum EmsegStatus emseg_labels_new(size_t height,
                                  size_t width,
                                  const uint64_t *data,
                                  struct EmsegLabels **out);

/*
 # Safety
 `labels` must be null or a handle from this library not yet freed.
 */
void emseg_labels_free(struct EmsegLabels *labels);

/*
 # Safety
 `labels` must be a live handle; the output pointers must be writable or null.
 */
enum EmsegStatus emseg_labels_shape(const struct EmsegLabels *labels,
                                    size_t *height,
                                    size_t *width);

/*
 Number of distinct instance ids (labels >= 2).

 # Safety
 `labels` must be a live handle; `out` must be writable.
 */
enum EmsegStatus emseg_labels_num_instances(const struct EmsegLabels *labels, size_t *out);

/*
 # Safety
 `labels` must be a live handle; `out` must point to `len` writable values.
 */
enum EmsegStatus emseg_labels_copy_data(const struct EmsegLabels *labels,
                                        uint64_t *out,
                                        size_t len);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EmsegStatus emseg_labels_read(const char *path, struct EmsegLabels **out);

/*
 # Safety
 `labels` must be a live handle; `path` must be a NUL-terminated string.
 */
enum EmsegStatus emseg_labels_write(const struct EmsegLabels *labels, const char *path);

/*
 # Safety
 `out` must be writable.
 */
enum EmsegStatus emseg_config_default(struct EmsegConfig **out);

/*
 Parses a flat TOML run configuration; missing keys take defaults.

 # Safety
 `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum EmsegStatus emseg_config_from_toml(const char *toml, struct EmsegConfig **out);

/*
 # Safety
 `config` must be null or a handle from this library not yet freed.
 */
void emseg_config_free(struct EmsegConfig *config);

/*
 Synthesizes a scene of `instances` non-overlapping disks.

 # Safety
 `out` must be writable.
 */
enum EmsegStatus emseg_generate_disks(size_t height,
                                      size_t width,
                                      size_t instances,
                                      double radius_min,
                                      double radius_max,
                                      double gap,
                                      uint64_t seed,
                                      struct EmsegLabels **out);

/*
 Optimizes a field against `labels` with the configured loss and
 schedule. In sparse mode the labels are first subsampled to the
 configured fraction `p` of instances. `out_g` may be null.

 # Safety
 Handles must be live; `out_f` must be writable; `out_g` writable or null.
 */
enum EmsegStatus emseg_optimize(const struct EmsegConfig *config,
                                const struct EmsegLabels *labels,
                                enum EmsegMode mode,
                                struct EmsegField **out_f,
                                struct EmsegField **out_g);

/*
 Clusters `field` with the configured method. `field_g` may be null
 except for consistency clustering.

 # Safety
 Handles must be live (or null where allowed); `out` must be writable.
 */
enum EmsegStatus emseg_cluster(const struct EmsegConfig *config,
                               const struct EmsegField *field,
                               const struct EmsegField *field_g,
                               struct EmsegLabels **out);

/*
 Scores `pred` against `gt`; mAP uses the configured thresholds.

 # Safety
 Handles must be live; `out` must be writable.
 */
enum EmsegStatus emseg_evaluate(const struct EmsegConfig *config,
                                const struct EmsegLabels *pred,
                                const struct EmsegLabels *gt,
                                struct EmsegMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMSEG_H */
