#ifndef DPS_H
#define DPS_H

/* Generated by cbindgen from dps-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every fallible call.
typedef enum DpsStatus {
  DPS_STATUS_OK = 0,
  DPS_STATUS_NULL_POINTER = 1,
  DPS_STATUS_INVALID_ARGUMENT = 2,
  DPS_STATUS_SHAPE_MISMATCH = 3,
  DPS_STATUS_CLASS_RANGE = 4,
  DPS_STATUS_DEGENERATE = 5,
  DPS_STATUS_INSUFFICIENT = 6,
  DPS_STATUS_INCOMPATIBLE = 7,
  DPS_STATUS_IO_ERROR = 8,
  DPS_STATUS_FORMAT_ERROR = 9,
  DPS_STATUS_INTERNAL_ERROR = 10,
} DpsStatus;

// Loaded dataset.
typedef struct DpsDataset DpsDataset;

// Loaded model checkpoint.
typedef struct DpsModel DpsModel;

// Decision patterns extracted for every sample of a dataset.
typedef struct DpsPatternSet DpsPatternSet;

// Per-class mean reference patterns.
typedef struct DpsReferenceSet DpsReferenceSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library; static storage, do not free.
const char *dps_version(void);

// Copies the last error message of this thread into `buf` (truncating,
// always NUL-terminated) and returns the full message length in bytes.
//
// # Safety
// `buf` must point to `len` writable bytes, or be NULL (then only the
// length is returned).
size_t dps_last_error_message(char *buf, size_t len);

// Loads a model checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
// pointer. On success `*out` owns the model and must be released with
// `dps_model_free`.
enum DpsStatus dps_model_load(const char *path, struct DpsModel **out);

// # Safety
// `model` must come from `dps_model_load` and not be freed twice.
void dps_model_free(struct DpsModel *model);

// Number of output classes of the model head.
//
// # Safety
// `model` and `out` must be valid pointers.
enum DpsStatus dps_model_num_classes(const struct DpsModel *model, uint32_t *out);

// Loads a dataset file.
//
// # Safety
// As `dps_model_load`; release with `dps_dataset_free`.
enum DpsStatus dps_dataset_load(const char *path, struct DpsDataset **out);

// # Safety
// `dataset` must come from `dps_dataset_load` and not be freed twice.
void dps_dataset_free(struct DpsDataset *dataset);

// Number of samples in a dataset.
//
// # Safety
// `dataset` and `out` must be valid pointers.
enum DpsStatus dps_dataset_len(const struct DpsDataset *dataset, uint32_t *out);

// Extracts one decision pattern per dataset sample, using the ground
// truth label as the extraction class.
//
// # Safety
// `model` and `dataset` must be live handles; `out` must be valid. On
// success `*out` must be released with `dps_patternset_free`.
enum DpsStatus dps_extract_patterns(const struct DpsModel *model,
                                    const struct DpsDataset *dataset,
                                    struct DpsPatternSet **out);

// # Safety
// `set` must come from `dps_extract_patterns` and not be freed twice.
void dps_patternset_free(struct DpsPatternSet *set);

// Number of patterns in the set.
//
// # Safety
// `set` and `out` must be valid pointers.
enum DpsStatus dps_patternset_len(const struct DpsPatternSet *set, uint32_t *out);

// Channel count (pattern dimensionality).
//
// # Safety
// `set` and `out` must be valid pointers.
enum DpsStatus dps_patternset_dim(const struct DpsPatternSet *set, uint32_t *out);

// Copies pattern `index` into `buf` (length `buf_len` doubles; must be at
// least the pattern dimensionality).
//
// # Safety
// `set` must be a live handle; `buf` must point to `buf_len` writable
// doubles.
enum DpsStatus dps_patternset_pattern(const struct DpsPatternSet *set,
                                      uint32_t index,
                                      double *buf,
                                      size_t buf_len);

// Per-pattern metadata: true class, predicted class, extraction-class
// logit, loss, and whether the pattern is degenerate (zero norm). Any
// output pointer may be NULL to skip that field.
//
// # Safety
// `set` must be a live handle; non-NULL outputs must be writable.
enum DpsStatus dps_patternset_info(const struct DpsPatternSet *set,
                                   uint32_t index,
                                   uint32_t *out_true_class,
                                   uint32_t *out_predicted_class,
                                   double *out_logit,
                                   double *out_loss,
                                   uint8_t *out_degenerate);

// Builds per-class mean references from a (training) pattern set.
// `num_classes` fixes the class range; every class must have at least one
// usable pattern.
//
// # Safety
// `set` must be a live handle; `out` must be valid. Release `*out` with
// `dps_referenceset_free`.
enum DpsStatus dps_build_references(const struct DpsPatternSet *set,
                                    uint32_t num_classes,
                                    struct DpsReferenceSet **out);

// # Safety
// `refs` must come from `dps_build_references` and not be freed twice.
void dps_referenceset_free(struct DpsReferenceSet *refs);

// Shift of one test pattern against its class reference: 1 - cosine, in
// [0, 2]. Degenerate patterns yield `DPS_STATUS_DEGENERATE`.
//
// # Safety
// `set` and `refs` must be live handles; `out` must be writable.
enum DpsStatus dps_shift_sample(const struct DpsPatternSet *set,
                                uint32_t index,
                                const struct DpsReferenceSet *refs,
                                double *out);

// Mean shift over all non-degenerate patterns in the set. Returns the
// number of skipped degenerate patterns through `out_skipped` (optional).
//
// # Safety
// `set` and `refs` must be live handles; `out` must be writable;
// `out_skipped` may be NULL.
enum DpsStatus dps_shift_dataset(const struct DpsPatternSet *set,
                                 const struct DpsReferenceSet *refs,
                                 double *out,
                                 uint32_t *out_skipped);

// Spatial size (H, W) of the model's attribution target activation, which
// is also the size of exported saliency maps.
//
// # Safety
// `model`, `out_h`, and `out_w` must be valid pointers.
enum DpsStatus dps_target_map_size(const struct DpsModel *model, uint32_t *out_h, uint32_t *out_w);

// Renders the rectified spatial saliency map of one dataset sample for a
// class into `buf` (row-major H*W doubles; see `dps_target_map_size`).
//
// # Safety
// `model` and `dataset` must be live handles; `buf` must point to
// `buf_len` writable doubles.
enum DpsStatus dps_saliency_map(const struct DpsModel *model,
                                const struct DpsDataset *dataset,
                                uint32_t sample_index,
                                uint32_t class_index,
                                double *buf,
                                size_t buf_len);

// Cosine similarity of two raw vectors; exposed for binding-side checks.
//
// # Safety
// `a` and `b` must point to `len` readable doubles; `out` must be
// writable.
enum DpsStatus dps_cosine(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPS_H */
