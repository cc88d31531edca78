#ifndef CAMANNOT_H
#define CAMANNOT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define CAMANNOT_HAS_PRECISION 1

#define CAMANNOT_HAS_RECALL 2

#define CAMANNOT_HAS_F1 4

typedef enum CamannotStatus {
  CAMANNOT_STATUS_OK = 0,
  CAMANNOT_STATUS_NULL_POINTER = 1,
  CAMANNOT_STATUS_INVALID_ARGUMENT = 2,
  CAMANNOT_STATUS_IO = 3,
  CAMANNOT_STATUS_PARSE = 4,
  /**
   * The quantity is mathematically undefined for this input.
   */
  CAMANNOT_STATUS_UNDEFINED = 5,
  CAMANNOT_STATUS_BACKEND = 6,
  CAMANNOT_STATUS_PANIC = 7,
} CamannotStatus;

typedef enum CamannotIntensity {
  CAMANNOT_INTENSITY_SB = 0,
  CAMANNOT_INTENSITY_LIPA = 1,
  CAMANNOT_INTENSITY_MVPA = 2,
  CAMANNOT_INTENSITY_SLEEP = 3,
  CAMANNOT_INTENSITY_UNKNOWN = 4,
} CamannotIntensity;

typedef enum CamannotApproach {
  CAMANNOT_APPROACH_DIRECT = 0,
  CAMANNOT_APPROACH_VIA_CLEAN = 1,
} CamannotApproach;

/**
 * A stub-backed text classifier over a fixed target set.
 */
typedef struct CamannotClassifier CamannotClassifier;

/**
 * A loaded dataset directory.
 */
typedef struct CamannotDataset CamannotDataset;

/**
 * A label dictionary CSV.
 */
typedef struct CamannotDictionary CamannotDictionary;

/**
 * One-vs-rest metrics. A field is meaningful only when its bit is set in
 * `defined`; undefined fields hold NaN.
 */
typedef struct CamannotClassMetrics {
  double precision;
  double recall;
  double f1;
  uint64_t support;
  uint32_t defined;
} CamannotClassMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *camannot_version(void);

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *camannot_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void camannot_string_free(char *s);

/**
 * Cohen's kappa of a row-major 3x3 confusion matrix (truth rows, predicted
 * columns, SB/LIPA/MVPA order). Returns `Undefined` for an empty matrix or
 * chance agreement of one.
 *
 * # Safety
 * `counts` must point to 9 readable values and `out` to a writable double.
 */
enum CamannotStatus camannot_kappa(const uint64_t *counts, double *out);

/**
 * # Safety
 * `counts` must point to 9 readable values and `out` to a writable struct.
 */
enum CamannotStatus camannot_class_metrics(const uint64_t *counts,
                                           uint32_t class_index,
                                           struct CamannotClassMetrics *out);

/**
 * Labelled hours: `n_labelled * median_dt_s / 3600`, plus the nearest whole hour.
 *
 * # Safety
 * `hours` and `rounded` must be writable.
 */
enum CamannotStatus camannot_time_covered(uint64_t n_labelled,
                                          double median_dt_s,
                                          double *hours,
                                          uint64_t *rounded);

/**
 * Image obscurity statistics over interleaved RGB bytes.
 *
 * # Safety
 * `rgb` must point to `len` readable bytes; outputs must be writable.
 */
enum CamannotStatus camannot_image_stats(const uint8_t *rgb,
                                         size_t len,
                                         double *mean_star,
                                         double *variance_star);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum CamannotStatus camannot_dictionary_load(const char *path, struct CamannotDictionary **out);

/**
 * Intensity of a raw label; trivial and unmapped labels give `Unknown`.
 *
 * # Safety
 * `dict` must be a live handle, `label` NUL-terminated and `out` writable.
 */
enum CamannotStatus camannot_dictionary_lookup(const struct CamannotDictionary *dict,
                                               const char *label,
                                               enum CamannotIntensity *out);

/**
 * # Safety
 * `dict` must be NULL or a handle from [`camannot_dictionary_load`].
 */
void camannot_dictionary_free(struct CamannotDictionary *dict);

/**
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum CamannotStatus camannot_dataset_load(const char *dir, struct CamannotDataset **out);

/**
 * # Safety
 * `ds` must be a live handle and the outputs writable.
 */
enum CamannotStatus camannot_dataset_counts(const struct CamannotDataset *ds,
                                            size_t *n_participants,
                                            size_t *n_records);

/**
 * Evaluates a predictions JSONL file against the dataset and returns the
 * report as a JSON string in `*json_out`.
 *
 * # Safety
 * `ds` must be a live handle, `predictions_path` NUL-terminated and
 * `json_out` writable. Free the result with [`camannot_string_free`].
 */
enum CamannotStatus camannot_dataset_evaluate(const struct CamannotDataset *ds,
                                              const char *predictions_path,
                                              char **json_out);

/**
 * # Safety
 * `ds` must be NULL or a handle from [`camannot_dataset_load`].
 */
void camannot_dataset_free(struct CamannotDataset *ds);

/**
 * A classifier over the deterministic stub sentence encoder. `clean_path`
 * (a clean label set JSON) is required for `ViaClean` and ignored otherwise.
 *
 * # Safety
 * `model_id` must be NUL-terminated, `clean_path` NULL or NUL-terminated,
 * `out` writable.
 */
enum CamannotStatus camannot_classifier_new_stub(const char *model_id,
                                                 size_t dim,
                                                 enum CamannotApproach approach,
                                                 bool reworded,
                                                 const char *clean_path,
                                                 struct CamannotClassifier **out);

/**
 * Maps free text (such as a caption) to its nearest target's intensity.
 *
 * # Safety
 * `cls` must be a live handle, `text` NUL-terminated, outputs writable.
 */
enum CamannotStatus camannot_classifier_classify_text(const struct CamannotClassifier *cls,
                                                      const char *text,
                                                      enum CamannotIntensity *class_out,
                                                      double *similarity_out);

/**
 * Number of targets; writes nothing on failure.
 *
 * # Safety
 * `cls` must be a live handle and `out` writable.
 */
enum CamannotStatus camannot_classifier_n_targets(const struct CamannotClassifier *cls,
                                                  size_t *out);

/**
 * # Safety
 * `cls` must be NULL or a handle from [`camannot_classifier_new_stub`].
 */
void camannot_classifier_free(struct CamannotClassifier *cls);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAMANNOT_H */
