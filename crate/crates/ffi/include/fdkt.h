/* C interface to the fdkt pipeline. Generated by cbindgen; do not edit. */

#ifndef FDKT_H
#define FDKT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible call.
 */
typedef enum FdktStatus {
  FdktStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  FdktStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  FdktStatus_InvalidUtf8 = 2,
  /**
   * File could not be read or written.
   */
  FdktStatus_Io = 3,
  /**
   * File contents could not be parsed.
   */
  FdktStatus_Parse = 4,
  /**
   * The operation's domain rules rejected the input.
   */
  FdktStatus_Domain = 5,
} FdktStatus;

/**
 * Opaque dataset handle.
 */
typedef struct FdktDataset FdktDataset;

/**
 * Opaque language-model handle.
 */
typedef struct FdktModel FdktModel;

/**
 * Opaque task description handle.
 */
typedef struct FdktTask FdktTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null when
 * no failure has occurred. The pointer stays valid until the next failing
 * call on the same thread.
 */
const char *fdkt_last_error_message(void);

/**
 * Library version as a static string; never freed by the caller.
 */
const char *fdkt_version(void);

/**
 * Frees a string previously returned by this library.
 *
 * # Safety
 * `s` must have been returned by an fdkt function and not freed before.
 */
void fdkt_string_free(char *s);

/**
 * Total (epsilon, delta)-DP cost of `steps` subsampled-Gaussian steps.
 *
 * # Safety
 * `out_epsilon` must point to writable memory for one f64.
 */
enum FdktStatus fdkt_rdp_epsilon(double noise_multiplier,
                                 double sample_rate,
                                 uint64_t steps,
                                 double delta,
                                 double *out_epsilon);

/**
 * Smallest noise multiplier realizing at most `target_epsilon`.
 *
 * # Safety
 * `out_sigma` must point to writable memory for one f64.
 */
enum FdktStatus fdkt_calibrate_sigma(double target_epsilon,
                                     double sample_rate,
                                     uint64_t steps,
                                     double delta,
                                     double *out_sigma);

/**
 * Loads a task spec from its JSON sidecar file. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct FdktTask *fdkt_task_load_json(const char *path);

/**
 * # Safety
 * `task` must come from `fdkt_task_load_json` and not be freed twice.
 */
void fdkt_task_free(struct FdktTask *task);

/**
 * Number of labels in the task's label set; 0 for a null handle.
 *
 * # Safety
 * `task` must be a live handle or null.
 */
uintptr_t fdkt_task_label_count(const struct FdktTask *task);

/**
 * Extracts the predicted label from generated text (first in-set integer,
 * then label names). `FdktStatus::Domain` means extraction failure, which
 * evaluation counts as an incorrect prediction.
 *
 * # Safety
 * All pointers must be valid; `out_label` must be writable.
 */
enum FdktStatus fdkt_extract_label(const struct FdktTask *task,
                                   const char *text,
                                   uint32_t *out_label);

/**
 * Loads a JSONL dataset under the given task. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `task` a live handle.
 */
struct FdktDataset *fdkt_dataset_load_jsonl(const char *path, const struct FdktTask *task);

/**
 * # Safety
 * `dataset` must come from this library and not be freed twice.
 */
void fdkt_dataset_free(struct FdktDataset *dataset);

/**
 * # Safety
 * `dataset` must be a live handle or null.
 */
uintptr_t fdkt_dataset_len(const struct FdktDataset *dataset);

/**
 * Copies record `index`'s text; caller frees with `fdkt_string_free`.
 * Returns null when the index is out of range.
 *
 * # Safety
 * `dataset` must be a live handle or null.
 */
char *fdkt_dataset_text(const struct FdktDataset *dataset, uintptr_t index);

/**
 * Reads record `index`'s label.
 *
 * # Safety
 * Pointers must be valid; `out_label` writable.
 */
enum FdktStatus fdkt_dataset_label(const struct FdktDataset *dataset,
                                   uintptr_t index,
                                   uint32_t *out_label);

/**
 * Writes the dataset back out as JSONL.
 *
 * # Safety
 * Pointers must be valid.
 */
enum FdktStatus fdkt_dataset_save_jsonl(const struct FdktDataset *dataset, const char *path);

/**
 * Loads a model checkpoint. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct FdktModel *fdkt_model_load(const char *path);

/**
 * # Safety
 * `model` must come from `fdkt_model_load` and not be freed twice.
 */
void fdkt_model_free(struct FdktModel *model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
uintptr_t fdkt_model_param_count(const struct FdktModel *model);

/**
 * Greedy-decodes a continuation of `prompt`; caller frees the result with
 * `fdkt_string_free`.
 *
 * # Safety
 * Pointers must be valid; `out_text` must be writable.
 */
enum FdktStatus fdkt_model_greedy_decode(const struct FdktModel *model,
                                         const char *prompt,
                                         uintptr_t max_tokens,
                                         char **out_text);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FDKT_H */
