#ifndef CODEPRED_H
#define CODEPRED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CpStatus {
    CP_STATUS_OK = 0,
    CP_STATUS_NULL_POINTER = 1,
    CP_STATUS_INVALID_UTF8 = 2,
    CP_STATUS_PARSE_ERROR = 3,
    CP_STATUS_INVALID_INPUT = 4,
    CP_STATUS_IO_ERROR = 5,
    CP_STATUS_CHECKPOINT_ERROR = 6,
    CP_STATUS_KIND_MISMATCH = 7,
    CP_STATUS_PANIC = 8,
} CpStatus;

/**
 * Opaque handle to a loaded model and its vocabulary.
 */
typedef struct CpModel CpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *cp_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must be NULL or a pointer obtained from this library, freed once.
 */
void cp_string_free(char *s);

/**
 * Normalizes one JSON AST (one line of a py150-style corpus) and writes the
 * normalized tree's JSON to `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CpStatus cp_normalize_ast_json(const char *json, char **out);

/**
 * MRR@10 percentage of `n` 1-based ranks; ranks outside 1..=10 are misses.
 *
 * # Safety
 * `ranks` must point to `n` readable values and `out` must be valid.
 */
enum CpStatus cp_compute_mrr(const int64_t *ranks, size_t n, double *out);

/**
 * Loads a checkpoint and the vocabulary it was trained with.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` a valid pointer.
 */
enum CpStatus cp_model_load(const char *checkpoint_path,
                            const char *vocab_path,
                            struct CpModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`cp_model_load`], freed once.
 */
void cp_model_free(struct CpModel *model);

/**
 * Number of vocabulary entries of a loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum CpStatus cp_model_vocab_size(const struct CpModel *model, size_t *out);

/**
 * Predicts the token following the serialized tree. Writes a JSON array of
 * the `k` most likely `{"token", "namespace", "prob"}` objects to `*out`.
 *
 * # Safety
 * `model` must be a live handle, `tree_json` NUL-terminated, `out` valid.
 */
enum CpStatus cp_model_predict_next(const struct CpModel *model,
                                    const char *tree_json,
                                    size_t k,
                                    char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODEPRED_H */
