#ifndef METAST_H
#define METAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MetastStatus {
  METAST_STATUS_OK = 0,
  METAST_STATUS_NULL_ARGUMENT = 1,
  METAST_STATUS_INVALID_UTF8 = 2,
  METAST_STATUS_BUFFER_TOO_SMALL = 3,
  METAST_STATUS_IO = 4,
  METAST_STATUS_PARSE = 5,
  METAST_STATUS_CONFIG = 6,
  METAST_STATUS_SHAPE = 7,
  METAST_STATUS_CONTRACT = 8,
  METAST_STATUS_NON_FINITE = 9,
  METAST_STATUS_CHECKPOINT = 10,
  METAST_STATUS_OUT_OF_RANGE = 11,
  METAST_STATUS_FAILED = 12,
  METAST_STATUS_PANIC = 13,
} MetastStatus;

/**
 * Trained model handle (parameters plus architecture).
 */
typedef struct MetastModel MetastModel;

/**
 * Vocabulary handle.
 */
typedef struct MetastVocab MetastVocab;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next metast call on the same thread.
 */
const char *metast_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *metast_version(void);

/**
 * Builds a universal vocabulary from `n` corpus strings.
 *
 * # Safety
 * `corpus` must point to `n` valid NUL-terminated strings; `out` must be
 * writable.
 */
enum MetastStatus metast_vocab_build(const char *const *corpus, size_t n, struct MetastVocab **out);

/**
 * Loads a vocabulary file written by `metast_vocab_save` or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MetastStatus metast_vocab_load(const char *path, struct MetastVocab **out);

/**
 * # Safety
 * `vocab` must come from this library; `path` must be NUL-terminated.
 */
enum MetastStatus metast_vocab_save(const struct MetastVocab *vocab, const char *path);

/**
 * Number of ids, specials included; 0 for NULL.
 *
 * # Safety
 * `vocab` must be NULL or come from this library.
 */
size_t metast_vocab_len(const struct MetastVocab *vocab);

/**
 * # Safety
 * `vocab` must be NULL or come from this library and not be used again.
 */
void metast_vocab_free(struct MetastVocab *vocab);

/**
 * Encodes `text`; with `wrap` the ids are framed by BOS/EOS.
 *
 * # Safety
 * Pointers must be valid; `out` must hold `cap` ids.
 */
enum MetastStatus metast_vocab_encode(const struct MetastVocab *vocab,
                                      const char *text,
                                      bool wrap,
                                      size_t *out,
                                      size_t cap,
                                      size_t *out_len);

/**
 * Decodes `n` ids into a NUL-terminated string.
 *
 * # Safety
 * `ids` must hold `n` values; `out` must hold `cap` bytes.
 */
enum MetastStatus metast_vocab_decode(const struct MetastVocab *vocab,
                                      const size_t *ids,
                                      size_t n,
                                      char *out,
                                      size_t cap,
                                      size_t *out_len);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be NUL-terminated; `out` must be writable.
 */
enum MetastStatus metast_model_load(const char *dir, struct MetastModel **out);

/**
 * Scalar parameter count; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
size_t metast_model_num_params(const struct MetastModel *model);

/**
 * # Safety
 * `model` must be NULL or come from this library and not be used again.
 */
void metast_model_free(struct MetastModel *model);

/**
 * Greedy decode of a token sequence (no BOS/EOS in input or output).
 *
 * # Safety
 * `ids` must hold `n` values; `out` must hold `cap` ids.
 */
enum MetastStatus metast_model_translate_tokens(const struct MetastModel *model,
                                                const size_t *ids,
                                                size_t n,
                                                size_t max_len,
                                                size_t *out,
                                                size_t cap,
                                                size_t *out_len);

/**
 * Greedy decode of a row-major `frames × dim` feature matrix.
 *
 * # Safety
 * `data` must hold `frames * dim` floats; `out` must hold `cap` ids.
 */
enum MetastStatus metast_model_translate_frames(const struct MetastModel *model,
                                                const float *data,
                                                size_t frames,
                                                size_t dim,
                                                size_t max_len,
                                                size_t *out,
                                                size_t cap,
                                                size_t *out_len);

/**
 * Corpus BLEU-4 (0..100) of `n` hypothesis/reference pairs.
 *
 * # Safety
 * `hyps` and `refs` must each point to `n` NUL-terminated strings.
 */
enum MetastStatus metast_bleu(const char *const *hyps,
                              const char *const *refs,
                              size_t n,
                              double *out);

/**
 * Corpus word error rate of `n` hypothesis/reference pairs.
 *
 * # Safety
 * `hyps` and `refs` must each point to `n` NUL-terminated strings.
 */
enum MetastStatus metast_wer(const char *const *hyps,
                             const char *const *refs,
                             size_t n,
                             double *out);

/**
 * Runs the experiment described by a TOML config file and writes its
 * artifacts; same as `metast run`.
 *
 * # Safety
 * `config_path` must be NUL-terminated.
 */
enum MetastStatus metast_run_experiment(const char *config_path);

/**
 * Finite-difference check of every primitive (`trials` inputs each) and
 * of the model loss; writes the worst relative error.
 *
 * # Safety
 * `out_max_error` must be writable.
 */
enum MetastStatus metast_gradcheck(size_t trials, uint64_t seed, double *out_max_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAST_H */
