#ifndef MMREL_H
#define MMREL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum MmrelStatus {
  MMREL_STATUS_OK = 0,
  MMREL_STATUS_NULL_POINTER = 1,
  MMREL_STATUS_INVALID_ARGUMENT = 2,
  MMREL_STATUS_MISSING_INPUT = 3,
  MMREL_STATUS_DATA_ERROR = 4,
  MMREL_STATUS_CONFIG_ERROR = 5,
  MMREL_STATUS_IO_ERROR = 6,
  MMREL_STATUS_PANIC = 7,
} MmrelStatus;

/*
 A loaded, validated corpus.
 */
typedef struct MmrelCorpus MmrelCorpus;

/*
 A trained model with the encoder and frame cache it predicts with.
 */
typedef struct MmrelPredictor MmrelPredictor;

/*
 Precision, recall and F1 of one relation type, with raw counts.
 */
typedef struct MmrelPrf {
  size_t true_positives;
  size_t predicted;
  size_t gold;
  double precision;
  double recall;
  double f1;
} MmrelPrf;

/*
 Message of the last failed call on this thread; empty after a success.
 The pointer stays valid until the next call on this thread.
 */
const char *mmrel_last_error(void);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must come from this library and not have been freed.
 */
void mmrel_string_free(char *s);

/*
 Scaled cosine similarity of two `dim`-long vectors.

 # Safety
 `a` and `b` must point to `dim` doubles; `out` to one double.
 */
enum MmrelStatus mmrel_similarity(const double *a,
                                  const double *b,
                                  size_t dim,
                                  double scale,
                                  double *out);

/*
 Event-focused attention weights over `len` tokens centred on `k`.

 # Safety
 `out` must have room for `len` doubles.
 */
enum MmrelStatus mmrel_attention_weights(size_t len, size_t k, double p, double *out);

/*
 Inverse-frequency class weights for counts in Hierarchical, Identical, NoRel order.

 # Safety
 `counts` and `out` must each point to three elements.
 */
enum MmrelStatus mmrel_class_weights(const size_t *counts, double *out);

/*
 P/R/F1 for `label` over `n` aligned pairs. Label codes: 0 Hierarchical, 1 Identical, 2 NoRel.

 # Safety
 `gold` and `pred` must point to `n` bytes; `out` to one [`MmrelPrf`].
 */
enum MmrelStatus mmrel_relation_prf(const uint8_t *gold,
                                    const uint8_t *pred,
                                    size_t n,
                                    uint8_t label,
                                    struct MmrelPrf *out);

/*
 Loads and validates a corpus file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MmrelStatus mmrel_corpus_open(const char *path, struct MmrelCorpus **out);

/*
 Number of documents; 0 for null.

 # Safety
 `corpus` must be null or a live handle.
 */
size_t mmrel_corpus_len(const struct MmrelCorpus *corpus);

/*
 Id of document `index`, as a new string.

 # Safety
 `corpus` must be a live handle; `out` must be writable.
 */
enum MmrelStatus mmrel_corpus_doc_id(const struct MmrelCorpus *corpus, size_t index, char **out);

/*
 # Safety
 `corpus` must be null or a handle from [`mmrel_corpus_open`] that has not been freed.
 */
void mmrel_corpus_free(struct MmrelCorpus *corpus);

/*
 Loads the model, encoder and frame cache named by a pipeline config file.

 # Safety
 `config_path` must be a NUL-terminated string; `out` must be writable.
 */
enum MmrelStatus mmrel_predictor_open(const char *config_path, struct MmrelPredictor **out);

/*
 Predicts relations for document `index` of `corpus` and returns them as a
 JSON array of relation records.

 # Safety
 `predictor` and `corpus` must be live handles; `json_out` must be writable.
 */
enum MmrelStatus mmrel_predictor_predict(const struct MmrelPredictor *predictor,
                                         const struct MmrelCorpus *corpus,
                                         size_t index,
                                         char **json_out);

/*
 # Safety
 `predictor` must be null or a handle from [`mmrel_predictor_open`] that has not been freed.
 */
void mmrel_predictor_free(struct MmrelPredictor *predictor);

/*
 Null-terminated version string.
 */
const char *mmrel_version(void);

#endif  /* MMREL_H */
