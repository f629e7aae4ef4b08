/* C interface for the relcrp topic-model library.
 *
 * Every fallible call returns a status code; on failure the thread-local
 * message from relcrp_last_error() describes what went wrong. Handles are
 * opaque and must be released with the matching *_free function.
 */

#ifndef RELCRP_H
#define RELCRP_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define RELCRP_OK 0
#define RELCRP_ERR_RUNTIME 1
#define RELCRP_ERR_CONFIG 2
#define RELCRP_ERR_NULL 3
#define RELCRP_ERR_UTF8 4
#define RELCRP_ERR_PANIC 5

typedef struct RelcrpCorpus RelcrpCorpus;
typedef struct RelcrpModel RelcrpModel;

/* Copies the calling thread's last error message into buf (NUL
 * terminated, truncated to len; buf may be NULL to query). Returns the
 * full message length excluding the terminator. */
size_t relcrp_last_error(char *buf, size_t len);

/* Loads a TSV/JSONL post stream and user table. epoch_length is in
 * seconds. On success *out owns the corpus. */
int32_t relcrp_corpus_load(const char *posts_path, const char *users_path,
                           int64_t epoch_length, RelcrpCorpus **out);

/* Number of posts, or 0 for NULL. */
uint64_t relcrp_corpus_posts(const RelcrpCorpus *corpus);

void relcrp_corpus_free(RelcrpCorpus *corpus);

/* Fits a model. config_json is a JSON object; all fields optional:
 *   {"hyper": {...}, "mode": "sequential"|"parallel",
 *    "batch": n, "sweeps": n, "workers": n, "seed": n}
 * On success *out owns the fitted model. */
int32_t relcrp_fit(const RelcrpCorpus *corpus, const char *config_json,
                   RelcrpModel **out);

/* JSON checkpoint round-trip. */
int32_t relcrp_model_save(const RelcrpModel *model, const char *path);
int32_t relcrp_model_load(const char *path, RelcrpModel **out);

/* Number of live topics, or 0 for NULL. */
uint64_t relcrp_model_num_topics(const RelcrpModel *model);

void relcrp_model_free(RelcrpModel *model);

/* Held-out perplexity of heldout_path under model, mapping tokens through
 * the training corpus vocabulary. Result written to *out. */
int32_t relcrp_perplexity(const RelcrpModel *model, const RelcrpCorpus *corpus,
                          const char *heldout_path, double *out);

#ifdef __cplusplus
}
#endif

#endif /* RELCRP_H */
