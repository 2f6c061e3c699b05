#ifndef CSD_CSD_H
#define CSD_CSD_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CSD_API __declspec(dllexport)
#else
#define CSD_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum csd_status {
  CSD_OK = 0,
  CSD_ERR_CONTRACT = 1,
  CSD_ERR_DEGENERATE = 2,
  CSD_ERR_CONFIG = 3,
  CSD_ERR_IO = 4,
  CSD_ERR_TRAINING = 5,
  CSD_ERR_CONSTRUCTION = 6,
  CSD_ERR_REMOTE_UNAVAILABLE = 7,
  CSD_ERR_PROTOCOL = 8,
  CSD_ERR_EQUIVALENCE = 9,
  CSD_ERR_INTERNAL = 10,
  CSD_ERR_INVALID_ARGUMENT = 11
} csd_status;

typedef enum csd_mode { CSD_MODE_GREEDY = 0, CSD_MODE_SAMPLING = 1 } csd_mode;

typedef struct csd_model csd_model;
typedef struct csd_generation csd_generation;

CSD_API const char* csd_version(void);
/* Message of the last failed call on this thread; "" when none. */
CSD_API const char* csd_last_error(void);
CSD_API const char* csd_status_name(csd_status status);
/* Releases strings and arrays returned through out-parameters. */
CSD_API void csd_free(void* ptr);

/* ---- models ---- */

typedef struct csd_train_options {
  const char* type;      /* "ngram" (default), "bigram" or "mag" */
  const char* tokenizer; /* "byte" (default) or "word" */
  const char* name;      /* defaults to the type and order, e.g. "ngram3" */
  size_t order;          /* ngram order, default 3 */
  double smoothing;      /* interpolation weight, <= 0 selects the default */
  double cost_weight;    /* < 0 selects the default (table size; 0 for mag) */
  size_t span;           /* mag tokens per call, default 10 */
  const char* match_policy; /* mag: "prompt+generation" (default) or "prompt" */
} csd_train_options;

CSD_API void csd_train_options_init(csd_train_options* options);
CSD_API csd_status csd_model_train(const char* corpus_path, const csd_train_options* options, csd_model** out);
CSD_API csd_status csd_model_load(const char* path, csd_model** out);
CSD_API csd_status csd_model_from_json(const char* json, csd_model** out);
CSD_API csd_status csd_model_connect(const char* base_url, size_t vocab_size, double cost_weight, int timeout_ms,
                                     int retries, const char* name, csd_model** out);
CSD_API csd_status csd_model_save(const csd_model* model, const char* path);
CSD_API void csd_model_free(csd_model* model);

CSD_API size_t csd_model_vocab_size(const csd_model* model);
CSD_API const char* csd_model_name(const csd_model* model);
CSD_API double csd_model_cost_weight(const csd_model* model);

CSD_API csd_status csd_model_tokenize(const csd_model* model, const char* text, int32_t** tokens, size_t* count);
CSD_API csd_status csd_model_detokenize(const csd_model* model, const int32_t* tokens, size_t count, char** text);
/* Writes (count - start + 2) rows of vocab_size probabilities; start is
   1-based. out_len is the capacity of out in doubles. */
CSD_API csd_status csd_model_evaluate(const csd_model* model, const int32_t* tokens, size_t count, size_t start,
                                      double* out, size_t out_len);

/* ---- generation ---- */

typedef struct csd_generate_options {
  csd_mode mode;
  double lenience;        /* internal reviews only; default 1 */
  size_t max_new_tokens;
  uint64_t seed;
  const size_t* k_matrix; /* row-major n x n, n = number of drafts */
  const int32_t* stop_tokens;
  size_t stop_count;
  int allow_inexact_sampling;
} csd_generate_options;

CSD_API void csd_generate_options_init(csd_generate_options* options);
/* Cascade generation; with no drafts the target generates autoregressively. */
CSD_API csd_status csd_generate(const csd_model* target, const csd_model* const* drafts, size_t draft_count,
                                const csd_generate_options* options, const int32_t* prompt, size_t prompt_len,
                                csd_generation** out);
/* Prompt followed by the generated tokens. */
CSD_API size_t csd_generation_tokens(const csd_generation* gen, const int32_t** tokens);
CSD_API size_t csd_generation_prompt_length(const csd_generation* gen);
CSD_API csd_status csd_generation_trace_json(const csd_generation* gen, char** json);
CSD_API void csd_generation_free(csd_generation* gen);

/* ---- experiments ---- */

/* Runs every run spec of a bench config. has_seed = 0 keeps the config's
   master seed. Empty or NULL output paths fall back to the config's report
   paths; summary receives the CSV text. */
CSD_API csd_status csd_bench_run(const char* config_path, int has_seed, uint64_t seed, const char* json_out,
                                 const char* csv_out, char** summary);

CSD_API csd_status csd_analyze(const char* grid_path, int has_seed, uint64_t seed, const char* csv_out, char** table);

typedef struct csd_accept_options {
  size_t k;
  size_t steps;
  csd_mode mode;
  uint64_t seed;
  const char* prompts_path; /* one prompt per line */
  const char* delimiter;    /* prompt cut marker, default " A:" */
  size_t max_prompts;       /* default 100 */
  const char* csv_out;      /* also writes <csv_out>.conditional.csv */
} csd_accept_options;

CSD_API void csd_accept_options_init(csd_accept_options* options);
CSD_API csd_status csd_accept_curve(const csd_model* target, const csd_model* draft, const csd_accept_options* options,
                                    char** csv);

#ifdef __cplusplus
}
#endif

#endif
