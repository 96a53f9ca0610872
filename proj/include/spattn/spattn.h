/* C interface to the sparse-attention training library.
 *
 * Every function returns a spattn_status. On failure the message of the most
 * recent error on the calling thread is available from spattn_last_error().
 * Handles are opaque; release each with its matching _free function. Strings
 * returned through char** are owned by the caller and released with
 * spattn_string_free.
 */
#ifndef SPATTN_H
#define SPATTN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SPATTN_API __declspec(dllexport)
#else
#define SPATTN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum spattn_status {
  SPATTN_OK = 0,
  SPATTN_ERR_INTERNAL = 1,
  SPATTN_ERR_CONFIG = 2,
  SPATTN_ERR_DIVERGENCE = 3,
  SPATTN_ERR_CHECK = 4,
  SPATTN_ERR_IO = 5,
  SPATTN_ERR_RANGE = 6,
  SPATTN_ERR_DIMENSION = 7,
  SPATTN_ERR_CONTRACT = 8,
  SPATTN_ERR_ARGUMENT = 9
} spattn_status;

typedef struct spattn_config spattn_config;
typedef struct spattn_model spattn_model;
typedef struct spattn_eval_result spattn_eval_result;
typedef struct spattn_gradcheck_report spattn_gradcheck_report;

/* Per-step progress. theta and active_frac hold `layers` entries (theta is
 * NULL unless pruning is differentiable); has_eval is nonzero on evaluation
 * steps. */
typedef struct spattn_step_info {
  size_t step;
  int phase;
  double task_loss;
  double sp_loss; /* NaN when not computed */
  size_t layers;
  const double* theta;
  const double* active_frac;
  int has_eval;
  double eval_in;
  double eval_ood;
} spattn_step_info;

typedef void (*spattn_step_callback)(const spattn_step_info* info, void* user);

SPATTN_API const char* spattn_last_error(void);
SPATTN_API const char* spattn_version(void);
SPATTN_API void spattn_string_free(char* s);

/* ---- configuration ---- */
SPATTN_API spattn_status spattn_config_load(const char* path, spattn_config** out);
SPATTN_API spattn_status spattn_config_parse(const char* json, spattn_config** out);
SPATTN_API spattn_status spattn_config_to_json(const spattn_config* config, char** out);
SPATTN_API spattn_status spattn_config_output_dir(const spattn_config* config, char** out);
SPATTN_API void spattn_config_free(spattn_config* config);

/* ---- training ----
 * Writes metrics.csv, final.ckpt and (differentiable pruning only)
 * thresholds.txt into the configured output directory, creating it if
 * needed. On divergence the metrics written so far are kept, the parameters
 * from the last finite step are saved as last.ckpt and
 * SPATTN_ERR_DIVERGENCE is returned. */
SPATTN_API spattn_status spattn_train(const spattn_config* config, spattn_step_callback callback, void* user);

/* ---- checkpoints ---- */
SPATTN_API spattn_status spattn_model_load(const char* checkpoint_path, spattn_model** out);
SPATTN_API spattn_status spattn_model_thresholds(const spattn_model* model, double* out, size_t capacity,
                                                 size_t* count);
SPATTN_API void spattn_model_free(spattn_model* model);

/* ---- evaluation ----
 * split is "in" or "ood". The dataset is regenerated from the data section
 * of `config`; its model section, prune mode and prune scope must match the
 * checkpoint (SPATTN_ERR_CONFIG otherwise). */
SPATTN_API spattn_status spattn_eval(const spattn_model* model, const spattn_config* config, const char* split,
                                     spattn_eval_result** out);
SPATTN_API double spattn_eval_loss(const spattn_eval_result* result);
SPATTN_API size_t spattn_eval_layers(const spattn_eval_result* result);
SPATTN_API double spattn_eval_active_frac(const spattn_eval_result* result, size_t layer);
/* Header line plus one data row. */
SPATTN_API spattn_status spattn_eval_csv(const spattn_eval_result* result, char** out);
SPATTN_API void spattn_eval_result_free(spattn_eval_result* result);

/* ---- mask export ----
 * Writes layer{l}_head{h}.pgm and layer{l}_head{h}_mask.csv (1-based) for
 * every decoder layer and head of sequence `sample` of the given split. */
SPATTN_API spattn_status spattn_export_masks(const spattn_model* model, const spattn_config* config,
                                             const char* split, size_t sample, const char* out_dir);

/* ---- gradient check ----
 * inject_fault != 0 swaps in a sigmoid with a wrong backward rule. */
SPATTN_API spattn_status spattn_gradcheck(uint64_t seed, int inject_fault, spattn_gradcheck_report** out);
SPATTN_API size_t spattn_gradcheck_count(const spattn_gradcheck_report* report);
SPATTN_API const char* spattn_gradcheck_name(const spattn_gradcheck_report* report, size_t i);
SPATTN_API double spattn_gradcheck_error(const spattn_gradcheck_report* report, size_t i);
SPATTN_API double spattn_gradcheck_tolerance(const spattn_gradcheck_report* report, size_t i);
SPATTN_API int spattn_gradcheck_passed(const spattn_gradcheck_report* report);
SPATTN_API void spattn_gradcheck_report_free(spattn_gradcheck_report* report);

#ifdef __cplusplus
}
#endif

#endif /* SPATTN_H */
