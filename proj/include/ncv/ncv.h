#ifndef NCV_H
#define NCV_H

/* C interface to the Neural Concept Verifier core. All functions return a
 * status code; on failure ncv_last_error() carries a message for the calling
 * thread. Strings handed back through char** out-parameters are owned by the
 * caller and released with ncv_string_free(). */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

/* status codes, shared with the CLI exit codes */
#define NCV_OK 0
#define NCV_ERR_CONFIG 1   /* usage or configuration errors */
#define NCV_ERR_RUNTIME 2  /* IO failures, non-finite losses, malformed files */
#define NCV_ERR_CONTRACT 3 /* contract violations (bad shapes, guards, ids) */

const char* ncv_version(void);

/* message for the most recent failure on this thread */
const char* ncv_last_error(void);

void ncv_string_free(char* s);

/* Resolves a config file (NULL for built-in defaults), dot-path overrides of
 * the form "game.gamma=0.25", and an optional seed (negative: keep config)
 * into a canonical config JSON. */
int ncv_config_resolve(const char* config_path_or_null, const char* const* overrides,
                       size_t n_overrides, long long seed_or_negative,
                       char** config_json_out);

/* Generates a synthetic concept dataset (encoding files, JSON sidecar, and a
 * shortcut mutual-information report) under out_dir; *stem_out names the
 * written bundle stem. */
int ncv_generate(const char* config_json, const char* out_dir, char** stem_out);

/* Trains the three-agent game on a dataset bundle and writes checkpoint,
 * training log CSV, metric reports, and a manifest with checksums. */
int ncv_train(const char* config_json, const char* dataset_stem, const char* out_dir,
              char** manifest_json_out);

/* Evaluates a checkpoint on one split ("train" | "val" | "test" | "both");
 * with exhaustive != 0 the report includes the brute-force worst-case
 * soundness (refused when the mask count exceeds the guard). */
int ncv_eval(const char* checkpoint_path, const char* dataset_stem, const char* split,
             int exhaustive, char** report_json_out);

/* Runs the configured experiment grid (clean-ratio or mask-size) and writes
 * per-seed reports plus an aggregated mean-and-std CSV. */
int ncv_sweep(const char* config_json, const char* out_dir);

/* JSON-lines certificates for the given sample ids. Unknown ids are skipped
 * and listed in *warnings_out (NULL when everything resolved). */
int ncv_explain(const char* checkpoint_path, const char* dataset_stem, const char* split,
                const unsigned long long* ids, size_t n_ids, int use_morgana,
                char** jsonl_out, char** warnings_out);

/* ------------------------------------------------------------------------ */
/* opaque handles                                                            */
/* ------------------------------------------------------------------------ */

typedef struct ncv_dataset ncv_dataset;
typedef struct ncv_model ncv_model;

int ncv_dataset_open(const char* stem, ncv_dataset** out);
void ncv_dataset_close(ncv_dataset* d);
/* header facts: kind, classes, widths, split sizes, clean ratio, preset */
int ncv_dataset_info(const ncv_dataset* d, char** json_out);

/* A model handle binds a checkpoint to the dataset it will run on. */
int ncv_model_open(const char* checkpoint_path, const char* dataset_stem, ncv_model** out);
void ncv_model_close(ncv_model* m);
/* One certificate: prover identity, selected units with names, posterior,
 * and the decision (class or reject). */
int ncv_model_infer(const ncv_model* m, const char* split, unsigned long long sample_id,
                    int use_morgana, char** certificate_json_out);

#ifdef __cplusplus
}
#endif

#endif /* NCV_H */
