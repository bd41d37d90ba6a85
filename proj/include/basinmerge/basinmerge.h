#ifndef BASINMERGE_H
#define BASINMERGE_H

/* C interface to the basinmerge model-merging toolkit.
 *
 * Every function returns a bm_status. On failure, bm_last_error() returns a
 * message for the calling thread, valid until its next failing call. Output
 * handles are written only on success and are owned by the caller; release
 * them with the matching *_free function. Strings returned through char**
 * are released with bm_string_free. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define BM_API __declspec(dllexport)
#else
#define BM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bm_status {
  BM_OK = 0,
  BM_ERR_FORMAT = 1,
  BM_ERR_SIZE = 2,
  BM_ERR_VALIDATION = 3,
  BM_ERR_IO = 4,
  BM_ERR_DOMAIN = 5,
  BM_ERR_SHAPE = 6,
  BM_ERR_COMPATIBILITY = 7,
  BM_ERR_DIVERGENCE = 8,
  BM_ERR_UNDEFINED_METRIC = 9,
  BM_ERR_INVALID_ARGUMENT = 10,
  BM_ERR_INTERNAL = 11
} bm_status;

typedef enum bm_buffer_policy {
  BM_BUFFERS_GAUSSIAN = 0,
  BM_BUFFERS_KEEP_FIRST = 1,
  BM_BUFFERS_AVERAGE = 2
} bm_buffer_policy;

typedef struct bm_checkpoint bm_checkpoint;
typedef struct bm_arch bm_arch;
typedef struct bm_dataset bm_dataset;
typedef struct bm_perms bm_perms;
typedef struct bm_sweep bm_sweep;
typedef struct bm_scenario bm_scenario;

BM_API const char* bm_version(void);
BM_API const char* bm_status_name(bm_status status);
BM_API const char* bm_last_error(void);
BM_API void bm_string_free(char* s);
BM_API void bm_bytes_free(uint8_t* bytes);

BM_API bm_status bm_parse_buffer_policy(const char* name, bm_buffer_policy* out);

/* checkpoints */
BM_API bm_status bm_checkpoint_load(const char* path, bm_checkpoint** out);
BM_API bm_status bm_checkpoint_parse(const uint8_t* bytes, size_t len, bm_checkpoint** out);
BM_API bm_status bm_checkpoint_save(const bm_checkpoint* ckpt, const char* path);
BM_API bm_status bm_checkpoint_serialize(const bm_checkpoint* ckpt, uint8_t** bytes, size_t* len);
BM_API bm_status bm_checkpoint_clone(const bm_checkpoint* ckpt, bm_checkpoint** out);
BM_API bm_status bm_checkpoint_equal(const bm_checkpoint* a, const bm_checkpoint* b, int* equal);
BM_API bm_status bm_checkpoint_inspect(const bm_checkpoint* ckpt, char** json);
BM_API bm_status bm_checkpoint_meta(const bm_checkpoint* ckpt, const char* key, char** value);
BM_API void bm_checkpoint_free(bm_checkpoint* ckpt);

/* *compatible is set and *report_json filled even when the inputs differ. */
BM_API bm_status bm_validate_compatibility(const bm_checkpoint* a, const bm_checkpoint* b,
                                           int* compatible, char** report_json);

/* merging; lambda weights the first checkpoint */
BM_API bm_status bm_interpolate(const bm_checkpoint* a, const bm_checkpoint* b, double lambda,
                                bm_buffer_policy buffers, bm_checkpoint** out);
BM_API bm_status bm_weighted_merge(const bm_checkpoint* const* inputs, const double* weights,
                                   size_t n, bm_buffer_policy buffers, bm_checkpoint** out);
/* weights may be NULL (equal weights). outs must hold n handles. */
BM_API bm_status bm_prefix_merge(const bm_checkpoint* const* inputs, size_t n,
                                 const char* const* prefixes, size_t n_prefixes,
                                 const double* weights, bm_buffer_policy buffers,
                                 bm_checkpoint** outs);

/* architectures */
BM_API bm_status bm_arch_load(const char* path, bm_arch** out);
BM_API bm_status bm_arch_from_json(const char* json, bm_arch** out);
BM_API bm_status bm_arch_to_json(const bm_arch* arch, char** json);
BM_API void bm_arch_free(bm_arch* arch);

/* permutation alignment; report_json may be NULL */
BM_API bm_status bm_weight_matching(const bm_checkpoint* ref, const bm_checkpoint* target,
                                    const bm_arch* arch, int max_sweeps, bm_perms** out,
                                    char** report_json);
BM_API bm_status bm_apply_permutations(const bm_checkpoint* ckpt, const bm_perms* perms,
                                       const bm_arch* arch, bm_checkpoint** out);
/* perms_out may be NULL */
BM_API bm_status bm_align_and_merge(const bm_checkpoint* ref, const bm_checkpoint* target,
                                    const bm_arch* arch, double lambda, bm_buffer_policy buffers,
                                    int max_sweeps, bm_checkpoint** out, bm_perms** perms_out);
BM_API bm_status bm_perms_to_json(const bm_perms* perms, char** json);
BM_API bm_status bm_perms_from_json(const char* json, bm_perms** out);
BM_API bm_status bm_perms_is_identity(const bm_perms* perms, int* identity);
BM_API void bm_perms_free(bm_perms* perms);

/* datasets and evaluation; miou may be NULL */
BM_API bm_status bm_dataset_load(const char* path, bm_dataset** out);
BM_API void bm_dataset_free(bm_dataset* data);
BM_API bm_status bm_evaluate(const bm_arch* arch, const bm_checkpoint* ckpt,
                             const bm_dataset* data, double* accuracy, double* miou);

/* interpolation sweeps */
BM_API bm_status bm_sweep_run(const bm_checkpoint* a, const bm_checkpoint* b,
                              const char* const* tags, const bm_dataset* const* data,
                              size_t n_domains, const bm_arch* arch, int steps,
                              bm_buffer_policy buffers, int threads, bm_sweep** out);
/* domains_json: {"domains":[{"tag":..,"data":path}, ...]} with paths relative to it */
BM_API bm_status bm_sweep_run_file(const bm_checkpoint* a, const bm_checkpoint* b,
                                   const char* domains_json, const bm_arch* arch, int steps,
                                   bm_buffer_policy buffers, int threads, bm_sweep** out);
BM_API bm_status bm_sweep_barrier(const bm_sweep* sweep, double* barrier);
BM_API bm_status bm_sweep_to_json(const bm_sweep* sweep, char** json);
BM_API bm_status bm_sweep_to_csv(const bm_sweep* sweep, char** csv);
BM_API void bm_sweep_free(bm_sweep* sweep);

/* seeded scenarios */
BM_API bm_status bm_scenario_run(const char* name, const uint64_t* seeds, size_t n_seeds,
                                 int threads, int keep_artifacts, bm_scenario** out);
BM_API bm_status bm_scenario_to_json(const bm_scenario* scenario, char** json);
BM_API bm_status bm_scenario_write(const bm_scenario* scenario, const char* dir);
/* median/min/max of a per-seed value such as "barrier"; any output may be NULL */
BM_API bm_status bm_scenario_summary(const bm_scenario* scenario, const char* key,
                                     double* median, double* min, double* max);
BM_API void bm_scenario_free(bm_scenario* scenario);

/* metrics */
BM_API bm_status bm_harmonic_mean(const double* values, size_t n, double* out);

#ifdef __cplusplus
}
#endif

#endif
