#ifndef GRANUSIM_H
#define GRANUSIM_H

/* Generated by cbindgen from the granusim-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum {
  GS_STATUS_OK = 0,
  GS_STATUS_NULL_ARGUMENT = 1,
  GS_STATUS_INVALID_ARGUMENT = 2,
  GS_STATUS_CONFIG_ERROR = 3,
  GS_STATUS_CONTRACT_VIOLATION = 4,
  GS_STATUS_DIVERGED = 5,
  GS_STATUS_IO_ERROR = 6,
  GS_STATUS_UTF8_ERROR = 7,
  GS_STATUS_INTERNAL_ERROR = 8,
} GsStatus;

/**
 * Opaque dictionary handle.
 */
typedef struct GsDictionary GsDictionary;

/**
 * Opaque network handle.
 */
typedef struct GsNetwork GsNetwork;

/**
 * Opaque hyperparameter handle.
 */
typedef struct GsParams GsParams;

/**
 * Training options mirrored over the ABI.
 */
typedef struct {
  /**
   * 0 = coarse, 1 = fine
   */
  uint32_t regime;
  uint64_t max_steps;
  double eta;
  /**
   * 0 = plain decay, 1 = clipped decay
   */
  uint32_t bias_rule;
  uint64_t log_every;
  double loss_floor;
  uint64_t seed;
  uint64_t diag_per_subclass;
} GsTrainOptions;

/**
 * Hard-example audit result.
 */
typedef struct {
  double normal_mean_f_y;
  double normal_accuracy;
  double hard_mean_f_y;
  double hard_accuracy;
  double hard_vs_normal_ratio;
} GsAudit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static C string.
 */
const char *gs_version(void);

/**
 * Copies the last error message of this thread into `buf` (always
 * NUL-terminated when `len > 0`); returns the full message length.
 */
size_t gs_last_error(char *buf, size_t len);

/**
 * Workstation-scale preset.
 */
GsStatus gs_params_desk(GsParams **out);

/**
 * Asymptotic preset at the given ambient dimension.
 */
GsStatus gs_params_paper_asymptotic(uint64_t d, GsParams **out);

void gs_params_free(GsParams *p);

/**
 * Sets one hyperparameter by name. Integer fields reject fractional values.
 */
GsStatus gs_params_set(GsParams *p, const char *key, double value);

/**
 * Reads one hyperparameter by name.
 */
GsStatus gs_params_get(const GsParams *p, const char *key, double *out);

/**
 * Validates the full parameter set.
 */
GsStatus gs_params_validate(const GsParams *p);

/**
 * Builds the orthonormal dictionary. mode: 0 = standard basis,
 * 1 = random orthogonal.
 */
GsStatus gs_dictionary_build(const GsParams *params,
                             uint32_t mode,
                             uint64_t seed,
                             GsDictionary **out);

void gs_dictionary_free(GsDictionary *d);

/**
 * Max absolute Gram-matrix deviation from the identity.
 */
GsStatus gs_dictionary_gram_max_dev(const GsDictionary *d, double *out);

GsStatus gs_dictionary_save(const GsDictionary *d, const char *path);

GsStatus gs_dictionary_load(const char *path, GsDictionary **out);

/**
 * Initializes a network. variant: 0 = coarse, 1 = fine.
 */
GsStatus gs_network_init(const GsParams *params, uint32_t variant, uint64_t seed, GsNetwork **out);

void gs_network_free(GsNetwork *n);

GsStatus gs_network_n_heads(const GsNetwork *n, uint64_t *out);

/**
 * Forward pass on a row-major p x d patch matrix; writes one response per
 * head into `responses` (length `n_heads`).
 */
GsStatus gs_network_forward(const GsNetwork *net,
                            const double *patches,
                            uint64_t p,
                            uint64_t d,
                            double *responses,
                            uint64_t n_heads);

GsStatus gs_network_save(const GsNetwork *n, const char *path);

GsStatus gs_network_load(const char *path, GsNetwork **out);

/**
 * Runs online SGD; optionally streams the history as JSON lines to
 * `history_path` (pass NULL to skip). Returns the trained network.
 */
GsStatus gs_train_run(const GsParams *params,
                      const GsDictionary *dict,
                      const GsTrainOptions *options,
                      const char *history_path,
                      GsNetwork **out);

/**
 * Evaluates fresh normal and hard sets with the trained network
 * (fine-variant responses are aggregated to the coarse heads first).
 */
GsStatus gs_hard_example_audit(const GsNetwork *net,
                               const GsDictionary *dict,
                               const GsParams *params,
                               uint64_t n_eval_per_subclass,
                               uint64_t seed,
                               GsAudit *out);

/**
 * Draws one sample (kind: 0 = normal, 1 = hard) into a row-major p x d
 * buffer; `coarse_label_out` receives +1/-1.
 */
GsStatus gs_sample_example(const GsDictionary *dict,
                           const GsParams *params,
                           int32_t sign,
                           uint64_t subclass,
                           uint32_t kind,
                           uint64_t stream_seed,
                           double *patches_out,
                           uint64_t buf_len,
                           int32_t *coarse_label_out);

/**
 * Lloyd k-means with deterministic seeding over a row-major n x dim matrix;
 * writes one cluster id per row.
 */
GsStatus gs_kmeans(const double *data,
                   uint64_t n,
                   uint64_t dim,
                   uint64_t k,
                   uint64_t seed,
                   uint64_t max_iters,
                   uint64_t *assignments,
                   double *inertia);

/**
 * Traces a leaf to its level-k ancestor in a child<TAB>parent edge-list
 * file, clamping at the root; copies the label into `out`.
 */
GsStatus gs_level_k_label(const char *edges_path,
                          const char *leaf,
                          uint64_t level,
                          char *out,
                          size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRANUSIM_H */
