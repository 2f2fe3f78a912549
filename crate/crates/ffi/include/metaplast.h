/* C interface to the metaplast learned-update-rule engine. */

#ifndef METAPLAST_H
#define METAPLAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum mp_status_t {
  MP_OK = 0,
  MP_ERR_NULL_ARGUMENT = 1,
  MP_ERR_INVALID_UTF8 = 2,
  MP_ERR_INVALID_ARGUMENT = 3,
  MP_ERR_IO = 4,
  MP_ERR_RUNTIME = 5,
  MP_ERR_PANIC = 6,
} mp_status_t;

/**
 * Task families exposed over the ABI.
 */
typedef enum mp_task_kind_t {
  MP_TASK_TWO_MOONS = 0,
  MP_TASK_GLYPHS = 1,
} mp_task_kind_t;

/**
 * Opaque handle to trained or initialized rule parameters.
 */
typedef struct mp_rule_params_t mp_rule_params_t;

/**
 * Summary statistics of one rollout.
 */
typedef struct mp_rollout_summary_t {
  /**
   * Few-shot probe accuracy before any update.
   */
  double accuracy_start;
  /**
   * Few-shot probe accuracy after the final update.
   */
  double accuracy_end;
  /**
   * Meta-objective (lower is better) after the final update.
   */
  double objective_end;
  /**
   * Inner updates applied.
   */
  size_t steps;
} mp_rollout_summary_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message (NUL-terminated) into `buf` of capacity
 * `cap`; returns the full message length excluding the NUL. Safe to call
 * with a null or too-small buffer to query the needed size.
 */
size_t mp_last_error(char *buf, size_t cap);

/**
 * Initialize fresh rule parameters for a named profile ("desk" or "full").
 * Returns null on error; consult mp_last_error.
 */
struct mp_rule_params_t *mp_rule_params_init(const char *profile, uint64_t seed);

/**
 * Load rule parameters from a checkpoint file. Returns null on error.
 */
struct mp_rule_params_t *mp_rule_params_load(const char *path);

/**
 * Save rule parameters to a checkpoint file.
 */
enum mp_status_t mp_rule_params_save(const struct mp_rule_params_t *handle, const char *path);

/**
 * Release a handle. Null is a no-op.
 */
void mp_rule_params_free(struct mp_rule_params_t *handle);

/**
 * Number of learnable tensors in the rule.
 */
size_t mp_rule_params_tensor_count(const struct mp_rule_params_t *handle);

/**
 * Meta-train from scratch with the profile defaults, sequentially, and
 * return the resulting rule. Returns null on error.
 */
struct mp_rule_params_t *mp_meta_train(const char *profile, uint64_t seed, uint64_t meta_steps);

/**
 * Apply the rule to a freshly initialized model on one task and report
 * before/after few-shot accuracy. `hidden_dim` sets the single hidden
 * layer's width.
 */
enum mp_status_t mp_rollout(const struct mp_rule_params_t *handle,
                            enum mp_task_kind_t task_kind,
                            uint64_t task_seed,
                            size_t hidden_dim,
                            size_t steps,
                            uint64_t seed,
                            struct mp_rollout_summary_t *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAPLAST_H */
