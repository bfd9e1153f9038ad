#ifndef PHASEPLAN_H
#define PHASEPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PhaseplanMode {
  // All phases in one problem.
  PHASEPLAN_MODE_JOINT = 0,
  // Phase by phase, stopping at every boundary.
  PHASEPLAN_MODE_BASELINE = 1,
} PhaseplanMode;

// Result code of a fallible call.
typedef enum PhaseplanError {
  PHASEPLAN_ERROR_OK = 0,
  PHASEPLAN_ERROR_NULL_ARGUMENT = 1,
  PHASEPLAN_ERROR_INVALID_UTF8 = 2,
  // Chain or task text could not be parsed.
  PHASEPLAN_ERROR_PARSE = 3,
  // Option values out of range.
  PHASEPLAN_ERROR_INVALID_OPTION = 4,
  // Transcription or a baseline phase failed; no plan was produced.
  PHASEPLAN_ERROR_PLAN = 5,
  PHASEPLAN_ERROR_INDEX_OUT_OF_RANGE = 6,
  // A bug inside the library; the call had no effect.
  PHASEPLAN_ERROR_INTERNAL = 7,
} PhaseplanError;

// Solver outcome of a plan.
typedef enum PhaseplanStatus {
  PHASEPLAN_STATUS_OPTIMAL = 0,
  PHASEPLAN_STATUS_MAX_ITERATIONS = 1,
  PHASEPLAN_STATUS_INFEASIBLE = 2,
  PHASEPLAN_STATUS_NUMERICAL_FAILURE = 3,
} PhaseplanStatus;

// Opaque plan handle.
typedef struct PhaseplanPlan PhaseplanPlan;

// Planning options. Start from [`phaseplan_options_default`].
typedef struct PhaseplanOptions {
  enum PhaseplanMode mode;
  // Steps per phase, at least 2.
  uint32_t steps;
  double w_vel;
  double w_acc;
  // Minimum phase duration in seconds.
  double min_phase_duration;
  double constraint_tol;
  uint32_t max_iterations;
  // Wall-clock budget in seconds; zero or negative for none.
  double time_limit;
} PhaseplanOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or an empty string. The
// pointer stays valid until the next failing call on this thread.
const char *phaseplan_last_error(void);

// Library version as a static NUL-terminated string.
const char *phaseplan_version(void);

struct PhaseplanOptions phaseplan_options_default(void);

// Plans the task in `task_text` for the chain in `chain_text`. `options`
// may be null for defaults. On success `*out` owns a new plan, which is
// produced even when the solver stops short; check its status.
//
// # Safety
// Text arguments must be null or NUL-terminated strings, `options` null or
// valid, and `out` a valid pointer to write to.
enum PhaseplanError phaseplan_plan(const char *chain_text,
                                   const char *task_text,
                                   const struct PhaseplanOptions *options,
                                   struct PhaseplanPlan **out);

// Releases a plan. Null is ignored.
//
// # Safety
// `plan` must be null or come from [`phaseplan_plan`] and not be used again.
void phaseplan_plan_free(struct PhaseplanPlan *plan);

// # Safety
// `plan` must be null or a live plan; `status` a valid pointer.
enum PhaseplanError phaseplan_plan_status(const struct PhaseplanPlan *plan,
                                          enum PhaseplanStatus *status);

// Total duration in seconds, or NaN for a null plan.
//
// # Safety
// `plan` must be null or a live plan.
double phaseplan_plan_duration(const struct PhaseplanPlan *plan);

// Worst constraint violation of the plan, or NaN for a null plan.
//
// # Safety
// `plan` must be null or a live plan.
double phaseplan_plan_max_violation(const struct PhaseplanPlan *plan);

// Degrees of freedom, or 0 for a null plan.
//
// # Safety
// `plan` must be null or a live plan.
size_t phaseplan_plan_dof(const struct PhaseplanPlan *plan);

// Solver iterations, summed over phases for the baseline; 0 for a null
// plan.
//
// # Safety
// `plan` must be null or a live plan.
size_t phaseplan_plan_iterations(const struct PhaseplanPlan *plan);

// Number of trajectory nodes, or 0 for a null plan.
//
// # Safety
// `plan` must be null or a live plan.
size_t phaseplan_plan_node_count(const struct PhaseplanPlan *plan);

// Number of phases, or 0 for a null plan.
//
// # Safety
// `plan` must be null or a live plan.
size_t phaseplan_plan_phase_count(const struct PhaseplanPlan *plan);

// Copies the end time of every phase into `out`, which holds `len` values.
//
// # Safety
// `plan` must be null or a live plan; `out` valid for `len` writes.
enum PhaseplanError phaseplan_plan_phase_end_times(const struct PhaseplanPlan *plan,
                                                   double *out,
                                                   size_t len);

// Time, positions and velocities of node `k`. `q` and `dq` must each hold
// [`phaseplan_plan_dof`] values; either may be null to skip it.
//
// # Safety
// `plan` must be null or a live plan; non-null buffers must be valid for
// the writes described above.
enum PhaseplanError phaseplan_plan_node(const struct PhaseplanPlan *plan,
                                        size_t k,
                                        double *t,
                                        double *q,
                                        double *dq);

// Summary of the plan as JSON, or null on failure. Release with
// [`phaseplan_string_free`].
//
// # Safety
// `plan` must be null or a live plan.
char *phaseplan_plan_summary_json(const struct PhaseplanPlan *plan);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must be null or come from this library and not be used again.
void phaseplan_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHASEPLAN_H */
