#ifndef FREEFLYER_H
#define FREEFLYER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define FF_OBS_DIM 6

#define FF_ACT_DIM 6

// Result code of every fallible call.
typedef enum FfStatus {
  FF_STATUS_OK = 0,
  FF_STATUS_NULL_POINTER = 1,
  FF_STATUS_INVALID_ARGUMENT = 2,
  FF_STATUS_CONFIG = 3,
  FF_STATUS_NUMERICAL = 4,
  FF_STATUS_MISMATCH = 5,
  FF_STATUS_IO = 6,
  FF_STATUS_CHECKPOINT = 7,
  FF_STATUS_PANIC = 8,
} FfStatus;

// Inspection scenario thruster condition.
typedef enum FfFailureMode {
  FF_FAILURE_MODE_NOMINAL = 0,
  FF_FAILURE_MODE_STUCK_OFF = 1,
  FF_FAILURE_MODE_STUCK_ON = 2,
} FfFailureMode;

// Completed episode handle holding the step log and summary.
typedef struct FfEpisode FfEpisode;

// Deterministic policy loaded from a checkpoint.
typedef struct FfPolicy FfPolicy;

// Scenario configuration handle.
typedef struct FfScenario FfScenario;

// Batched setpoint environment handle.
typedef struct FfVecEnv FfVecEnv;

// Scalar episode metrics.
typedef struct FfSummary {
  uintptr_t steps;
  double duration;
  double mean_lateral_error;
  double max_lateral_error;
  double mean_control_effort;
  double total_reward;
  // Negative when no contact occurred.
  double first_contact_time;
  double peak_contact_force;
  double final_position_error;
  double final_attitude_error;
  bool settled;
  bool rendezvous_success;
  bool dock_success;
} FfSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *ff_version(void);

// Message of the last failed call on this thread; empty when none. The
// pointer stays valid until the next failing call on the same thread.
const char *ff_last_error(void);

// Releases a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed.
void ff_string_free(char *s);

// Parses and validates a scenario from JSON.
//
// # Safety
// `json` must be a nul-terminated string and `out` a valid pointer.
enum FfStatus ff_scenario_from_json(const char *json, struct FfScenario **out);

// Canonical inspection scenario.
//
// # Safety
// `out` must be a valid pointer.
enum FfStatus ff_scenario_inspection(enum FfFailureMode mode, struct FfScenario **out);

// Canonical docking scenario with the given seed.
//
// # Safety
// `out` must be a valid pointer.
enum FfStatus ff_scenario_docking(uint64_t seed, struct FfScenario **out);

// Overrides the scenario seed.
//
// # Safety
// `scenario` must be a live handle.
enum FfStatus ff_scenario_set_seed(struct FfScenario *scenario, uint64_t seed);

// Scenario as JSON; release with `ff_string_free`.
//
// # Safety
// `scenario` must be a live handle and `out` a valid pointer.
enum FfStatus ff_scenario_to_json(const struct FfScenario *scenario, char **out);

// # Safety
// `scenario` must be null or a handle not yet freed.
void ff_scenario_free(struct FfScenario *scenario);

// Runs a full episode. On failure no episode is produced and the error
// names the failing step.
//
// # Safety
// `scenario` must be a live handle and `out` a valid pointer.
enum FfStatus ff_episode_run(const struct FfScenario *scenario, struct FfEpisode **out);

// Number of logged steps.
//
// # Safety
// `episode` must be a live handle.
uintptr_t ff_episode_len(const struct FfEpisode *episode);

// # Safety
// `episode` must be a live handle and `out` a valid pointer.
enum FfStatus ff_episode_summary(const struct FfEpisode *episode, struct FfSummary *out);

// Full summary as JSON; release with `ff_string_free`.
//
// # Safety
// `episode` must be a live handle and `out` a valid pointer.
enum FfStatus ff_episode_summary_json(const struct FfEpisode *episode, char **out);

// Copies inertial positions row-major by step; `len` must equal
// `3 × ff_episode_len(episode)`.
//
// # Safety
// `episode` must be a live handle and `positions` must hold `len` doubles.
enum FfStatus ff_episode_positions(const struct FfEpisode *episode,
                                   double *positions,
                                   uintptr_t len);

// Writes the step log CSV.
//
// # Safety
// `episode` must be a live handle and `path` a nul-terminated string.
enum FfStatus ff_episode_write_csv(const struct FfEpisode *episode, const char *path);

// # Safety
// `episode` must be null or a handle not yet freed.
void ff_episode_free(struct FfEpisode *episode);

// Recomputes the summary of a step log CSV and compares it with a stored
// summary JSON; `FF_STATUS_MISMATCH` on any difference.
//
// # Safety
// Both arguments must be nul-terminated strings.
enum FfStatus ff_verify_log(const char *csv, const char *summary_json);

// Batch of default setpoint environments with initial offsets uniform in
// `[−range, range]` per axis.
//
// # Safety
// `out` must be a valid pointer.
enum FfStatus ff_vecenv_new(uintptr_t n_envs,
                            double position_range,
                            uint64_t master_seed,
                            struct FfVecEnv **out);

// # Safety
// `env` must be a live handle.
uintptr_t ff_vecenv_len(const struct FfVecEnv *env);

// Copies current observations, `n_envs × FF_OBS_DIM` values.
//
// # Safety
// `env` must be a live handle and `obs` must hold `len` doubles.
enum FfStatus ff_vecenv_observations(const struct FfVecEnv *env, double *obs, uintptr_t len);

// Steps every environment. `actions` holds `n_envs × FF_ACT_DIM` values;
// outputs receive `n_envs × FF_OBS_DIM` observations (post-reset on
// terminal), `n_envs` rewards and `n_envs` terminal flags (0 or 1).
//
// # Safety
// `env` must be a live handle and every buffer must hold the stated count.
enum FfStatus ff_vecenv_step(struct FfVecEnv *env,
                             const double *actions,
                             double *obs,
                             double *rewards,
                             uint8_t *terminals);

// # Safety
// `env` must be null or a handle not yet freed.
void ff_vecenv_free(struct FfVecEnv *env);

// Loads and verifies a checkpoint and its sidecar.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum FfStatus ff_policy_load(const char *path, struct FfPolicy **out);

// Deterministic action for one observation of `FF_OBS_DIM` values into
// `FF_ACT_DIM` values.
//
// # Safety
// `policy` must be a live handle; `obs` and `action` must hold the stated
// counts.
enum FfStatus ff_policy_act(const struct FfPolicy *policy, const double *obs, double *action);

// # Safety
// `policy` must be null or a handle not yet freed.
void ff_policy_free(struct FfPolicy *policy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FREEFLYER_H */
