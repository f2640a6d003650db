//! C ABI over the freeflyer toolkit.
//!
//! Objects cross the boundary as opaque handles created by `ff_*_new` /
//! `ff_*_load` style constructors and released by the matching `ff_*_free`.
//! Every fallible call returns an `FfStatus`; the message of the most recent
//! failure on the calling thread is available from `ff_last_error`.
//! Panics are caught at the boundary and reported as `FF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use freeflyer::rl::{self, MlpParams};
use freeflyer::sim::{self, Episode, EpisodeSummary, FailureMode, ScenarioConfig};
use freeflyer::vec_env::{vec_reset, Randomization, SetpointTask, VecEnv, VecEnvConfig, ACT_DIM, OBS_DIM};
use freeflyer::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Mismatch = 5,
    Io = 6,
    Checkpoint = 7,
    Panic = 8,
}

/// Inspection scenario thruster condition.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfFailureMode {
    Nominal = 0,
    StuckOff = 1,
    StuckOn = 2,
}

/// Scenario configuration handle.
pub struct FfScenario {
    cfg: ScenarioConfig,
}

/// Completed episode handle holding the step log and summary.
pub struct FfEpisode {
    cfg: ScenarioConfig,
    episode: Episode,
}

/// Batched setpoint environment handle.
pub struct FfVecEnv {
    env: VecEnv,
}

/// Deterministic policy loaded from a checkpoint.
pub struct FfPolicy {
    params: MlpParams,
}

/// Scalar episode metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FfSummary {
    pub steps: usize,
    pub duration: f64,
    pub mean_lateral_error: f64,
    pub max_lateral_error: f64,
    pub mean_control_effort: f64,
    pub total_reward: f64,
    /// Negative when no contact occurred.
    pub first_contact_time: f64,
    pub peak_contact_force: f64,
    pub final_position_error: f64,
    pub final_attitude_error: f64,
    pub settled: bool,
    pub rendezvous_success: bool,
    pub dock_success: bool,
}

impl From<&EpisodeSummary> for FfSummary {
    fn from(s: &EpisodeSummary) -> Self {
        Self {
            steps: s.steps,
            duration: s.duration,
            mean_lateral_error: s.mean_lateral_error,
            max_lateral_error: s.max_lateral_error,
            mean_control_effort: s.mean_control_effort,
            total_reward: s.total_reward,
            first_contact_time: s.first_contact_time.unwrap_or(-1.0),
            peak_contact_force: s.peak_contact_force,
            final_position_error: s.final_position_error,
            final_attitude_error: s.final_attitude_error,
            settled: s.settled,
            rendezvous_success: s.rendezvous_success,
            dock_success: s.dock_success,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> FfStatus {
    match e.root() {
        Error::Mismatch(_) => FfStatus::Mismatch,
        Error::Io(_) => FfStatus::Io,
        Error::Checkpoint(_) => FfStatus::Checkpoint,
        Error::Config { .. } | Error::Parse { .. } => FfStatus::Config,
        Error::InvalidInput(_) => FfStatus::InvalidArgument,
        _ if e.is_numerical() => FfStatus::Numerical,
        _ => FfStatus::InvalidArgument,
    }
}

struct Fail(FfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f` behind the panic boundary and records any failure.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            FfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(FfStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(FfStatus::InvalidArgument, format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = CString::new(s).map_err(|_| Fail(FfStatus::InvalidArgument, "string contains a nul byte".into()))?.into_raw();
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn ff_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ff_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ff_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a scenario from JSON.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_scenario_from_json(json: *const c_char, out: *mut *mut FfScenario) -> FfStatus {
    guard(|| {
        let cfg = sim::load_config(str_arg(json, "json")?)?;
        cfg.validate()?;
        put(out, FfScenario { cfg })
    })
}

/// Canonical inspection scenario.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_scenario_inspection(mode: FfFailureMode, out: *mut *mut FfScenario) -> FfStatus {
    guard(|| {
        let mode = match mode {
            FfFailureMode::Nominal => FailureMode::Nominal,
            FfFailureMode::StuckOff => FailureMode::StuckOff,
            FfFailureMode::StuckOn => FailureMode::StuckOn,
        };
        put(out, FfScenario { cfg: sim::inspection_config(mode) })
    })
}

/// Canonical docking scenario with the given seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_scenario_docking(seed: u64, out: *mut *mut FfScenario) -> FfStatus {
    guard(|| put(out, FfScenario { cfg: sim::docking_config(seed) }))
}

/// Overrides the scenario seed.
///
/// # Safety
/// `scenario` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_scenario_set_seed(scenario: *mut FfScenario, seed: u64) -> FfStatus {
    guard(|| {
        handle_mut(scenario, "scenario")?.cfg.seed = seed;
        Ok(())
    })
}

/// Scenario as JSON; release with `ff_string_free`.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_scenario_to_json(scenario: *const FfScenario, out: *mut *mut c_char) -> FfStatus {
    guard(|| put_string(out, handle(scenario, "scenario")?.cfg.to_json()))
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_scenario_free(scenario: *mut FfScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Runs a full episode. On failure no episode is produced and the error
/// names the failing step.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_run(scenario: *const FfScenario, out: *mut *mut FfEpisode) -> FfStatus {
    guard(|| {
        let cfg = handle(scenario, "scenario")?.cfg.clone();
        let episode = sim::run_episode(&cfg).map_err(Error::from)?;
        put(out, FfEpisode { cfg, episode })
    })
}

/// Number of logged steps.
///
/// # Safety
/// `episode` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_len(episode: *const FfEpisode) -> usize {
    episode.as_ref().map_or(0, |e| e.episode.log.len())
}

/// # Safety
/// `episode` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_summary(episode: *const FfEpisode, out: *mut FfSummary) -> FfStatus {
    guard(|| {
        let e = handle(episode, "episode")?;
        let out = out.as_mut().ok_or_else(|| null("output pointer"))?;
        *out = FfSummary::from(&e.episode.summary);
        Ok(())
    })
}

/// Full summary as JSON; release with `ff_string_free`.
///
/// # Safety
/// `episode` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_summary_json(episode: *const FfEpisode, out: *mut *mut c_char) -> FfStatus {
    guard(|| {
        let e = handle(episode, "episode")?;
        let json = serde_json::to_string(&e.episode.summary).map_err(|err| Fail(FfStatus::InvalidArgument, err.to_string()))?;
        put_string(out, json)
    })
}

/// Copies inertial positions row-major by step; `len` must equal
/// `3 × ff_episode_len(episode)`.
///
/// # Safety
/// `episode` must be a live handle and `positions` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_positions(episode: *const FfEpisode, positions: *mut f64, len: usize) -> FfStatus {
    guard(|| {
        let e = handle(episode, "episode")?;
        check_len("positions", len, 3 * e.episode.log.len())?;
        let dst = slice_mut(positions, len, "positions")?;
        for (row, chunk) in e.episode.log.iter().zip(dst.chunks_exact_mut(3)) {
            chunk.copy_from_slice(row.state.position.as_slice());
        }
        Ok(())
    })
}

/// Writes the step log CSV.
///
/// # Safety
/// `episode` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_write_csv(episode: *const FfEpisode, path: *const c_char) -> FfStatus {
    guard(|| {
        let e = handle(episode, "episode")?;
        let path = str_arg(path, "path")?;
        std::fs::write(path, sim::write_log_csv(&e.episode.log, &e.cfg)).map_err(Error::from)?;
        Ok(())
    })
}

/// # Safety
/// `episode` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_episode_free(episode: *mut FfEpisode) {
    if !episode.is_null() {
        drop(Box::from_raw(episode));
    }
}

/// Recomputes the summary of a step log CSV and compares it with a stored
/// summary JSON; `FF_STATUS_MISMATCH` on any difference.
///
/// # Safety
/// Both arguments must be nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn ff_verify_log(csv: *const c_char, summary_json: *const c_char) -> FfStatus {
    guard(|| {
        let csv = str_arg(csv, "csv")?;
        let stored: EpisodeSummary = serde_json::from_str(str_arg(summary_json, "summary_json")?)
            .map_err(|e| Fail(FfStatus::Config, format!("summary: {e}")))?;
        sim::verify_log(csv, &stored)?;
        Ok(())
    })
}

pub const FF_OBS_DIM: usize = 6;
pub const FF_ACT_DIM: usize = 6;
const _: () = assert!(FF_OBS_DIM == OBS_DIM && FF_ACT_DIM == ACT_DIM);

/// Batch of default setpoint environments with initial offsets uniform in
/// `[−range, range]` per axis.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_vecenv_new(n_envs: usize, position_range: f64, master_seed: u64, out: *mut *mut FfVecEnv) -> FfStatus {
    guard(|| {
        let cfg = VecEnvConfig {
            n_envs,
            task: SetpointTask::default(),
            randomization: Randomization { position_range: [[-position_range, position_range]; 3], ..Randomization::default() },
            master_seed,
            parallel: true,
        };
        put(out, FfVecEnv { env: vec_reset(&cfg)? })
    })
}

/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ff_vecenv_len(env: *const FfVecEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.n_envs())
}

/// Copies current observations, `n_envs × FF_OBS_DIM` values.
///
/// # Safety
/// `env` must be a live handle and `obs` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ff_vecenv_observations(env: *const FfVecEnv, obs: *mut f64, len: usize) -> FfStatus {
    guard(|| {
        let e = handle(env, "env")?;
        let src = e.env.observations();
        check_len("obs", len, src.len())?;
        slice_mut(obs, len, "obs")?.copy_from_slice(&src);
        Ok(())
    })
}

/// Steps every environment. `actions` holds `n_envs × FF_ACT_DIM` values;
/// outputs receive `n_envs × FF_OBS_DIM` observations (post-reset on
/// terminal), `n_envs` rewards and `n_envs` terminal flags (0 or 1).
///
/// # Safety
/// `env` must be a live handle and every buffer must hold the stated count.
#[no_mangle]
pub unsafe extern "C" fn ff_vecenv_step(
    env: *mut FfVecEnv,
    actions: *const f64,
    obs: *mut f64,
    rewards: *mut f64,
    terminals: *mut u8,
) -> FfStatus {
    guard(|| {
        let e = handle_mut(env, "env")?;
        let n = e.env.n_envs();
        let a = slice(actions, n * ACT_DIM, "actions")?;
        let obs = slice_mut(obs, n * OBS_DIM, "obs")?;
        let rewards = slice_mut(rewards, n, "rewards")?;
        let terminals = slice_mut(terminals, n, "terminals")?;
        let step = e.env.vec_step(a)?;
        obs.copy_from_slice(&step.obs);
        rewards.copy_from_slice(&step.rewards);
        for (dst, t) in terminals.iter_mut().zip(&step.terminals) {
            *dst = u8::from(*t);
        }
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_vecenv_free(env: *mut FfVecEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Loads and verifies a checkpoint and its sidecar.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ff_policy_load(path: *const c_char, out: *mut *mut FfPolicy) -> FfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let (params, _) = rl::load_checkpoint(Path::new(path))?;
        rl::PolicyController::new(params.clone(), SetpointTask::default())?;
        put(out, FfPolicy { params })
    })
}

/// Deterministic action for one observation of `FF_OBS_DIM` values into
/// `FF_ACT_DIM` values.
///
/// # Safety
/// `policy` must be a live handle; `obs` and `action` must hold the stated
/// counts.
#[no_mangle]
pub unsafe extern "C" fn ff_policy_act(policy: *const FfPolicy, obs: *const f64, action: *mut f64) -> FfStatus {
    guard(|| {
        let p = handle(policy, "policy")?;
        let o = slice(obs, OBS_DIM, "obs")?;
        let a = p.params.deterministic_action(o)?;
        slice_mut(action, ACT_DIM, "action")?.copy_from_slice(&a);
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ff_policy_free(policy: *mut FfPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}
