use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use freeflyer::sim::{self, FailureMode};
use freeflyer::vec_env::{vec_reset, Randomization, VecEnvConfig};
use freeflyer_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ff_last_error()) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { ff_string_free(p) };
    s
}

#[test]
fn scenario_episode_round_trip() {
    let json = CString::new(sim::ScenarioConfig::minimal(1.0).to_json()).unwrap();
    let mut scenario = ptr::null_mut();
    assert_eq!(unsafe { ff_scenario_from_json(json.as_ptr(), &mut scenario) }, FfStatus::Ok);
    assert_eq!(unsafe { ff_scenario_set_seed(scenario, 5) }, FfStatus::Ok);
    let mut episode = ptr::null_mut();
    assert_eq!(unsafe { ff_episode_run(scenario, &mut episode) }, FfStatus::Ok);
    let n = unsafe { ff_episode_len(episode) };
    assert_eq!(n, 50);

    let mut cfg = sim::ScenarioConfig::minimal(1.0);
    cfg.seed = 5;
    let native = sim::run_episode(&cfg).unwrap();
    let mut summary = FfSummary::default();
    assert_eq!(unsafe { ff_episode_summary(episode, &mut summary) }, FfStatus::Ok);
    assert_eq!(summary, FfSummary::from(&native.summary));

    let mut positions = vec![0.0; 3 * n];
    assert_eq!(unsafe { ff_episode_positions(episode, positions.as_mut_ptr(), positions.len()) }, FfStatus::Ok);
    assert_eq!(&positions[3 * (n - 1)..], native.log[n - 1].state.position.as_slice());
    assert_eq!(unsafe { ff_episode_positions(episode, positions.as_mut_ptr(), 3) }, FfStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("log.csv");
    let c_path = CString::new(csv_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ff_episode_write_csv(episode, c_path.as_ptr()) }, FfStatus::Ok);
    let mut summary_json = ptr::null_mut();
    assert_eq!(unsafe { ff_episode_summary_json(episode, &mut summary_json) }, FfStatus::Ok);
    let summary_json = take_string(summary_json);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let (c_csv, c_sum) = (CString::new(csv.clone()).unwrap(), CString::new(summary_json.clone()).unwrap());
    assert_eq!(unsafe { ff_verify_log(c_csv.as_ptr(), c_sum.as_ptr()) }, FfStatus::Ok);
    let tampered = CString::new(summary_json.replace("\"steps\":50", "\"steps\":49")).unwrap();
    assert_eq!(unsafe { ff_verify_log(c_csv.as_ptr(), tampered.as_ptr()) }, FfStatus::Mismatch);

    unsafe {
        ff_episode_free(episode);
        ff_scenario_free(scenario);
    }
}

#[test]
fn errors_are_coded_and_reported() {
    let mut scenario = ptr::null_mut();
    let bad = CString::new(r#"{"schema": 1, "duration": 1.0, "dt": -0.1}"#).unwrap();
    assert_eq!(unsafe { ff_scenario_from_json(bad.as_ptr(), &mut scenario) }, FfStatus::Config);
    assert!(last_error().contains("dt"), "{}", last_error());
    assert!(scenario.is_null());
    let garbage = CString::new("{not json").unwrap();
    assert_eq!(unsafe { ff_scenario_from_json(garbage.as_ptr(), &mut scenario) }, FfStatus::Config);
    assert_eq!(unsafe { ff_scenario_from_json(ptr::null(), &mut scenario) }, FfStatus::NullPointer);
    assert_eq!(unsafe { ff_episode_run(ptr::null(), &mut ptr::null_mut()) }, FfStatus::NullPointer);
    assert_eq!(unsafe { ff_episode_len(ptr::null()) }, 0);
    let missing = CString::new("/nonexistent/policy.ffrl").unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { ff_policy_load(missing.as_ptr(), &mut policy) }, FfStatus::Checkpoint);
    unsafe {
        ff_scenario_free(ptr::null_mut());
        ff_episode_free(ptr::null_mut());
        ff_vecenv_free(ptr::null_mut());
        ff_policy_free(ptr::null_mut());
        ff_string_free(ptr::null_mut());
    }
}

#[test]
fn canonical_scenarios_serialize() {
    let mut scenario = ptr::null_mut();
    assert_eq!(unsafe { ff_scenario_inspection(FfFailureMode::StuckOn, &mut scenario) }, FfStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { ff_scenario_to_json(scenario, &mut json) }, FfStatus::Ok);
    assert_eq!(take_string(json), sim::inspection_config(FailureMode::StuckOn).to_json());
    unsafe { ff_scenario_free(scenario) };
    assert_eq!(unsafe { ff_scenario_docking(4, &mut scenario) }, FfStatus::Ok);
    assert_eq!(unsafe { ff_scenario_to_json(scenario, &mut json) }, FfStatus::Ok);
    assert_eq!(take_string(json), sim::docking_config(4).to_json());
    unsafe { ff_scenario_free(scenario) };
}

#[test]
fn vecenv_matches_native() {
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { ff_vecenv_new(3, 0.5, 9, &mut env) }, FfStatus::Ok);
    assert_eq!(unsafe { ff_vecenv_len(env) }, 3);
    let mut native = vec_reset(&VecEnvConfig {
        n_envs: 3,
        randomization: Randomization { position_range: [[-0.5, 0.5]; 3], ..Randomization::default() },
        master_seed: 9,
        ..VecEnvConfig::default()
    })
    .unwrap();
    let mut obs = vec![0.0; 3 * FF_OBS_DIM];
    assert_eq!(unsafe { ff_vecenv_observations(env, obs.as_mut_ptr(), obs.len()) }, FfStatus::Ok);
    assert_eq!(obs, native.observations());
    let (mut rewards, mut terminals) = (vec![0.0; 3], vec![0u8; 3]);
    for k in 0..200 {
        let actions: Vec<f64> = (0..3 * FF_ACT_DIM).map(|i| ((i + k) % 5) as f64 / 2.0 - 1.0).collect();
        let status = unsafe { ff_vecenv_step(env, actions.as_ptr(), obs.as_mut_ptr(), rewards.as_mut_ptr(), terminals.as_mut_ptr()) };
        assert_eq!(status, FfStatus::Ok);
        let step = native.vec_step(&actions).unwrap();
        assert_eq!(obs, step.obs);
        assert_eq!(rewards, step.rewards);
        assert_eq!(terminals, step.terminals.iter().map(|t| u8::from(*t)).collect::<Vec<_>>());
    }
    let nan = vec![f64::NAN; 3 * FF_ACT_DIM];
    let status = unsafe { ff_vecenv_step(env, nan.as_ptr(), obs.as_mut_ptr(), rewards.as_mut_ptr(), terminals.as_mut_ptr()) };
    assert_eq!(status, FfStatus::InvalidArgument);
    unsafe { ff_vecenv_free(env) };
}

#[test]
fn policy_loads_and_acts() {
    use freeflyer::rl::{save_checkpoint, MlpParams, TrainConfig};
    use freeflyer::rng::RngStream;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ffrl");
    let params = MlpParams::init(6, 6, &[8], -0.5, &mut RngStream::new(2)).unwrap();
    save_checkpoint(&path, &params, &TrainConfig::default()).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut policy = ptr::null_mut();
    assert_eq!(unsafe { ff_policy_load(c_path.as_ptr(), &mut policy) }, FfStatus::Ok);
    let obs = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5];
    let mut action = [0.0; 6];
    assert_eq!(unsafe { ff_policy_act(policy, obs.as_ptr(), action.as_mut_ptr()) }, FfStatus::Ok);
    assert_eq!(action.to_vec(), params.deterministic_action(&obs).unwrap());
    unsafe { ff_policy_free(policy) };
}

/// Compiles the C smoke program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libfreeflyer_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("cc available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("steps=25 "));
}
