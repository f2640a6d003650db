//! End-to-end acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use freeflyer::actuation::{apply_fault, FaultModel, FaultSpec};
use freeflyer::contact::{compliance_targets, contact_inverse_inertia, solve_contacts, ContactPoint};
use freeflyer::planning::DockingStage;
use freeflyer::rigid_body::{quat, step, BodyParams, State, Vec3, Wrench};
use freeflyer::rl::{self, Mlp, MlpParams, RolloutBuffer, TrainConfig};
use freeflyer::rng::RngStream;
use freeflyer::sim::{self, FailureMode};
use freeflyer::vec_env::{self, BenchConfig, BenchReport, Randomization, SetpointEnv, VecEnvConfig, ACT_DIM, OBS_DIM};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit_s: f64) -> Result<f64, String> {
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < limit_s, || format!("runtime {elapsed:.2} s exceeds {limit_s} s"))?;
    Ok(elapsed)
}

fn inertial_angular_momentum(s: &State, body: &BodyParams) -> Vec3 {
    s.rotation() * (body.inertia() * s.angular_velocity)
}

fn rotational_energy(s: &State, body: &BodyParams) -> f64 {
    0.5 * s.angular_velocity.dot(&(body.inertia() * s.angular_velocity))
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let body = BodyParams::diagonal(10.0, 0.2, 0.25, 0.3).unwrap();
    let mut s = State::at_rest(Vec3::new(0.1, -0.2, 0.3), quat(0.9, 0.2, -0.3, 0.1).normalize());
    s.angular_velocity = Vec3::new(0.28, -0.21, 0.35);
    s.velocity = Vec3::new(0.05, 0.02, -0.03);
    let (h0, e0, p0) = (inertial_angular_momentum(&s, &body), rotational_energy(&s, &body), body.mass() * s.inertial_velocity());
    let (mut dh, mut de, mut dp): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..512 {
        s = step(&s, &body, &Wrench::zero(), 0.02).map_err(|e| e.to_string())?;
        dh = dh.max((inertial_angular_momentum(&s, &body) - h0).norm() / h0.norm());
        de = de.max((rotational_energy(&s, &body) - e0).abs() / e0);
        dp = dp.max((body.mass() * s.inertial_velocity() - p0).norm() / p0.norm());
    }
    ensure(dh <= 1e-6, || format!("angular momentum drift {dh:e}"))?;
    ensure(de <= 1e-6, || format!("rotational energy drift {de:e}"))?;
    ensure(dp <= 1e-9, || format!("linear momentum drift {dp:e}"))?;
    let t = within_time(start, 1.0)?;
    Ok(format!("|dH|/|H| {dh:.1e}, dE/E {de:.1e}, |dp|/|p| {dp:.1e}, {t:.3} s"))
}

fn state_error(a: &State, b: &State) -> f64 {
    let (x, y) = (a.to_array(), b.to_array());
    x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

fn dynamics_order() -> Outcome {
    let start = Instant::now();
    let body = BodyParams::diagonal(8.0, 0.12, 0.17, 0.21).unwrap();
    let wrench = Wrench::new(Vec3::new(0.3, -0.1, 0.2), Vec3::new(0.02, -0.03, 0.01));
    let mut s0 = State::at_rest(Vec3::zeros(), quat(0.8, 0.3, -0.2, 0.4).normalize());
    s0.angular_velocity = Vec3::new(0.9, -0.6, 1.1);
    s0.velocity = Vec3::new(0.1, 0.0, -0.05);
    let horizon = 2.0;
    let run = |dt: f64| {
        let n = (horizon / dt).round() as usize;
        let mut s = s0;
        for _ in 0..n {
            s = step(&s, &body, &wrench, dt).unwrap();
        }
        s
    };
    let (coarse, fine) = (0.1, 0.05);
    let reference = run(fine / 10.0);
    let e1 = state_error(&run(coarse), &reference);
    let e2 = state_error(&run(fine), &reference);
    let order = (e1 / e2).log2();
    ensure(order >= 3.8, || format!("observed order {order:.3} (errors {e1:e}, {e2:e})"))?;
    let t = within_time(start, 5.0)?;
    Ok(format!("observed order {order:.3}, {t:.3} s"))
}

fn fault_models() -> Outcome {
    let u_max = 0.4;
    let mut rng = RngStream::new(1);
    let demands: Vec<f64> = (0..=40).map(|k| k as f64 * u_max / 40.0).collect();
    for &u in &demands {
        ensure(apply_fault(&FaultModel::StuckOff, u, u_max, 0.0, &mut rng).unwrap() == 0.0, || "stuck-off".into())?;
        ensure(apply_fault(&FaultModel::StuckOn, u, u_max, 0.0, &mut rng).unwrap() == u_max, || "stuck-on".into())?;
        let sat = apply_fault(&FaultModel::Saturation { u_sat: 0.25 }, u, u_max, 0.0, &mut rng).unwrap();
        ensure(sat == u.min(0.25), || format!("saturation at {u}: {sat}"))?;
    }
    // Piecewise-linear valve through (0, 0), (0.2, 0.08), (0.4, 0.4) N.
    let valve = FaultSpec::FaultyValve { breakpoints: Some(vec![[0.0, 0.0], [0.2, 0.08], [0.4, 0.4]]) }
        .instantiate(u_max, &mut rng)
        .unwrap();
    for &u in &demands {
        let want = if u <= 0.2 { 0.4 * u } else { 0.08 + 1.6 * (u - 0.2) };
        let got = apply_fault(&valve, u, u_max, 0.0, &mut rng).unwrap();
        ensure((got - want).abs() <= 1e-15, || format!("valve at {u}: {got} vs {want}"))?;
    }
    // Noise-free instability is the clamped sinusoidal gain.
    let inst = FaultModel::Instability { amplitude: 0.3, frequency: 0.5, noise_std: 0.0 };
    for k in 0..100 {
        let t = k as f64 * 0.02;
        let want = (0.3 * (1.0 + 0.3 * (std::f64::consts::PI * t).sin())).clamp(0.0, u_max);
        let got = apply_fault(&inst, 0.3, u_max, t, &mut rng).unwrap();
        ensure((got - want).abs() <= 1e-15, || format!("instability at t={t}"))?;
    }
    // Stochastic classes: clamped to [0, u_max] and reproducible per seed.
    let noisy = FaultModel::Instability { amplitude: 0.9, frequency: 2.0, noise_std: 0.2 };
    let gp = |seed| FaultSpec::GpSample { grid_points: 31 }.instantiate(u_max, &mut RngStream::new(seed)).unwrap();
    let trace = |m: &FaultModel, seed| {
        let mut r = RngStream::new(seed);
        (0..2000)
            .map(|k| apply_fault(m, demands[k % demands.len()], u_max, k as f64 * 0.01, &mut r).unwrap())
            .collect::<Vec<f64>>()
    };
    for m in [noisy, gp(7)] {
        let a = trace(&m, 3);
        ensure(a.iter().all(|y| (0.0..=u_max).contains(y)), || "output left [0, u_max]".into())?;
        ensure(a == trace(&m, 3), || "not reproducible per seed".into())?;
    }
    ensure(gp(7) == gp(7) && gp(7) != gp(8), || "GP draws not keyed by seed".into())?;
    Ok("closed forms exact; stochastic classes clamped and seed-deterministic".into())
}

fn contact_oracle() -> Outcome {
    let start = Instant::now();
    let body = BodyParams::diagonal(8.0, 0.12, 0.13, 0.14).unwrap();
    let rest = State::default();
    // Single contact: f = max(0, (v* − v) / (A + R)).
    let mut worst1: f64 = 0.0;
    for (v, vs, reg) in [(-0.05, 0.0, 0.3), (-0.2, 0.01, 0.0), (0.01, 0.04, 2.0), (0.3, 0.0, 0.1)] {
        let c = [ContactPoint { position: Vec3::new(0.0, 0.0, -0.15), normal: Vec3::z(), depth: 0.001, rel_vel_normal: v }];
        let a = body.mass().recip();
        let r = solve_contacts(&c, &body, &rest, &[reg], &[vs], 0.02, None).map_err(|e| e.to_string())?;
        let want = ((vs - v) / (a + reg)).max(0.0);
        worst1 = worst1.max((r.impulses[0] - want).abs());
    }
    ensure(worst1 <= 1e-10, || format!("single-contact error {worst1:e}"))?;
    let mut rng = RngStream::new(42);
    let mut worst3: f64 = 0.0;
    for trial in 0..300 {
        let n = 1 + trial % 3;
        let contacts = common::random_contacts(&mut rng, n);
        let (reg, vs) = compliance_targets(&contacts, 400.0, 10.0, 0.02);
        let res = solve_contacts(&contacts, &body, &rest, &reg, &vs, 0.02, None).map_err(|e| e.to_string())?;
        let mut m = contact_inverse_inertia(&contacts, &body, &rest);
        for i in 0..n {
            m[(i, i)] += reg[i];
        }
        let b: Vec<f64> = contacts.iter().zip(&vs).map(|(c, v)| c.rel_vel_normal - v).collect();
        let oracle = common::brute_force_lcp(&m, &b);
        for (got, want) in res.impulses.iter().zip(&oracle) {
            worst3 = worst3.max((got - want).abs());
        }
    }
    ensure(worst3 <= 1e-8, || format!("multi-contact error {worst3:e}"))?;
    let mut worst_drop: f64 = 0.0;
    for (k, c, v0) in [(200.0, 5.0, 0.05), (500.0, 10.0, 0.1), (100.0, 0.0, 0.05)] {
        let sim = common::simulated_drop_peak(k, c, v0, 0.02);
        let reference = common::reference_drop_peak(k, c, v0, 0.02);
        worst_drop = worst_drop.max((sim - reference).abs() / reference);
    }
    ensure(worst_drop <= 0.05, || format!("drop peak error {:.2}%", 100.0 * worst_drop))?;
    let t = within_time(start, 10.0)?;
    Ok(format!("single {worst1:.1e}, <=3 contacts {worst3:.1e}, drop peak {:.2}%, {t:.2} s", 100.0 * worst_drop))
}

fn inspection_ordering() -> Outcome {
    let start = Instant::now();
    let run = |m| sim::inspection_scenario(m).map_err(|e| e.to_string());
    let (n, off, on) = (run(FailureMode::Nominal)?, run(FailureMode::StuckOff)?, run(FailureMode::StuckOn)?);
    let lat = [n.mean_lateral_error, off.mean_lateral_error, on.mean_lateral_error];
    ensure(lat[0] < lat[1] && lat[1] < lat[2], || format!("lateral ordering violated: {lat:?}"))?;
    ensure(on.mean_control_effort > n.mean_control_effort, || {
        format!("effort stuck-on {} <= nominal {}", on.mean_control_effort, n.mean_control_effort)
    })?;
    ensure(lat[0] <= 0.05, || format!("nominal lateral error {} > 0.05 m", lat[0]))?;
    let t = within_time(start, 60.0)?;
    Ok(format!(
        "lateral {:.4}/{:.4}/{:.4} m, effort {:.2}/{:.2}/{:.2}, {t:.1} s",
        lat[0], lat[1], lat[2], n.mean_control_effort, off.mean_control_effort, on.mean_control_effort
    ))
}

fn docking() -> Outcome {
    let start = Instant::now();
    let s = sim::docking_scenario(0).map_err(|e| e.to_string())?;
    ensure(s.rendezvous_success && s.dock_success, || format!("rendezvous {} dock {}", s.rendezvous_success, s.dock_success))?;
    ensure(s.first_contact_stage == Some(DockingStage::FinalApproach), || {
        format!("first contact in {:?}", s.first_contact_stage)
    })?;
    ensure(s.peak_contact_force <= 5.0, || format!("peak force {} N", s.peak_contact_force))?;
    ensure(s.final_position_error <= 5e-2, || format!("final position error {} m", s.final_position_error))?;
    let t = within_time(start, 60.0)?;
    Ok(format!(
        "first contact {:.2} s, peak {:.3} N, final error {:.2e} m, {t:.1} s",
        s.first_contact_time.unwrap_or(f64::NAN),
        s.peak_contact_force,
        s.final_position_error
    ))
}

fn benchmark() -> Outcome {
    let start = Instant::now();
    // Published rows, checked at their printed precision.
    for (rate, sim_rate, speedup, eff, n) in [(3.97e3, 79.3, 1.0, 1.00, 128.0), (4.37e4, 873.0, 11.0, 0.69, 2048.0)] {
        let close = |a: f64, b: f64, digits: f64| (a - b).abs() <= 0.5 * 10f64.powf(-digits) * b.abs().max(1.0) + 0.005 * b.abs();
        ensure(close(rate * 0.02, sim_rate, 1.0), || format!("fixture sim_s_per_s {sim_rate}"))?;
        ensure(close(speedup / (n / 128.0), eff, 2.0), || format!("fixture efficiency {eff}"))?;
    }
    let fixture = BenchReport::derive(2048, 4.37e4, 0.02, (128, 3.97e3));
    ensure((fixture.parallel_efficiency - 0.69).abs() < 0.005, || "fixture derive".into())?;
    let cfg = BenchConfig { n_envs_list: vec![1, 256], steps: 512, ..BenchConfig::default() };
    let rows = vec_env::run_benchmark(&cfg).map_err(|e| e.to_string())?;
    for r in &rows {
        ensure(r.sim_s_per_s == r.env_steps_per_s * cfg.dt, || format!("sim_s_per_s identity at n={}", r.n_envs))?;
        ensure(r.parallel_efficiency == r.speedup / (r.n_envs as f64 / 1.0), || format!("efficiency identity at n={}", r.n_envs))?;
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let ratio = rows[1].env_steps_per_s / rows[0].env_steps_per_s;
    let throughput = if cores >= 8 {
        ensure(ratio > 4.0, || format!("n=256 throughput only {ratio:.2}x n=1 on {cores} cores"))?;
        format!("n=256/n=1 throughput {ratio:.2}x")
    } else {
        format!("n=256/n=1 throughput {ratio:.2}x; >4x claim not evaluated ({cores} core(s), needs >= 8)")
    };
    let t = within_time(start, 120.0)?;
    Ok(format!("identities exact; {throughput}; {t:.1} s"))
}

fn batch_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = VecEnvConfig {
        n_envs: 8,
        randomization: Randomization {
            position_range: [[-1.0, 1.0]; 3],
            velocity_range: [[-0.05, 0.05]; 3],
            attitude_cone: 0.3,
            fault_probability: 0.5,
        },
        master_seed: 2024,
        parallel: true,
        ..VecEnvConfig::default()
    };
    let mut batch = vec_env::vec_reset(&cfg).map_err(|e| e.to_string())?;
    let (task, rand) = (Arc::new(cfg.task.clone()), Arc::new(cfg.randomization.clone()));
    let mut envs: Vec<SetpointEnv> = (0..8).map(|i| SetpointEnv::new(task.clone(), rand.clone(), cfg.master_seed, i)).collect();
    let mut rng = RngStream::new(5);
    let mut resets = 0;
    for k in 0..512 {
        let actions: Vec<f64> = (0..8 * ACT_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let out = batch.vec_step(&actions).map_err(|e| e.to_string())?;
        for (i, env) in envs.iter_mut().enumerate() {
            let s = env.step(&actions[i * ACT_DIM..(i + 1) * ACT_DIM]).map_err(|e| e.to_string())?;
            let same = s.reward.to_bits() == out.rewards[i].to_bits()
                && s.terminal == out.terminals[i]
                && (0..OBS_DIM).all(|j| s.obs[j].to_bits() == out.obs[i * OBS_DIM + j].to_bits())
                && env.state().to_array().map(f64::to_bits) == batch.envs()[i].state().to_array().map(f64::to_bits);
            ensure(same, || format!("env {i} diverged at step {k}"))?;
            resets += usize::from(s.terminal);
        }
    }
    let t = within_time(start, 10.0)?;
    Ok(format!("8 envs x 512 steps bit-identical ({resets} resets), {t:.2} s"))
}

fn rl_correctness() -> Outcome {
    let mut rng = RngStream::new(77);
    let mut gae_err: f64 = 0.0;
    for _ in 0..50 {
        let n = 64;
        let r: Vec<f64> = (0..n).map(|_| rng.normal(1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.normal(1.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.05)).collect();
        let boot = rng.normal(1.0);
        let (adv, _) = rl::compute_gae(&r, &v, &d, boot, 0.99, 0.95);
        let oracle = common::gae_oracle(&r, &v, &d, boot, 0.99, 0.95);
        gae_err = adv.iter().zip(&oracle).fold(gae_err, |m, (a, b)| m.max((a - b).abs()));
    }
    ensure(gae_err <= 1e-12, || format!("GAE error {gae_err:e}"))?;

    // Reverse-mode gradient of ½‖y − target‖² against central differences.
    let mut fd_err: f64 = 0.0;
    for sizes in [vec![2, 1, 1], vec![6, 8, 8, 3]] {
        let net = Mlp::init(&sizes, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.normal(1.0)).collect();
        let target: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.normal(1.0)).collect();
        let loss = |p: &[f64]| {
            let y = Mlp::from_params(&sizes, p.to_vec()).unwrap().forward(&x);
            0.5 * y.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let acts = net.forward_cached(&x);
        let out = acts.last().unwrap();
        let g_out: Vec<f64> = out.iter().zip(&target).map(|(a, b)| a - b).collect();
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&acts, &g_out, &mut grad);
        for k in 0..net.n_params() {
            let h = 1e-6;
            let (mut p, mut q) = (net.params.clone(), net.params.clone());
            p[k] += h;
            q[k] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            fd_err = fd_err.max((grad[k] - fd).abs() / fd.abs().max(1e-3));
        }
    }
    ensure(fd_err <= 1e-5, || format!("MLP gradient relative error {fd_err:e}"))?;

    let params = MlpParams::init(OBS_DIM, ACT_DIM, &[16, 16], -0.5, &mut rng).unwrap();
    let n = 512;
    let observations: Vec<f64> = (0..n * OBS_DIM).map(|_| rng.normal(1.0)).collect();
    let (mut actions, mut log_probs) = (Vec::new(), Vec::new());
    for i in 0..n {
        let out = params.policy_forward(&observations[i * OBS_DIM..(i + 1) * OBS_DIM]).unwrap();
        let a: Vec<f64> = out.mean.iter().zip(&out.log_std).map(|(m, s)| m + s.exp() * rng.standard_normal()).collect();
        log_probs.push(rl::gaussian_log_prob(&out.mean, &out.log_std, &a));
        actions.extend(a);
    }
    let buffer = RolloutBuffer {
        n_envs: n,
        steps: 1,
        observations,
        actions,
        rewards: vec![0.0; n],
        terminals: vec![true; n],
        log_probs,
        values: vec![0.0; n],
        final_observations: vec![0.0; n * OBS_DIM],
        truncations: vec![],
        advantages: (0..n).map(|_| rng.normal(1.0)).collect(),
        returns: vec![0.0; n],
    };
    let idx: Vec<usize> = (0..n).collect();
    let (ppo, _) = rl::ppo_loss_grad(&params, &buffer, &idx, f64::INFINITY, 0.0, 0.0);
    let vpg = rl::vpg_grad(&params, &buffer, &idx);
    let np = params.n_policy_params();
    let dot: f64 = ppo[..np].iter().zip(&vpg).map(|(a, b)| a * b).sum();
    let cos = dot / (ppo[..np].iter().map(|a| a * a).sum::<f64>().sqrt() * vpg.iter().map(|b| b * b).sum::<f64>().sqrt());
    ensure(cos > 0.999, || format!("PPO/VPG cosine {cos}"))?;
    Ok(format!("GAE {gae_err:.1e}, MLP FD {fd_err:.1e}, PPO/VPG cosine {cos:.6}"))
}

fn rl_learning() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    ensure(cfg.iterations() * cfg.batch_steps() <= 200_000, || "default budget exceeds 200k steps".into())?;
    let baseline = rl::random_baseline(&cfg, 64).map_err(|e| e.to_string())?;
    let out = rl::train(&cfg).map_err(|e| e.to_string())?;
    let trained = rl::evaluate_policy(&out.params, &cfg, 64).map_err(|e| e.to_string())?;
    let ratio = trained.mean_final_distance / baseline.mean_final_distance;
    ensure(ratio <= 0.5, || {
        format!("trained {:.4} m vs random {:.4} m (ratio {ratio:.3})", trained.mean_final_distance, baseline.mean_final_distance)
    })?;
    let t = within_time(start, 900.0)?;
    Ok(format!(
        "trained {:.4} m vs random {:.4} m (ratio {ratio:.3}) after {} steps, {t:.1} s",
        trained.mean_final_distance,
        baseline.mean_final_distance,
        cfg.iterations() * cfg.batch_steps()
    ))
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let digest = Sha256::digest(std::fs::read(&path).unwrap());
        out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), format!("{digest:x}"));
    }
    out
}

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_freeflyer")).args(args).env_remove("FREEFLYER_OUT").output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let mut scenario = sim::ScenarioConfig::minimal(2.0);
    scenario.disturbance = freeflyer::actuation::DisturbanceSpec::WhiteNoiseWrench { std_force: 0.01, std_torque: 0.001 };
    scenario.initial.position_range = [[-0.2, 0.2]; 3];
    std::fs::write(root.join("scenario.json"), scenario.to_json()).unwrap();
    let train_cfg = TrainConfig { n_envs: 8, rollout_steps: 64, minibatch: 128, eval_episodes: 8, ..TrainConfig::default() };
    std::fs::write(root.join("train.json"), serde_json::to_string(&train_cfg).unwrap()).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();

    let runs: Vec<(&str, Vec<String>)> = vec![
        ("simulate", vec!["simulate".into(), "--config".into(), p("scenario.json"), "--seed".into(), "4".into()]),
        ("inspect", vec!["inspect".into(), "--failure".into(), "stuck-on".into(), "--seed".into(), "1".into()]),
        ("dock", vec!["dock".into(), "--seed".into(), "0".into()]),
        ("train", vec!["train".into(), "--config".into(), p("train.json"), "--total-steps".into(), "1024".into()]),
    ];
    let mut files = 0;
    for (name, args) in &runs {
        let mut results = vec![];
        for rep in 0..2 {
            let out = p(&format!("{name}_{rep}"));
            let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
            a.extend(["--out", &out]);
            let (code, stdout) = cli(&a);
            ensure(code == 0, || format!("{name} exited {code}"))?;
            let stdout = stdout.replace(&out, "OUT");
            results.push((hash_dir(Path::new(&out)), stdout));
        }
        ensure(!results[0].0.is_empty(), || format!("{name} wrote no files"))?;
        ensure(results[0] == results[1], || format!("{name} output differs between runs"))?;
        files += results[0].0.len();
    }

    // Bench timings vary by run; the layout and the derived identities must not.
    let mut layouts = vec![];
    for rep in 0..2 {
        let out = p(&format!("bench_{rep}"));
        let (code, _) = cli(&["bench", "--envs", "1,4", "--steps", "64", "--out", &out]);
        ensure(code == 0, || format!("bench exited {code}"))?;
        let csv = std::fs::read_to_string(Path::new(&out).join("bench.csv")).unwrap();
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default().to_string();
        let ns: Vec<String> = lines.map(|l| l.split(',').next().unwrap_or_default().to_string()).collect();
        layouts.push((header, ns));
    }
    ensure(layouts[0] == layouts[1], || "bench layout differs between runs".into())?;

    let log = p("inspect_0/log.csv");
    let (code, _) = cli(&["replay", "--log", &log]);
    ensure(code == 0, || format!("replay of a fresh log exited {code}"))?;
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let col = lines[1].split(',').position(|c| c.trim_matches('"') == "reward").ok_or("no reward column")?;
    let mut fields: Vec<String> = lines[100].split(',').map(String::from).collect();
    fields[col] = format!("{}", fields[col].parse::<f64>().unwrap() + 1.0);
    lines[100] = fields.join(",");
    std::fs::write(root.join("inspect_0/tampered.csv"), lines.join("\n") + "\n").unwrap();
    let (code, _) = cli(&["replay", "--log", &p("inspect_0/tampered.csv"), "--summary", &p("inspect_0/summary.json")]);
    ensure(code == 3, || format!("replay of a tampered log exited {code}, expected 3"))?;
    let (code, _) = cli(&["inspect", "--failure", "sideways"]);
    ensure(code == 1, || format!("invalid mode exited {code}, expected 1"))?;
    Ok(format!("{} subcommands x2 byte-identical ({files} files), bench layout stable, replay 0 / tamper 3", runs.len()))
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("conservation", conservation),
        ("dynamics order", dynamics_order),
        ("fault models", fault_models),
        ("contact oracle", contact_oracle),
        ("inspection ordering", inspection_ordering),
        ("docking", docking),
        ("benchmark identities", benchmark),
        ("batch-sequential equivalence", batch_equivalence),
        ("RL correctness", rl_correctness),
        ("RL learning", rl_learning),
        ("reproducibility", reproducibility),
    ];
    let mut failed = vec![];
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
