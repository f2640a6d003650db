//! Batched setpoint-regulation environments, rollouts and the throughput
//! benchmark.
//!
//! The task is 3-DoF translational regulation: attitude is held at its initial
//! value and every action drives a direction group with both thrusters at the
//! same throttle, so thruster torques cancel. Each environment owns its random
//! streams, keyed by `(master_seed, env_index, purpose, episode)`, so results
//! never depend on batch composition or worker scheduling.

use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actuation::ThrusterSystem;
use crate::error::{Error, Result};
use crate::planning::random_attitude_within;
use crate::rigid_body::{identity_quat, step, BodyParams, State, Vec3, DEFAULT_DT, MAX_DT};
use crate::rng::{purpose, RngStream};
use crate::sim::tracking_reward;

pub const OBS_DIM: usize = 6;
pub const ACT_DIM: usize = 6;
/// Control and integration step of the RL task, s.
pub const RL_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetpointTask {
    pub body: BodyParams,
    pub thrusters: ThrusterSystem,
    pub dt: f64,
    /// Steps per episode before truncation.
    pub episode_steps: usize,
    pub setpoint: [f64; 3],
    /// Episode ends when the position error exceeds this, m.
    pub bound: f64,
    /// Observation scales for position error and velocity.
    pub pos_scale: f64,
    pub vel_scale: f64,
}

impl Default for SetpointTask {
    fn default() -> Self {
        Self {
            body: BodyParams::default(),
            thrusters: ThrusterSystem::default(),
            dt: RL_DT,
            episode_steps: 128,
            setpoint: [0.0; 3],
            bound: 5.0,
            pos_scale: 1.0,
            vel_scale: 0.2,
        }
    }
}

impl SetpointTask {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::config("task.dt", format!("must lie in (0, {MAX_DT}]")));
        }
        if self.episode_steps == 0 {
            return Err(Error::config("task.episode_steps", "must be >= 1"));
        }
        if !(self.bound > 0.0) || !(self.pos_scale > 0.0) || !(self.vel_scale > 0.0) {
            return Err(Error::config("task.bound", "bound and observation scales must be > 0"));
        }
        if self.thrusters.direction_groups().iter().any(|g| g.is_empty()) {
            return Err(Error::config("task.thrusters", "every axis direction needs at least one thruster"));
        }
        Ok(())
    }

    pub fn setpoint(&self) -> Vec3 {
        Vec3::from(self.setpoint)
    }

    /// Normalized `(r_ref − r, v)` with `v` in the inertial frame.
    pub fn observe(&self, reference: &Vec3, state: &State) -> [f64; OBS_DIM] {
        let e = reference - state.position;
        let v = state.inertial_velocity();
        [
            e.x / self.pos_scale,
            e.y / self.pos_scale,
            e.z / self.pos_scale,
            v.x / self.vel_scale,
            v.y / self.vel_scale,
            v.z / self.vel_scale,
        ]
    }

    /// Maps actions in `[−1, 1]` (clamped) to thruster commands: action `j`
    /// throttles every thruster of direction group `j` (`+x, −x, +y, −y, +z,
    /// −z`) to `max(a_j, 0)·u_max`.
    pub fn action_to_thrust(&self, action: &[f64]) -> Result<Vec<f64>> {
        if action.len() != ACT_DIM {
            return Err(Error::invalid(format!("action length {} != {ACT_DIM}", action.len())));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("non-finite action"));
        }
        let mut u = vec![0.0; self.thrusters.len()];
        for (j, group) in self.thrusters.direction_groups().iter().enumerate() {
            let throttle = action[j].clamp(-1.0, 1.0).max(0.0);
            for &i in group {
                u[i] = throttle * self.thrusters.u_max()[i];
            }
        }
        Ok(u)
    }
}

/// Per-episode initial-state randomization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Randomization {
    /// Offset from the setpoint per axis, `[lo, hi]`, m.
    pub position_range: [[f64; 2]; 3],
    pub velocity_range: [[f64; 2]; 3],
    /// Fixed attitude drawn within this angle of identity, rad.
    pub attitude_cone: f64,
    /// Probability that an episode has one random thruster stuck off.
    pub fault_probability: f64,
}

impl Default for Randomization {
    fn default() -> Self {
        Self {
            position_range: [[-1.0, 1.0]; 3],
            velocity_range: [[0.0, 0.0]; 3],
            attitude_cone: 0.0,
            fault_probability: 0.0,
        }
    }
}

impl Randomization {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("position_range", &self.position_range), ("velocity_range", &self.velocity_range)] {
            if r.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
                return Err(Error::config(format!("randomization.{name}"), "each range needs lo <= hi"));
            }
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.attitude_cone) {
            return Err(Error::config("randomization.attitude_cone", "must lie in [0, pi]"));
        }
        if !(0.0..=1.0).contains(&self.fault_probability) {
            return Err(Error::config("randomization.fault_probability", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VecEnvConfig {
    pub n_envs: usize,
    pub task: SetpointTask,
    pub randomization: Randomization,
    pub master_seed: u64,
    /// Step environments on the rayon pool.
    pub parallel: bool,
}

impl Default for VecEnvConfig {
    fn default() -> Self {
        Self {
            n_envs: 1,
            task: SetpointTask::default(),
            randomization: Randomization::default(),
            master_seed: 0,
            parallel: true,
        }
    }
}

impl VecEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_envs == 0 {
            return Err(Error::config("n_envs", "must be >= 1"));
        }
        self.task.validate()?;
        self.randomization.validate()
    }
}

/// Result of one environment step. `obs` is already post-reset when
/// `terminal` is set; the pre-reset observation is kept in `final_obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub obs: [f64; OBS_DIM],
    pub reward: f64,
    pub terminal: bool,
    /// Terminal by the step limit rather than by leaving the bound.
    pub truncated: bool,
    pub final_obs: Option<[f64; OBS_DIM]>,
    /// Position error at episode end, m.
    pub final_distance: Option<f64>,
}

/// One environment with its own state and random streams.
#[derive(Debug, Clone)]
pub struct SetpointEnv {
    task: Arc<SetpointTask>,
    randomization: Arc<Randomization>,
    master_seed: u64,
    index: u64,
    episode: u64,
    steps: usize,
    state: State,
    stuck_off: Option<usize>,
}

impl SetpointEnv {
    pub fn new(task: Arc<SetpointTask>, randomization: Arc<Randomization>, master_seed: u64, index: u64) -> Self {
        let mut env = Self {
            task,
            randomization,
            master_seed,
            index,
            episode: 0,
            steps: 0,
            state: State::default(),
            stuck_off: None,
        };
        env.reset_episode();
        env
    }

    fn reset_episode(&mut self) {
        let r = &self.randomization;
        let mut rng = RngStream::keyed(&[self.master_seed, self.index, purpose::INITIAL_STATE, self.episode]);
        let mut s = State::at_rest(self.task.setpoint(), identity_quat());
        for k in 0..3 {
            s.position[k] += rng.uniform(r.position_range[k][0], r.position_range[k][1]);
        }
        let mut v = Vec3::zeros();
        for k in 0..3 {
            v[k] = rng.uniform(r.velocity_range[k][0], r.velocity_range[k][1]);
        }
        if r.attitude_cone > 0.0 {
            s.attitude = random_attitude_within(&mut rng, r.attitude_cone);
        }
        s.velocity = s.rotation().transpose() * v;
        let mut fault_rng = RngStream::keyed(&[self.master_seed, self.index, purpose::FAULTS, self.episode]);
        self.stuck_off = fault_rng
            .bernoulli(r.fault_probability)
            .then(|| fault_rng.below(self.task.thrusters.len()));
        self.state = s;
        self.steps = 0;
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn stuck_off(&self) -> Option<usize> {
        self.stuck_off
    }

    pub fn observe(&self) -> [f64; OBS_DIM] {
        self.task.observe(&self.task.setpoint(), &self.state)
    }

    /// Advances one physics step; the reward is evaluated on the state at the
    /// start of the step and the thrust applied over it.
    pub fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let task = &self.task;
        let mut u = task.action_to_thrust(action)?;
        if let Some(j) = self.stuck_off {
            u[j] = 0.0;
        }
        let reference = task.setpoint();
        let reward = tracking_reward(&(reference - self.state.position), &self.state.inertial_velocity(), &u);
        let wrench = task.thrusters.mix(&u)?;
        self.state = step(&self.state, &task.body, &wrench, task.dt)?;
        self.steps += 1;
        let distance = (reference - self.state.position).norm();
        let out_of_bounds = distance > task.bound;
        let terminal = out_of_bounds || self.steps >= task.episode_steps;
        let truncated = terminal && !out_of_bounds;
        if terminal {
            let final_obs = self.observe();
            self.episode += 1;
            self.reset_episode();
            Ok(EnvStep {
                obs: self.observe(),
                reward,
                terminal,
                truncated,
                final_obs: Some(final_obs),
                final_distance: Some(distance),
            })
        } else {
            Ok(EnvStep { obs: self.observe(), reward, terminal, truncated, final_obs: None, final_distance: None })
        }
    }
}

/// Batch step output, flattened row-major by environment.
#[derive(Debug, Clone, PartialEq)]
pub struct VecStep {
    pub obs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub truncated: Vec<bool>,
    pub final_obs: Vec<Option<[f64; OBS_DIM]>>,
    pub final_distance: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct VecEnv {
    pub cfg: VecEnvConfig,
    envs: Vec<SetpointEnv>,
}

/// Builds `n_envs` environments with initial states drawn from their own
/// streams.
pub fn vec_reset(cfg: &VecEnvConfig) -> Result<VecEnv> {
    cfg.validate()?;
    let task = Arc::new(cfg.task.clone());
    let randomization = Arc::new(cfg.randomization.clone());
    let envs = (0..cfg.n_envs)
        .map(|i| SetpointEnv::new(task.clone(), randomization.clone(), cfg.master_seed, i as u64))
        .collect();
    Ok(VecEnv { cfg: cfg.clone(), envs })
}

impl VecEnv {
    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    pub fn envs(&self) -> &[SetpointEnv] {
        &self.envs
    }

    pub fn observations(&self) -> Vec<f64> {
        self.envs.iter().flat_map(|e| e.observe()).collect()
    }

    /// Steps every environment with its row of `actions` (`n_envs × ACT_DIM`).
    pub fn vec_step(&mut self, actions: &[f64]) -> Result<VecStep> {
        if actions.len() != self.envs.len() * ACT_DIM {
            return Err(Error::invalid(format!(
                "actions length {} != n_envs·{ACT_DIM} = {}",
                actions.len(),
                self.envs.len() * ACT_DIM
            )));
        }
        let run = |(i, (env, a)): (usize, (&mut SetpointEnv, &[f64]))| {
            env.step(a).map_err(|e| Error::Env { env: i, source: Box::new(e) })
        };
        let results: Vec<Result<EnvStep>> = if self.cfg.parallel {
            self.envs.par_iter_mut().zip(actions.par_chunks(ACT_DIM)).enumerate().map(run).collect()
        } else {
            self.envs.iter_mut().zip(actions.chunks(ACT_DIM)).enumerate().map(run).collect()
        };
        let mut out = VecStep {
            obs: Vec::with_capacity(self.envs.len() * OBS_DIM),
            rewards: Vec::with_capacity(self.envs.len()),
            terminals: Vec::with_capacity(self.envs.len()),
            truncated: Vec::with_capacity(self.envs.len()),
            final_obs: Vec::with_capacity(self.envs.len()),
            final_distance: Vec::with_capacity(self.envs.len()),
        };
        for r in results {
            let s = r?;
            out.obs.extend_from_slice(&s.obs);
            out.rewards.push(s.reward);
            out.terminals.push(s.terminal);
            out.truncated.push(s.truncated);
            out.final_obs.push(s.final_obs);
            out.final_distance.push(s.final_distance);
        }
        Ok(out)
    }

    /// Steps every environment with uniform random actions drawn from its own
    /// stream.
    fn step_random(&mut self, rngs: &mut [RngStream]) -> Result<()> {
        let run = |(i, (env, rng)): (usize, (&mut SetpointEnv, &mut RngStream))| {
            let a: [f64; ACT_DIM] = std::array::from_fn(|_| rng.uniform(-1.0, 1.0));
            env.step(&a).map(|_| ()).map_err(|e| Error::Env { env: i, source: Box::new(e) })
        };
        if self.cfg.parallel {
            self.envs.par_iter_mut().zip(rngs.par_iter_mut()).enumerate().try_for_each(run)
        } else {
            self.envs.iter_mut().zip(rngs.iter_mut()).enumerate().try_for_each(run)
        }
    }
}

/// Stored transitions for `n_envs` environments over `steps` steps, indexed
/// `[step][env]` in the flattened vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    /// Observation after the last step, per environment.
    pub final_observations: Vec<f64>,
    /// Flat `[step][env]` index and pre-reset observation of every
    /// step-limit truncation.
    pub truncations: Vec<(usize, [f64; OBS_DIM])>,
    /// Final distances of the episodes that ended during the rollout.
    pub episode_final_distances: Vec<f64>,
}

/// Collects `steps` batch steps with actions from `policy(observations)`.
pub fn collect_rollout(
    env: &mut VecEnv,
    steps: usize,
    mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>,
) -> Result<RolloutBatch> {
    let n = env.n_envs();
    let mut batch = RolloutBatch {
        n_envs: n,
        steps,
        observations: Vec::with_capacity(steps * n * OBS_DIM),
        actions: Vec::with_capacity(steps * n * ACT_DIM),
        rewards: Vec::with_capacity(steps * n),
        terminals: Vec::with_capacity(steps * n),
        final_observations: vec![],
        truncations: vec![],
        episode_final_distances: vec![],
    };
    let mut obs = env.observations();
    for t in 0..steps {
        let actions = policy(&obs)?;
        let out = env.vec_step(&actions)?;
        batch.observations.extend_from_slice(&obs);
        batch.actions.extend_from_slice(&actions);
        batch.rewards.extend_from_slice(&out.rewards);
        batch.terminals.extend_from_slice(&out.terminals);
        batch.episode_final_distances.extend(out.final_distance.iter().flatten());
        for (e, (trunc, fo)) in out.truncated.iter().zip(&out.final_obs).enumerate() {
            if let (true, Some(fo)) = (trunc, fo) {
                batch.truncations.push((t * n + e, *fo));
            }
        }
        obs = out.obs;
    }
    batch.final_observations = obs;
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_final_distance: f64,
}

/// Runs one episode per environment index `0..episodes` with the given
/// per-observation policy and averages return and final distance.
pub fn evaluate(
    task: &SetpointTask,
    randomization: &Randomization,
    episodes: usize,
    seed: u64,
    policy: &(dyn Fn(&[f64; OBS_DIM], &mut RngStream) -> Result<[f64; ACT_DIM]> + Sync),
) -> Result<EvalResult> {
    task.validate()?;
    randomization.validate()?;
    if episodes == 0 {
        return Ok(EvalResult { episodes: 0, mean_return: 0.0, mean_final_distance: 0.0 });
    }
    let task = Arc::new(task.clone());
    let randomization = Arc::new(randomization.clone());
    let master = RngStream::keyed(&[seed, purpose::EVAL]).next_u64();
    let results: Vec<Result<(f64, f64)>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut env = SetpointEnv::new(task.clone(), randomization.clone(), master, i as u64);
            let mut rng = RngStream::keyed(&[master, i as u64, purpose::POLICY]);
            let mut ret = 0.0;
            let mut obs = env.observe();
            loop {
                let a = policy(&obs, &mut rng)?;
                let s = env.step(&a).map_err(|e| Error::Env { env: i, source: Box::new(e) })?;
                ret += s.reward;
                if let Some(d) = s.final_distance {
                    return Ok((ret, d));
                }
                obs = s.obs;
            }
        })
        .collect();
    let (mut sum_ret, mut sum_dist) = (0.0, 0.0);
    for r in results {
        let (ret, d) = r?;
        sum_ret += ret;
        sum_dist += d;
    }
    let n = episodes as f64;
    Ok(EvalResult { episodes, mean_return: sum_ret / n, mean_final_distance: sum_dist / n })
}

/// Uniform random actions in `[−1, 1]`.
pub fn random_policy(_obs: &[f64; OBS_DIM], rng: &mut RngStream) -> Result<[f64; ACT_DIM]> {
    Ok(std::array::from_fn(|_| rng.uniform(-1.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_envs: usize,
    pub env_steps_per_s: f64,
    pub sim_s_per_s: f64,
    pub speedup: f64,
    pub parallel_efficiency: f64,
}

impl BenchReport {
    /// Fills the derived columns from measured throughput and the reference
    /// row `(n_ref, steps_per_s_ref)`.
    pub fn derive(n_envs: usize, env_steps_per_s: f64, dt: f64, reference: (usize, f64)) -> Self {
        let (n_ref, ref_rate) = reference;
        let speedup = env_steps_per_s / ref_rate;
        Self {
            n_envs,
            env_steps_per_s,
            sim_s_per_s: env_steps_per_s * dt,
            speedup,
            parallel_efficiency: speedup / (n_envs as f64 / n_ref as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Batch sizes; the first is the reference row.
    pub n_envs_list: Vec<usize>,
    pub steps: usize,
    pub dt: f64,
    pub warmup_episodes: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_envs_list: vec![128], steps: 512, dt: DEFAULT_DT, warmup_episodes: 1, seed: 0, parallel: true }
    }
}

/// Times headless random-action rollouts of `steps` steps per batch size.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchReport>> {
    if cfg.n_envs_list.is_empty() || cfg.n_envs_list.contains(&0) {
        return Err(Error::config("envs", "need a non-empty list of batch sizes >= 1"));
    }
    if cfg.steps == 0 {
        return Err(Error::config("steps", "must be >= 1"));
    }
    let mut reports: Vec<BenchReport> = Vec::with_capacity(cfg.n_envs_list.len());
    let mut reference = None;
    for &n in &cfg.n_envs_list {
        let venv_cfg = VecEnvConfig {
            n_envs: n,
            task: SetpointTask { dt: cfg.dt, episode_steps: cfg.steps, ..SetpointTask::default() },
            master_seed: cfg.seed,
            parallel: cfg.parallel,
            ..VecEnvConfig::default()
        };
        let mut env = vec_reset(&venv_cfg)?;
        let mut rngs: Vec<RngStream> =
            (0..n).map(|i| RngStream::keyed(&[cfg.seed, i as u64, purpose::BENCH_ACTIONS])).collect();
        for _ in 0..cfg.warmup_episodes * cfg.steps {
            env.step_random(&mut rngs)?;
        }
        let start = Instant::now();
        for _ in 0..cfg.steps {
            env.step_random(&mut rngs)?;
        }
        let elapsed = start.elapsed().as_secs_f64().max(1e-9);
        let rate = (n * cfg.steps) as f64 / elapsed;
        let reference = *reference.get_or_insert((n, rate));
        reports.push(BenchReport::derive(n, rate, cfg.dt, reference));
    }
    Ok(reports)
}

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("n_envs,env_steps_per_s,sim_s_per_s,speedup,parallel_eff\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n_envs, r.env_steps_per_s, r.sim_s_per_s, r.speedup, r.parallel_efficiency
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let task = SetpointTask { bound: 5.0, ..SetpointTask::default() };
        let rand = Randomization { position_range: [[0.0, 0.0]; 3], ..Randomization::default() };
        let mut env = SetpointEnv::new(Arc::new(task.clone()), Arc::new(rand), 0, 0);
        assert_eq!(env.step(&[0.0; 6]).unwrap().reward, 10.0);
        let rand = Randomization { position_range: [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]], ..Randomization::default() };
        let mut env = SetpointEnv::new(Arc::new(task), Arc::new(rand), 0, 0);
        assert_eq!(env.step(&[0.0; 6]).unwrap().reward, -1.0);
    }

    #[test]
    fn action_mapping_fires_groups() {
        let task = SetpointTask::default();
        let u = task.action_to_thrust(&[1.0, -1.0, 0.5, 2.0, 0.0, -0.3]).unwrap();
        let w = task.thrusters.mix(&u).unwrap();
        assert!((w.force - Vec3::new(0.8, -0.4, 0.0)).norm() < 1e-12);
        assert_eq!(w.torque, Vec3::zeros());
        assert!(task.action_to_thrust(&[0.0; 5]).is_err());
        assert!(task.action_to_thrust(&[f64::NAN; 6]).is_err());
    }

    #[test]
    fn zero_width_ranges_give_base_state() {
        let cfg = VecEnvConfig {
            n_envs: 4,
            randomization: Randomization { position_range: [[0.0, 0.0]; 3], ..Randomization::default() },
            ..VecEnvConfig::default()
        };
        let env = vec_reset(&cfg).unwrap();
        for e in env.envs() {
            assert_eq!(*e.state(), State::default());
        }
    }

    #[test]
    fn bench_identities_on_fixture_rows() {
        let r = BenchReport::derive(128, 3.97e3, 0.02, (128, 3.97e3));
        assert!((r.sim_s_per_s - 79.4).abs() < 1e-9);
        assert_eq!(r.speedup, 1.0);
        assert_eq!(r.parallel_efficiency, 1.0);
        let r = BenchReport::derive(2048, 11.0 * 3.97e3, 0.02, (128, 3.97e3));
        assert!((r.parallel_efficiency - 0.6875).abs() < 1e-12);
    }
}
