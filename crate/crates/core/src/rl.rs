//! On-policy actor-critic training over the batched setpoint task: a
//! hand-rolled tanh MLP with reverse-mode gradients, GAE, clipped PPO (VPG as
//! the unclipped single-epoch limit), Adam, checksummed checkpoints and
//! deployment as a [`Controller`].

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlContext, ControlDiagnostics, ControlOutput, Controller};
use crate::error::{Error, Result};
use crate::rng::{purpose, RngStream};
use crate::vec_env::{
    collect_rollout, evaluate, random_policy, vec_reset, EvalResult, Randomization, SetpointTask, VecEnvConfig, ACT_DIM,
    OBS_DIM,
};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Samples per gradient chunk; fixed so the reduction order never depends on
/// the worker count.
const GRAD_CHUNK: usize = 64;

/// Fully connected network with tanh hidden layers and a linear output.
/// Parameters are stored flat, layer by layer: row-major `W` (out × in) then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; n] })
    }

    /// Weights drawn `N(0, 1/fan_in)`, the output layer scaled by
    /// `output_gain`, zero biases.
    pub fn init(sizes: &[usize], output_gain: f64, rng: &mut RngStream) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut at = 0;
        let n_layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let gain = if l + 1 == n_layers { output_gain } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            for p in &mut m.params[at..at + fan_in * fan_out] {
                *p = rng.normal(std);
            }
            at += fan_in * fan_out + fan_out;
        }
        Ok(m)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let m = Self::zeros(sizes)?;
        if params.len() != m.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters for sizes {sizes:?}, found {}",
                m.params.len(),
                params.len()
            )));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Forward pass keeping every layer's output; `acts[0]` is the input and
    /// the last entry the network output.
    pub fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(x.len(), self.input_dim());
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        let mut at = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[at..at + n_in * n_out];
            let b = &self.params[at + n_in * n_out..at + n_in * n_out + n_out];
            let input = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l + 1 < n_layers { z.tanh() } else { z });
            }
            acts.push(out);
            at += n_in * n_out + n_out;
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
    pub fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut at = 0;
        for l in 0..n_layers {
            offsets.push(at);
            at += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let at = offsets[l];
            let input = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    let g = &mut grad[at + o * n_in..at + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                grad[at + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[at..at + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += wi * d;
                        }
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }
}

/// Gaussian actor (mean network plus state-independent log-std) and critic.
/// Flat layout: `[actor | log_std | critic]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub actor: Mlp,
    pub log_std: Vec<f64>,
    pub critic: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

impl MlpParams {
    pub fn init(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut RngStream) -> Result<Self> {
        let sizes = |out: usize| [&[obs_dim][..], hidden, &[out]].concat();
        Ok(Self {
            actor: Mlp::init(&sizes(act_dim), 0.01, rng)?,
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); act_dim],
            critic: Mlp::init(&sizes(1), 1.0, rng)?,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.actor.n_params() + self.log_std.len() + self.critic.n_params()
    }

    /// Number of leading flat parameters that belong to the policy.
    pub fn n_policy_params(&self) -> usize {
        self.actor.n_params() + self.log_std.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.actor.params[..], &self.log_std, &self.critic.params].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let (a, rest) = flat.split_at(self.actor.n_params());
        let (s, c) = rest.split_at(self.log_std.len());
        self.actor.params.copy_from_slice(a);
        self.log_std.copy_from_slice(s);
        self.critic.params.copy_from_slice(c);
    }

    fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    pub fn policy_forward(&self, obs: &[f64]) -> Result<PolicyOutput> {
        if obs.len() != self.obs_dim() {
            return Err(Error::invalid(format!("observation length {} != {}", obs.len(), self.obs_dim())));
        }
        let mean = self.actor.forward(obs);
        let value = self.critic.forward(obs)[0];
        if !value.is_finite() || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::ParameterCorruption);
        }
        Ok(PolicyOutput { mean, log_std: self.clamped_log_std(), value })
    }

    /// Mean action clamped to the action box.
    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.policy_forward(obs)?.mean.iter().map(|m| m.clamp(-1.0, 1.0)).collect())
    }
}

/// Diagonal-Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - 0.5 * LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 * (1.0 + LN_2PI)).sum()
}

/// Generalized advantage estimation over one environment's sequence:
/// `δ_t = r_t + γ v_{t+1}(1−d_t) − v_t`, `A_t = δ_t + γλ(1−d_t) A_{t+1}`, with
/// `v_T = bootstrap`.
pub fn compute_gae(rewards: &[f64], values: &[f64], terminals: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && terminals.len() == n, "gae inputs must be aligned");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub n_envs: usize,
    /// Steps per environment per rollout.
    pub rollout_steps: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    /// Factor applied to rewards before value fitting and GAE.
    pub reward_scale: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Evaluate and checkpoint every this many iterations (0 disables).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
    pub task: SetpointTask,
    pub randomization: Randomization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            n_envs: 128,
            rollout_steps: 512,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 1024,
            learning_rate: 1e-3,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            reward_scale: 0.1,
            hidden: vec![64, 64],
            init_log_std: -0.5,
            eval_interval: 1,
            eval_episodes: 64,
            checkpoint_dir: None,
            seed: 0,
            task: SetpointTask::default(),
            randomization: Randomization::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("gamma", self.gamma > 0.0 && self.gamma <= 1.0),
            ("lambda", (0.0..=1.0).contains(&self.lambda)),
            ("clip", self.clip > 0.0),
            ("learning_rate", self.learning_rate > 0.0 && self.learning_rate.is_finite()),
            ("n_envs", self.n_envs >= 1),
            ("rollout_steps", self.rollout_steps >= 1),
            ("minibatch", self.minibatch >= 1),
            ("max_grad_norm", self.max_grad_norm > 0.0),
            ("reward_scale", self.reward_scale > 0.0 && self.reward_scale.is_finite()),
            ("vf_coef", self.vf_coef >= 0.0),
            ("ent_coef", self.ent_coef >= 0.0),
            ("hidden", !self.hidden.is_empty() && !self.hidden.contains(&0)),
        ];
        if let Some((field, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::config(*field, "out of range"));
        }
        self.task.validate()?;
        self.randomization.validate()
    }

    pub fn batch_steps(&self) -> usize {
        self.n_envs * self.rollout_steps
    }

    pub fn iterations(&self) -> usize {
        self.total_steps / self.batch_steps()
    }
}

/// One batch of transitions, flattened `[step][env]`, with the quantities
/// needed by the update.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub steps: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Observation following the last step, per environment.
    pub final_observations: Vec<f64>,
    /// Step-limit truncations; their value is bootstrapped from the
    /// pre-reset observation.
    pub truncations: Vec<(usize, [f64; OBS_DIM])>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.n_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs(&self, i: usize) -> &[f64] {
        &self.observations[i * OBS_DIM..(i + 1) * OBS_DIM]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * ACT_DIM..(i + 1) * ACT_DIM]
    }

    /// Re-evaluates values with the current critic, recomputes GAE per
    /// environment and normalizes advantages to zero mean and unit std.
    pub fn refresh(&mut self, params: &MlpParams, gamma: f64, lambda: f64) {
        let values: Vec<f64> =
            (0..self.len()).into_par_iter().map(|i| params.critic.forward(self.obs(i))[0]).collect();
        self.values = values;
        let (n, t_len) = (self.n_envs, self.steps);
        let mut rewards = self.rewards.clone();
        for (i, obs) in &self.truncations {
            rewards[*i] += gamma * params.critic.forward(obs)[0];
        }
        self.advantages = vec![0.0; self.len()];
        self.returns = vec![0.0; self.len()];
        for e in 0..n {
            let idx = |t: usize| t * n + e;
            let r: Vec<f64> = (0..t_len).map(|t| rewards[idx(t)]).collect();
            let v: Vec<f64> = (0..t_len).map(|t| self.values[idx(t)]).collect();
            let d: Vec<bool> = (0..t_len).map(|t| self.terminals[idx(t)]).collect();
            let bootstrap = params.critic.forward(&self.final_observations[e * OBS_DIM..(e + 1) * OBS_DIM])[0];
            let (adv, ret) = compute_gae(&r, &v, &d, bootstrap, gamma, lambda);
            for t in 0..t_len {
                self.advantages[idx(t)] = adv[t];
                self.returns[idx(t)] = ret[t];
            }
        }
        normalize(&mut self.advantages);
    }
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Set when a non-finite loss aborted the update.
    pub aborted: bool,
}

/// Loss terms and gradient of the clipped PPO objective on a set of samples:
/// `L = −mean(min(ρA, clip(ρ, 1−ε, 1+ε)A)) + c_v·mean((V − R)²) − c_e·H`.
pub fn ppo_loss_grad(params: &MlpParams, buffer: &RolloutBuffer, indices: &[usize], clip: f64, vf_coef: f64, ent_coef: f64) -> (Vec<f64>, UpdateMetrics) {
    let n_actor = params.actor.n_params();
    let n_policy = params.n_policy_params();
    let log_std = params.clamped_log_std();
    let inv_n = 1.0 / indices.len().max(1) as f64;
    let chunk_results: Vec<(Vec<f64>, [f64; 4])> = indices
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; params.n_params()];
            let mut sums = [0.0; 4]; // surrogate, value loss, kl, clipped count
            for &i in chunk {
                let obs = buffer.obs(i);
                let a = buffer.action(i);
                let adv = buffer.advantages[i];
                let acts = params.actor.forward_cached(obs);
                let mean = acts.last().unwrap();
                let logp = gaussian_log_prob(mean, &log_std, a);
                let ratio = (logp - buffer.log_probs[i]).exp();
                let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
                let (s1, s2) = (ratio * adv, clipped * adv);
                sums[0] -= s1.min(s2);
                sums[2] += buffer.log_probs[i] - logp;
                if (ratio - 1.0).abs() > clip {
                    sums[3] += 1.0;
                }
                // dL/dlogp = −A·ρ when the unclipped branch is active.
                let g_logp = if s1 <= s2 { -adv * ratio * inv_n } else { 0.0 };
                if g_logp != 0.0 {
                    let mut g_mean = vec![0.0; mean.len()];
                    for k in 0..mean.len() {
                        let var = (2.0 * log_std[k]).exp();
                        let diff = a[k] - mean[k];
                        g_mean[k] = g_logp * diff / var;
                        if params.log_std[k] > LOG_STD_MIN && params.log_std[k] < LOG_STD_MAX {
                            grad[n_actor + k] += g_logp * (diff * diff / var - 1.0);
                        }
                    }
                    params.actor.backward(&acts, &g_mean, &mut grad[..n_actor]);
                }
                let c_acts = params.critic.forward_cached(obs);
                let v = c_acts.last().unwrap()[0];
                let err = v - buffer.returns[i];
                sums[1] += err * err;
                if vf_coef > 0.0 {
                    params.critic.backward(&c_acts, &[2.0 * vf_coef * err * inv_n], &mut grad[n_policy..]);
                }
            }
            (grad, sums)
        })
        .collect();
    let mut grad = vec![0.0; params.n_params()];
    let mut sums = [0.0; 4];
    for (g, s) in chunk_results {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        for k in 0..4 {
            sums[k] += s[k];
        }
    }
    let entropy = gaussian_entropy(&log_std);
    if ent_coef > 0.0 {
        for k in 0..log_std.len() {
            if params.log_std[k] > LOG_STD_MIN && params.log_std[k] < LOG_STD_MAX {
                grad[n_actor + k] -= ent_coef;
            }
        }
    }
    let metrics = UpdateMetrics {
        surrogate_loss: sums[0] * inv_n,
        value_loss: sums[1] * inv_n,
        entropy,
        approx_kl: sums[2] * inv_n,
        clip_fraction: sums[3] * inv_n,
        aborted: false,
    };
    (grad, metrics)
}

/// Gradient of the vanilla policy-gradient loss `−mean(A·log π(a|o))` over the
/// policy parameters.
pub fn vpg_grad(params: &MlpParams, buffer: &RolloutBuffer, indices: &[usize]) -> Vec<f64> {
    let n_actor = params.actor.n_params();
    let log_std = params.clamped_log_std();
    let inv_n = 1.0 / indices.len().max(1) as f64;
    let mut grad = vec![0.0; params.n_policy_params()];
    for &i in indices {
        let obs = buffer.obs(i);
        let a = buffer.action(i);
        let acts = params.actor.forward_cached(obs);
        let mean = acts.last().unwrap();
        let w = -buffer.advantages[i] * inv_n;
        let g_mean: Vec<f64> = (0..mean.len()).map(|k| w * (a[k] - mean[k]) / (2.0 * log_std[k]).exp()).collect();
        for k in 0..mean.len() {
            let z2 = (a[k] - mean[k]).powi(2) / (2.0 * log_std[k]).exp();
            grad[n_actor + k] += w * (z2 - 1.0);
        }
        params.actor.backward(&acts, &g_mean, &mut grad[..n_actor]);
    }
    grad
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scales `grad` so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Runs `epochs` passes of shuffled minibatch steps. Advantages are refreshed
/// with the current critic before every epoch. A non-finite loss or gradient
/// restores the parameters and optimizer held on entry.
pub fn ppo_update(
    params: &MlpParams,
    opt: &mut Adam,
    buffer: &mut RolloutBuffer,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> (MlpParams, UpdateMetrics) {
    let (start_params, start_opt) = (params.clone(), opt.clone());
    let mut current = params.clone();
    let mut flat = current.flat();
    let mut total = UpdateMetrics::default();
    let mut count = 0.0;
    let n = buffer.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        buffer.refresh(&current, cfg.gamma, cfg.lambda);
        for i in (1..n).rev() {
            order.swap(i, rng.below(i + 1));
        }
        for mb in order.chunks(cfg.minibatch) {
            let (mut grad, m) = ppo_loss_grad(&current, buffer, mb, cfg.clip, cfg.vf_coef, cfg.ent_coef);
            let loss = m.surrogate_loss + cfg.vf_coef * m.value_loss - cfg.ent_coef * m.entropy;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                *opt = start_opt;
                return (start_params, UpdateMetrics { aborted: true, ..m });
            }
            let (g_policy, g_critic) = grad.split_at_mut(current.n_policy_params());
            clip_grad_norm(g_policy, cfg.max_grad_norm);
            clip_grad_norm(g_critic, cfg.max_grad_norm);
            opt.step(&mut flat, &grad);
            current.set_flat(&flat);
            total.surrogate_loss += m.surrogate_loss;
            total.value_loss += m.value_loss;
            total.entropy += m.entropy;
            total.approx_kl += m.approx_kl;
            total.clip_fraction += m.clip_fraction;
            count += 1.0;
        }
    }
    if count > 0.0 {
        total.surrogate_loss /= count;
        total.value_loss /= count;
        total.entropy /= count;
        total.approx_kl /= count;
        total.clip_fraction /= count;
    }
    (current, total)
}

/// Per-environment policy sampling with the environment's own stream.
pub fn sample_actions(params: &MlpParams, obs: &[f64], rngs: &mut [RngStream]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let outs: Vec<Result<(Vec<f64>, f64, f64)>> = obs
        .par_chunks(OBS_DIM)
        .zip(rngs.par_iter_mut())
        .map(|(o, rng)| {
            let p = params.policy_forward(o)?;
            let a: Vec<f64> = p.mean.iter().zip(&p.log_std).map(|(m, s)| m + s.exp() * rng.standard_normal()).collect();
            let logp = gaussian_log_prob(&p.mean, &p.log_std, &a);
            Ok((a, logp, p.value))
        })
        .collect();
    let mut actions = Vec::with_capacity(obs.len());
    let mut logps = Vec::with_capacity(rngs.len());
    let mut values = Vec::with_capacity(rngs.len());
    for o in outs {
        let (a, lp, v) = o?;
        actions.extend(a);
        logps.push(lp);
        values.push(v);
    }
    Ok((actions, logps, values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub env_steps: usize,
    /// Mean undiscounted return of episodes completed in the rollout.
    pub mean_return: f64,
    pub mean_final_distance: f64,
    /// Deterministic-policy evaluation, when run this iteration.
    pub eval_final_distance: Option<f64>,
    pub metrics: UpdateMetrics,
}

pub fn curve_csv(curve: &[CurveRow]) -> String {
    let mut out = String::from(
        "iteration,env_steps,mean_return,mean_final_distance,eval_final_distance,surrogate_loss,value_loss,entropy,approx_kl,clip_fraction,aborted\n",
    );
    for r in curve {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iteration,
            r.env_steps,
            r.mean_return,
            r.mean_final_distance,
            r.eval_final_distance.map_or(String::new(), |d| d.to_string()),
            m.surrogate_loss,
            m.value_loss,
            m.entropy,
            m.approx_kl,
            m.clip_fraction,
            m.aborted as u8
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub curve: Vec<CurveRow>,
    /// Checkpoints written, oldest first; the last is the final one.
    pub checkpoints: Vec<PathBuf>,
}

fn mean_episode_return(batch_rewards: &[f64], terminals: &[bool], n_envs: usize) -> f64 {
    let mut acc = vec![0.0; n_envs];
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (r, d)) in batch_rewards.iter().zip(terminals).enumerate() {
        let e = i % n_envs;
        acc[e] += r;
        if *d {
            sum += acc[e];
            count += 1;
            acc[e] = 0.0;
        }
    }
    if count == 0 { 0.0 } else { sum / count as f64 }
}

/// Deterministic mean-action evaluation on `episodes` seeded episodes.
pub fn evaluate_policy(params: &MlpParams, cfg: &TrainConfig, episodes: usize) -> Result<EvalResult> {
    let policy = |o: &[f64; OBS_DIM], _rng: &mut RngStream| -> Result<[f64; ACT_DIM]> {
        let a = params.deterministic_action(o)?;
        Ok(std::array::from_fn(|k| a[k]))
    };
    evaluate(&cfg.task, &cfg.randomization, episodes, cfg.seed, &policy)
}

/// Random-policy baseline on the same evaluation episodes.
pub fn random_baseline(cfg: &TrainConfig, episodes: usize) -> Result<EvalResult> {
    evaluate(&cfg.task, &cfg.randomization, episodes, cfg.seed, &random_policy)
}

/// Alternates rollout collection and PPO updates for `total_steps / (n_envs ·
/// rollout_steps)` iterations. Checkpoints go to `checkpoint_dir` every
/// `eval_interval` iterations and at the end.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut params = MlpParams::init(OBS_DIM, ACT_DIM, &cfg.hidden, cfg.init_log_std, &mut RngStream::keyed(&[seed, purpose::INIT_PARAMS]))?;
    let mut opt = Adam::new(params.n_params(), cfg.learning_rate);
    let mut env = vec_reset(&VecEnvConfig {
        n_envs: cfg.n_envs,
        task: cfg.task.clone(),
        randomization: cfg.randomization.clone(),
        master_seed: RngStream::keyed(&[seed, purpose::ENV]).next_u64(),
        parallel: true,
    })?;
    let mut policy_rngs: Vec<RngStream> =
        (0..cfg.n_envs).map(|i| RngStream::keyed(&[seed, i as u64, purpose::POLICY])).collect();
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let wrap = |iteration: usize, e: Error| Error::Step { step: iteration, source: Box::new(e) };
    for it in 0..cfg.iterations() {
        let mut log_probs = Vec::with_capacity(cfg.batch_steps());
        let mut values = Vec::with_capacity(cfg.batch_steps());
        let batch = collect_rollout(&mut env, cfg.rollout_steps, |obs| {
            let (a, lp, v) = sample_actions(&params, obs, &mut policy_rngs)?;
            log_probs.extend(lp);
            values.extend(v);
            Ok(a)
        })
        .map_err(|e| wrap(it, e))?;
        let mean_return = mean_episode_return(&batch.rewards, &batch.terminals, cfg.n_envs);
        let finals = &batch.episode_final_distances;
        let mean_final_distance =
            if finals.is_empty() { 0.0 } else { finals.iter().sum::<f64>() / finals.len() as f64 };
        let mut buffer = RolloutBuffer {
            n_envs: cfg.n_envs,
            steps: cfg.rollout_steps,
            observations: batch.observations,
            actions: batch.actions,
            rewards: batch.rewards.iter().map(|r| r * cfg.reward_scale).collect(),
            terminals: batch.terminals,
            log_probs,
            values,
            final_observations: batch.final_observations,
            truncations: batch.truncations,
            advantages: vec![],
            returns: vec![],
        };
        let mut mb_rng = RngStream::keyed(&[seed, it as u64, purpose::MINIBATCH]);
        let (next, metrics) = ppo_update(&params, &mut opt, &mut buffer, cfg, &mut mb_rng);
        params = next;
        let last = it + 1 == cfg.iterations();
        let periodic = cfg.eval_interval > 0 && (it + 1) % cfg.eval_interval == 0;
        let eval_final_distance = if periodic || last {
            Some(evaluate_policy(&params, cfg, cfg.eval_episodes).map_err(|e| wrap(it, e))?.mean_final_distance)
        } else {
            None
        };
        if let (Some(dir), true, false) = (&cfg.checkpoint_dir, periodic, last) {
            let path = dir.join(format!("policy_iter{:04}.ffrl", it + 1));
            save_checkpoint(&path, &params, cfg)?;
            checkpoints.push(path);
        }
        curve.push(CurveRow {
            iteration: it + 1,
            env_steps: (it + 1) * cfg.batch_steps(),
            mean_return,
            mean_final_distance,
            eval_final_distance,
            metrics,
        });
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("policy.ffrl");
        save_checkpoint(&path, &params, cfg)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { params, curve, checkpoints })
}

const MAGIC: &[u8; 4] = b"FFRL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub actor_sizes: Vec<usize>,
    pub critic_sizes: Vec<usize>,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Task definition, including the observation scales used in training.
    pub task: SetpointTask,
    pub train: TrainConfig,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = {
        let mut s = path.as_os_str().to_owned();
        s.push(".tmp");
        PathBuf::from(s)
    };
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Binary layout, little-endian: `"FFRL"`, version `u32`, actor layer count
/// `u32` and sizes `u64`, critic layer count and sizes, parameter count `u64`,
/// parameters `f64` in flat order, then the SHA-256 of all preceding bytes.
pub fn encode_checkpoint(params: &MlpParams) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for sizes in [params.actor.sizes(), params.critic.sizes()] {
        b.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
        for s in sizes {
            b.extend_from_slice(&(*s as u64).to_le_bytes());
        }
    }
    let flat = params.flat();
    b.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for p in &flat {
        b.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<MlpParams> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 4 + 4 + 32 || &bytes[..4] != MAGIC {
        return Err(bad("not an FFRL checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (truncated or corrupted file)"));
    }
    let mut at = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(at..at + n).ok_or_else(|| bad("unexpected end of data"))?;
        at += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let mut sizes = [vec![], vec![]];
    for s in sizes.iter_mut() {
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count > 64 {
            return Err(bad("implausible layer count"));
        }
        for _ in 0..count {
            s.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
    }
    let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let raw = take(n.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    let flat: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if at != body.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    let [actor_sizes, critic_sizes] = sizes;
    let actor = Mlp::zeros(&actor_sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let critic = Mlp::zeros(&critic_sizes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let act_dim = actor.output_dim();
    let expected = actor.n_params() + act_dim + critic.n_params();
    if expected != n || critic.output_dim() != 1 || critic.input_dim() != actor.input_dim() {
        return Err(Error::Checkpoint(format!(
            "shape table inconsistent: actor {actor_sizes:?}, critic {critic_sizes:?}, expected {expected} parameters, found {n}"
        )));
    }
    let mut params = MlpParams { actor, log_std: vec![0.0; act_dim], critic };
    params.set_flat(&flat);
    Ok(params)
}

/// Writes the binary checkpoint and its JSON sidecar, each atomically.
pub fn save_checkpoint(path: &Path, params: &MlpParams, cfg: &TrainConfig) -> Result<()> {
    let bytes = encode_checkpoint(params);
    let sha = Sha256::digest(&bytes);
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        actor_sizes: params.actor.sizes().to_vec(),
        critic_sizes: params.critic.sizes().to_vec(),
        obs_dim: params.obs_dim(),
        act_dim: params.act_dim(),
        task: cfg.task.clone(),
        // The output location is not part of the policy's provenance.
        train: TrainConfig { checkpoint_dir: None, ..cfg.clone() },
        sha256: sha.iter().map(|b| format!("{b:02x}")).collect(),
    };
    write_atomic(path, &bytes)?;
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(MlpParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let params = decode_checkpoint(&bytes)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", side.display())))?;
    let sha: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    if meta.sha256 != sha {
        return Err(Error::Checkpoint("sidecar checksum does not match the binary".into()));
    }
    if meta.actor_sizes != params.actor.sizes() || meta.critic_sizes != params.critic.sizes() {
        return Err(Error::Checkpoint("sidecar shapes do not match the binary".into()));
    }
    Ok((params, meta))
}

/// Deployed mean-action policy.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub params: MlpParams,
    pub task: SetpointTask,
}

impl PolicyController {
    pub fn new(params: MlpParams, task: SetpointTask) -> Result<Self> {
        if params.obs_dim() != OBS_DIM || params.act_dim() != ACT_DIM {
            return Err(Error::Checkpoint(format!(
                "policy shape mismatch: expected obs {OBS_DIM} / act {ACT_DIM}, found obs {} / act {}",
                params.obs_dim(),
                params.act_dim()
            )));
        }
        task.validate()?;
        Ok(Self { params, task })
    }
}

impl Controller for PolicyController {
    fn name(&self) -> &'static str {
        "policy"
    }

    fn period(&self) -> f64 {
        self.task.dt
    }

    fn compute(&mut self, ctx: &ControlContext) -> Result<ControlOutput> {
        let sp = (ctx.reference)(ctx.t);
        let obs = self.task.observe(&sp.position, ctx.state);
        let a = self.params.deterministic_action(&obs)?;
        let u = self.task.action_to_thrust(&a)?;
        if u.len() != ctx.system.len() {
            return Err(Error::invalid(format!(
                "policy drives {} thrusters but the scenario has {}",
                u.len(),
                ctx.system.len()
            )));
        }
        let wrench_desired = ctx.system.mix(&u)?;
        Ok(ControlOutput { u, wrench_desired, diagnostics: ControlDiagnostics::default() })
    }
}

/// Loads a checkpoint as a controller with the training-time observation
/// scales.
pub fn deploy(path: &Path) -> Result<PolicyController> {
    let (params, meta) = load_checkpoint(path)?;
    if meta.obs_dim != OBS_DIM || meta.act_dim != ACT_DIM {
        return Err(Error::Checkpoint(format!(
            "checkpoint shape mismatch: expected obs {OBS_DIM} / act {ACT_DIM}, found obs {} / act {}",
            meta.obs_dim, meta.act_dim
        )));
    }
    PolicyController::new(params, meta.task)
}
