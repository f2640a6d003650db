//! Pose-tracking controllers: PD, sequential-linearization MPC, and MPC with
//! Gaussian-process residual accelerations.
//!
//! The MPC optimizes thruster commands directly. Each SQP round rolls the model
//! forward over the horizon, linearizes it in the 12-dimensional tangent space
//! with central differences, condenses the resulting quadratic program over the
//! commands and solves it with accelerated projected gradient on the box
//! `0 <= u <= u_max`. The model depends on commands only through the wrench
//! `B u`, so sensitivities are taken with respect to the six wrench components
//! and the Hessian is applied as `Bᵀ M B` without forming it.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use crate::actuation::ThrusterSystem;
use crate::error::{Error, Result};
use crate::gp::{GpHyper, GpModel};
use crate::rigid_body::{identity_quat, integrate_rk4_with_accel, quat_log, BodyParams, Quat, State, Tangent, Vec3, Wrench};

const FD_STEP: f64 = 1e-6;
const LINE_SEARCH_HALVINGS: usize = 10;

/// Full pose target; serialized with the same fields as [`State`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "State", into = "State")]
pub struct Setpoint {
    pub position: Vec3,
    pub attitude: Quat,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl Setpoint {
    pub fn hold(position: Vec3, attitude: Quat) -> Self {
        Self { position, attitude, velocity: Vec3::zeros(), angular_velocity: Vec3::zeros() }
    }
}

impl Default for Setpoint {
    fn default() -> Self {
        Self::hold(Vec3::zeros(), identity_quat())
    }
}

impl From<State> for Setpoint {
    fn from(s: State) -> Self {
        Self { position: s.position, attitude: s.attitude, velocity: s.velocity, angular_velocity: s.angular_velocity }
    }
}

impl From<Setpoint> for State {
    fn from(s: Setpoint) -> Self {
        State { position: s.position, attitude: s.attitude, velocity: s.velocity, angular_velocity: s.angular_velocity }
    }
}

/// Rotation vector of `q_ref⁻¹ ⊗ q`, taken the short way.
pub fn attitude_error(q: &Quat, q_ref: &Quat) -> Vec3 {
    quat_log(&(q_ref.conjugate() * q))
}

/// Stacked tracking error `[e_p, e_q, e_v, e_w]`.
pub fn tracking_error(state: &State, sp: &Setpoint) -> Tangent {
    let mut e = Tangent::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(state.position - sp.position));
    e.fixed_rows_mut::<3>(3).copy_from(&attitude_error(&state.attitude, &sp.attitude));
    e.fixed_rows_mut::<3>(6).copy_from(&(state.velocity - sp.velocity));
    e.fixed_rows_mut::<3>(9).copy_from(&(state.angular_velocity - sp.angular_velocity));
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp_p: f64,
    pub kd_v: f64,
    pub kp_q: f64,
    pub kd_w: f64,
}

impl Default for PdGains {
    /// Roughly critically damped for the default 8 kg body.
    fn default() -> Self {
        Self { kp_p: 2.0, kd_v: 8.0, kp_q: 0.1, kd_w: 0.25 }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kp_p", self.kp_p), ("kd_v", self.kd_v), ("kp_q", self.kp_q), ("kd_w", self.kd_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("controller.gains.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlDiagnostics {
    pub iterations: usize,
    pub cost: f64,
    /// Wall-clock solve time; never written to deterministic logs.
    #[serde(skip)]
    pub solve_time_s: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub wrench_desired: Wrench,
    pub diagnostics: ControlDiagnostics,
}

pub fn pd_wrench(state: &State, sp: &Setpoint, gains: &PdGains) -> Wrench {
    let rot = state.rotation();
    let force = rot.transpose() * (gains.kp_p * (sp.position - state.position)) + gains.kd_v * (sp.velocity - state.velocity);
    let torque = -gains.kp_q * attitude_error(&state.attitude, &sp.attitude)
        - gains.kd_w * (state.angular_velocity - sp.angular_velocity);
    Wrench::new(force, torque)
}

pub fn pd_control(state: &State, sp: &Setpoint, gains: &PdGains, system: &ThrusterSystem) -> ControlOutput {
    let start = Instant::now();
    let wrench = pd_wrench(state, sp, gains);
    ControlOutput {
        u: system.allocate(&wrench),
        wrench_desired: wrench,
        diagnostics: ControlDiagnostics { solve_time_s: start.elapsed().as_secs_f64(), ..Default::default() },
    }
}

/// Time-averaged L1 thrust: `(1/T) Σ ‖u_t‖₁ dt`.
pub fn control_effort(u_log: &[Vec<f64>], dt: f64) -> f64 {
    if u_log.is_empty() {
        return 0.0;
    }
    let total: f64 = u_log.iter().map(|u| u.iter().map(|x| x.abs()).sum::<f64>() * dt).sum();
    total / (u_log.len() as f64 * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt_c: f64,
    pub q_p: f64,
    pub q_q: f64,
    pub q_v: f64,
    pub q_w: f64,
    pub r_u: f64,
    pub max_iters: usize,
    /// SQP stops once a round lowers the cost by less than this.
    pub tol: f64,
    pub qp_max_iters: usize,
    /// Gradient-mapping tolerance of the inner QP.
    pub qp_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt_c: 0.1,
            q_p: 10.0,
            q_q: 5.0,
            q_v: 1.0,
            q_w: 1.0,
            r_u: 0.1,
            max_iters: 5,
            tol: 1e-3,
            qp_max_iters: 2000,
            qp_tol: 1e-4,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("controller.mpc.horizon", "must be >= 1"));
        }
        if !(self.dt_c > 0.0 && self.dt_c.is_finite()) {
            return Err(Error::config("controller.mpc.dt_c", "must be > 0"));
        }
        for (name, v) in [("q_p", self.q_p), ("q_q", self.q_q), ("q_v", self.q_v), ("q_w", self.q_w)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("controller.mpc.{name}"), "must be >= 0"));
            }
        }
        if !(self.r_u > 0.0 && self.r_u.is_finite()) {
            return Err(Error::config("controller.mpc.r_u", "must be > 0"));
        }
        if self.max_iters == 0 || self.qp_max_iters == 0 {
            return Err(Error::config("controller.mpc.max_iters", "must be >= 1"));
        }
        if !(self.tol >= 0.0) || !(self.qp_tol > 0.0) {
            return Err(Error::config("controller.mpc.tol", "tolerances must be non-negative"));
        }
        Ok(())
    }

    fn weights(&self) -> [f64; 12] {
        let mut w = [0.0; 12];
        for i in 0..3 {
            w[i] = self.q_p;
            w[3 + i] = self.q_q;
            w[6 + i] = self.q_v;
            w[9 + i] = self.q_w;
        }
        w
    }
}

/// Additive linear-acceleration residual: one scalar GP per body axis over the
/// features `[v_B, F_B / m]`.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    axes: [GpModel; 3],
}

impl ResidualModel {
    pub fn new(axes: [GpModel; 3]) -> Result<Self> {
        if axes.iter().any(|g| g.dim() != 6) {
            return Err(Error::invalid("residual GPs take 6 features [v_B, F/m]"));
        }
        Ok(Self { axes })
    }

    pub fn features(velocity: &Vec3, force_over_mass: &Vec3) -> Vec<f64> {
        velocity.iter().chain(force_over_mass.iter()).copied().collect()
    }

    /// Fits the three axes on `(state, wrench, observed_residual)` samples,
    /// with features formed using the model mass.
    pub fn fit(samples: &[(State, Wrench, Vec3)], model_mass: f64, hyper: GpHyper) -> Result<Self> {
        let inputs: Vec<Vec<f64>> = samples
            .iter()
            .map(|(s, w, _)| Self::features(&s.velocity, &(w.force / model_mass)))
            .collect();
        let fit_axis = |k: usize| {
            let targets: Vec<f64> = samples.iter().map(|(_, _, r)| r[k]).collect();
            GpModel::fit(&inputs, &targets, hyper.clone())
        };
        Self::new([fit_axis(0)?, fit_axis(1)?, fit_axis(2)?])
    }

    pub fn accel(&self, velocity: &Vec3, force_over_mass: &Vec3) -> Vec3 {
        let x = Self::features(velocity, force_over_mass);
        Vec3::from_fn(|k, _| self.axes[k].mean(&x).expect("feature dimension checked at construction"))
    }
}

/// Discrete prediction model used by the MPC: one RK4 step of `dt_c`.
#[derive(Clone, Copy)]
pub struct MpcModel<'a> {
    pub body: &'a BodyParams,
    pub residual: Option<&'a ResidualModel>,
    pub dt: f64,
}

impl MpcModel<'_> {
    pub fn propagate(&self, x: &State, w: &Wrench) -> State {
        match self.residual {
            None => integrate_rk4_with_accel(x, self.body, w, self.dt, |_| Vec3::zeros()),
            Some(res) => {
                let fm = w.force / self.body.mass();
                integrate_rk4_with_accel(x, self.body, w, self.dt, |v| res.accel(v, &fm))
            }
        }
    }
}

/// Minimizes `½ xᵀ P x + cᵀ x` over `0 <= x <= hi` with FISTA and adaptive
/// restart. `apply` writes `P x` into its second argument.
pub fn solve_box_qp(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    c: &[f64],
    hi: &[f64],
    x0: &[f64],
    lipschitz: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<f64>, usize)> {
    let n = c.len();
    let proj = |v: f64, k: usize| v.clamp(0.0, hi[k]);
    let mut x: Vec<f64> = x0.iter().enumerate().map(|(k, v)| proj(*v, k)).collect();
    let mut y = x.clone();
    let mut g = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut t: f64 = 1.0;
    for it in 1..=max_iters {
        apply(&y, &mut g);
        let mut gap: f64 = 0.0;
        for k in 0..n {
            x_new[k] = proj(y[k] - (g[k] + c[k]) / lipschitz, k);
            gap = gap.max((x_new[k] - y[k]).abs());
        }
        if !gap.is_finite() {
            return Err(Error::Solver("MPC QP diverged".into()));
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let restart: f64 = (0..n).map(|k| (y[k] - x_new[k]) * (x_new[k] - x[k])).sum();
        if restart > 0.0 {
            t = 1.0;
            y.copy_from_slice(&x_new);
        } else {
            let beta = (t - 1.0) / t_new;
            for k in 0..n {
                y[k] = x_new[k] + beta * (x_new[k] - x[k]);
            }
            t = t_new;
        }
        std::mem::swap(&mut x, &mut x_new);
        if gap * lipschitz <= tol {
            return Ok((x, it));
        }
    }
    Ok((x, max_iters))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// `H × n_u` commands, stage-major.
    pub plan: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub qp_iterations: usize,
}

fn padded_reference(reference: &[Setpoint], horizon: usize) -> Result<Vec<Setpoint>> {
    let last = *reference.last().ok_or_else(|| Error::invalid("MPC reference is empty"))?;
    Ok((0..horizon).map(|k| *reference.get(k).unwrap_or(&last)).collect())
}

struct Horizon<'a> {
    cfg: &'a MpcConfig,
    model: MpcModel<'a>,
    system: &'a ThrusterSystem,
    reference: Vec<Setpoint>,
    weights: [f64; 12],
}

impl Horizon<'_> {
    fn n_u(&self) -> usize {
        self.system.len()
    }

    fn wrenches(&self, plan: &[f64]) -> Vec<Wrench> {
        plan.chunks(self.n_u()).map(|u| self.system.mix_unchecked(u)).collect()
    }

    fn rollout(&self, x0: &State, wrenches: &[Wrench]) -> Vec<State> {
        let mut xs = Vec::with_capacity(wrenches.len() + 1);
        xs.push(*x0);
        for w in wrenches {
            let next = self.model.propagate(xs.last().expect("non-empty"), w);
            xs.push(next);
        }
        xs
    }

    fn cost(&self, xs: &[State], plan: &[f64]) -> f64 {
        let track: f64 = xs[1..]
            .iter()
            .zip(&self.reference)
            .map(|(x, sp)| {
                let e = tracking_error(x, sp);
                (0..12).map(|i| self.weights[i] * e[i] * e[i]).sum::<f64>()
            })
            .sum();
        track + self.cfg.r_u * plan.iter().map(|u| u * u).sum::<f64>()
    }

    /// Sensitivity `S` of the stacked weighted-error vector to the stacked
    /// wrenches, plus the nominal errors.
    fn linearize(&self, xs: &[State], wrenches: &[Wrench]) -> (DMatrix<f64>, DVector<f64>) {
        let h = self.cfg.horizon;
        let mut a_mats = Vec::with_capacity(h);
        let mut g_mats = Vec::with_capacity(h);
        for k in 0..h {
            let base = &xs[k + 1];
            let mut a = SMatrix::<f64, 12, 12>::zeros();
            for i in 0..12 {
                let d = Tangent::ith(i, FD_STEP);
                let plus = self.model.propagate(&xs[k].retract(&d), &wrenches[k]);
                let minus = self.model.propagate(&xs[k].retract(&-d), &wrenches[k]);
                let col = (base.local_difference(&plus) - base.local_difference(&minus)) / (2.0 * FD_STEP);
                a.set_column(i, &col);
            }
            let mut g = SMatrix::<f64, 12, 6>::zeros();
            for i in 0..6 {
                let mut dw = [0.0; 6];
                dw[i] = FD_STEP;
                let dw = Wrench::from_slice(&dw);
                let plus = self.model.propagate(&xs[k], &(wrenches[k] + dw));
                let minus = self.model.propagate(&xs[k], &(wrenches[k] - dw));
                let col = (base.local_difference(&plus) - base.local_difference(&minus)) / (2.0 * FD_STEP);
                g.set_column(i, &col);
            }
            a_mats.push(a);
            g_mats.push(g);
        }
        let mut e_mats = Vec::with_capacity(h);
        let mut e_bar = DVector::zeros(12 * h);
        for k in 1..=h {
            let sp = &self.reference[k - 1];
            let e0 = tracking_error(&xs[k], sp);
            let mut em = SMatrix::<f64, 12, 12>::zeros();
            for i in 0..12 {
                let d = Tangent::ith(i, FD_STEP);
                let col = (tracking_error(&xs[k].retract(&d), sp) - tracking_error(&xs[k].retract(&-d), sp)) / (2.0 * FD_STEP);
                em.set_column(i, &col);
            }
            for i in 0..12 {
                e_bar[12 * (k - 1) + i] = self.weights[i].sqrt() * e0[i];
            }
            e_mats.push(em);
        }
        // block (k, j) = W^½ E_k A_{k-1} ... A_{j+1} G_j for j < k
        let mut s = DMatrix::zeros(12 * h, 6 * h);
        for j in 0..h {
            let mut p: SMatrix<f64, 12, 6> = g_mats[j];
            for k in (j + 1)..=h {
                let block = e_mats[k - 1] * p;
                for r in 0..12 {
                    let wr = self.weights[r].sqrt();
                    for c in 0..6 {
                        s[(12 * (k - 1) + r, 6 * j + c)] = wr * block[(r, c)];
                    }
                }
                if k < h {
                    p = a_mats[k] * p;
                }
            }
        }
        (s, e_bar)
    }
}

fn power_iteration_max(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    let mut lambda = 0.0;
    for _ in 0..60 {
        let norm = v.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v /= norm;
        let mv = m * &v;
        lambda = v.dot(&mv);
        v = mv;
    }
    lambda
}

/// One receding-horizon solve from `state`; `warm` is an optional initial
/// plan of length `H × n_u`.
pub fn mpc_solve(
    state: &State,
    reference: &[Setpoint],
    cfg: &MpcConfig,
    body: &BodyParams,
    system: &ThrusterSystem,
    residual: Option<&ResidualModel>,
    warm: Option<&[f64]>,
) -> Result<MpcSolution> {
    cfg.validate()?;
    let hz = Horizon {
        cfg,
        model: MpcModel { body, residual, dt: cfg.dt_c },
        system,
        reference: padded_reference(reference, cfg.horizon)?,
        weights: cfg.weights(),
    };
    let n_u = hz.n_u();
    let n = cfg.horizon * n_u;
    let hi: Vec<f64> = (0..cfg.horizon).flat_map(|_| system.u_max().iter().copied()).collect();
    let mut plan: Vec<f64> = match warm {
        Some(w) if w.len() == n => w.iter().zip(&hi).map(|(u, m)| u.clamp(0.0, *m)).collect(),
        _ => vec![0.0; n],
    };
    let mut wrenches = hz.wrenches(&plan);
    let mut xs = hz.rollout(state, &wrenches);
    let mut cost = hz.cost(&xs, &plan);
    if !cost.is_finite() {
        return Err(Error::Solver("MPC rollout is non-finite".into()));
    }
    let b = system.mixer();
    let mut iterations = 0;
    let mut qp_iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let (s, e_bar) = hz.linearize(&xs, &wrenches);
        let m = s.transpose() * &s;
        let g_w = s.transpose() * &e_bar;
        let lipschitz = 2.0 * (1.1 * power_iteration_max(&m) * system.mixer_norm_sq() + cfg.r_u);

        // flat buffers keep the inner loop allocation-free
        let nw = 6 * cfg.horizon;
        let m_flat = m.as_slice();
        let to_wrench = |u: &[f64], w: &mut [f64]| {
            for k in 0..cfg.horizon {
                let uk = &u[k * n_u..(k + 1) * n_u];
                for r in 0..6 {
                    w[6 * k + r] = (0..n_u).map(|j| b[(r, j)] * uk[j]).sum();
                }
            }
        };
        let from_wrench = |w: &[f64], out: &mut [f64]| {
            for k in 0..cfg.horizon {
                for j in 0..n_u {
                    out[k * n_u + j] = (0..6).map(|r| b[(r, j)] * w[6 * k + r]).sum();
                }
            }
        };
        let sym_mul = |x: &[f64], y: &mut [f64]| {
            for (i, yi) in y.iter_mut().enumerate() {
                let row = &m_flat[i * nw..(i + 1) * nw];
                *yi = row.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        };
        let mut wbuf = vec![0.0; nw];
        let mut ybuf = vec![0.0; nw];
        let mut c = vec![0.0; n];
        to_wrench(&plan, &mut wbuf);
        sym_mul(&wbuf, &mut ybuf);
        for i in 0..nw {
            ybuf[i] = 2.0 * (g_w[i] - ybuf[i]);
        }
        from_wrench(&ybuf, &mut c);
        let apply = |u: &[f64], out: &mut [f64]| {
            to_wrench(u, &mut wbuf);
            sym_mul(&wbuf, &mut ybuf);
            from_wrench(&ybuf, out);
            for (o, x) in out.iter_mut().zip(u) {
                *o = 2.0 * (*o + cfg.r_u * x);
            }
        };
        let (candidate, qp_iters) = solve_box_qp(apply, &c, &hi, &plan, lipschitz, cfg.qp_max_iters, cfg.qp_tol)?;
        qp_iterations += qp_iters;

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=LINE_SEARCH_HALVINGS {
            let trial: Vec<f64> = plan.iter().zip(&candidate).map(|(p, c)| p + alpha * (c - p)).collect();
            let tw = hz.wrenches(&trial);
            let txs = hz.rollout(state, &tw);
            let tc = hz.cost(&txs, &trial);
            if tc < cost {
                accepted = Some((trial, tw, txs, tc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, tw, txs, tc)) = accepted else { break };
        let decrease = cost - tc;
        plan = trial;
        wrenches = tw;
        xs = txs;
        cost = tc;
        if decrease < cfg.tol {
            break;
        }
    }
    Ok(MpcSolution { plan, cost, iterations, qp_iterations })
}

/// Receding-horizon MPC: returns the first command of the optimal plan.
pub fn mpc_control(
    state: &State,
    reference: &[Setpoint],
    cfg: &MpcConfig,
    body: &BodyParams,
    system: &ThrusterSystem,
    residual: Option<&ResidualModel>,
) -> Result<ControlOutput> {
    let start = Instant::now();
    let sol = mpc_solve(state, reference, cfg, body, system, residual, None)?;
    Ok(first_command(&sol, system, start))
}

fn first_command(sol: &MpcSolution, system: &ThrusterSystem, start: Instant) -> ControlOutput {
    let u: Vec<f64> = sol.plan[..system.len()]
        .iter()
        .zip(system.u_max())
        .map(|(u, m)| u.clamp(0.0, *m))
        .collect();
    ControlOutput {
        wrench_desired: system.mix_unchecked(&u),
        u,
        diagnostics: ControlDiagnostics {
            iterations: sol.iterations,
            cost: sol.cost,
            solve_time_s: start.elapsed().as_secs_f64(),
            fallback: false,
        },
    }
}

/// Inputs available to a controller at an update instant.
pub struct ControlContext<'a> {
    pub t: f64,
    pub state: &'a State,
    pub body: &'a BodyParams,
    pub system: &'a ThrusterSystem,
    /// Reference at an absolute time.
    pub reference: &'a dyn Fn(f64) -> Setpoint,
}

pub trait Controller: Send {
    fn name(&self) -> &'static str;
    /// Update period; the caller holds the output in between.
    fn period(&self) -> f64;
    fn compute(&mut self, ctx: &ControlContext) -> Result<ControlOutput>;
    /// Clears per-episode buffers.
    fn reset(&mut self) {}
}

#[derive(Debug, Clone)]
pub struct PdController {
    pub gains: PdGains,
    pub period: f64,
}

impl Controller for PdController {
    fn name(&self) -> &'static str {
        "pd"
    }

    fn period(&self) -> f64 {
        self.period
    }

    fn compute(&mut self, ctx: &ControlContext) -> Result<ControlOutput> {
        Ok(pd_control(ctx.state, &(ctx.reference)(ctx.t), &self.gains, ctx.system))
    }
}

/// MPC with a shifted warm start; falls back to PD when a solve fails.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub cfg: MpcConfig,
    pub fallback: PdGains,
    pub residual: Option<ResidualModel>,
    warm: Vec<f64>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig, fallback: PdGains, residual: Option<ResidualModel>) -> Result<Self> {
        cfg.validate()?;
        fallback.validate()?;
        Ok(Self { cfg, fallback, residual, warm: vec![] })
    }
}

impl Controller for MpcController {
    fn name(&self) -> &'static str {
        if self.residual.is_some() { "gp_mpc" } else { "mpc" }
    }

    fn period(&self) -> f64 {
        self.cfg.dt_c
    }

    fn compute(&mut self, ctx: &ControlContext) -> Result<ControlOutput> {
        let start = Instant::now();
        let reference: Vec<Setpoint> = (1..=self.cfg.horizon)
            .map(|k| (ctx.reference)(ctx.t + k as f64 * self.cfg.dt_c))
            .collect();
        let warm = (!self.warm.is_empty()).then_some(self.warm.as_slice());
        match mpc_solve(ctx.state, &reference, &self.cfg, ctx.body, ctx.system, self.residual.as_ref(), warm) {
            Ok(sol) => {
                let n_u = ctx.system.len();
                self.warm = sol.plan[n_u..].to_vec();
                self.warm.extend_from_slice(&sol.plan[sol.plan.len() - n_u..]);
                Ok(first_command(&sol, ctx.system, start))
            }
            Err(e) if matches!(e, Error::Solver(_)) => {
                self.warm.clear();
                let mut out = pd_control(ctx.state, &(ctx.reference)(ctx.t), &self.fallback, ctx.system);
                out.diagnostics.fallback = true;
                Ok(out)
            }
            Err(e) => Err(e),
        }
    }

    fn reset(&mut self) {
        self.warm.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rigid_body::{quat, quat_exp, rotation_matrix, step};
    use proptest::prelude::*;

    #[test]
    fn attitude_error_examples() {
        let q = quat(0.3, -0.2, 0.5, 0.1).normalize();
        assert!(attitude_error(&q, &q).norm() < 1e-15);
        let h = std::f64::consts::FRAC_PI_4;
        let e = attitude_error(&quat(h.cos(), 0.0, 0.0, h.sin()), &identity_quat());
        assert!((e - Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn attitude_error_norm_is_geodesic_angle(a in prop::array::uniform4(-1.0f64..1.0), b in prop::array::uniform4(-1.0f64..1.0)) {
            let qa = quat(a[0], a[1], a[2], a[3]);
            let qb = quat(b[0], b[1], b[2], b[3]);
            prop_assume!(qa.norm() > 0.1 && qb.norm() > 0.1);
            let (qa, qb) = (qa.normalize(), qb.normalize());
            let dot = (qa.w * qb.w + qa.i * qb.i + qa.j * qb.j + qa.k * qb.k).abs().min(1.0);
            let geodesic = 2.0 * dot.acos();
            prop_assert!((attitude_error(&qa, &qb).norm() - geodesic).abs() < 1e-10);
        }

        #[test]
        fn pd_wrench_is_frame_equivariant(rv in prop::array::uniform3(-2.0f64..2.0), p in prop::array::uniform3(-1.0f64..1.0),
                                          w in prop::array::uniform3(-0.3f64..0.3), g in prop::array::uniform3(-1.0f64..1.0)) {
            let gains = PdGains::default();
            let mut s = State::at_rest(Vec3::from(p), quat(0.8, 0.1, 0.3, -0.2).normalize());
            s.velocity = Vec3::new(0.05, -0.02, 0.01);
            s.angular_velocity = Vec3::from(w);
            let sp = Setpoint { position: Vec3::from(g), attitude: quat(0.6, -0.4, 0.2, 0.3).normalize(), velocity: Vec3::new(0.01, 0.0, 0.02), angular_velocity: Vec3::new(0.0, 0.01, 0.0) };
            let rot = quat_exp(&Vec3::from(rv));
            let rm = rotation_matrix(&rot);
            let mut s2 = s;
            s2.position = rm * s.position;
            s2.attitude = rot * s.attitude;
            let mut sp2 = sp;
            sp2.position = rm * sp.position;
            sp2.attitude = rot * sp.attitude;
            let a = pd_wrench(&s, &sp, &gains);
            let b = pd_wrench(&s2, &sp2, &gains);
            prop_assert!((a.force - b.force).norm() < 1e-10);
            prop_assert!((a.torque - b.torque).norm() < 1e-10);
        }
    }

    #[test]
    fn pd_zero_error_gives_zero_command() {
        let sys = ThrusterSystem::default_cube();
        let s = State::at_rest(Vec3::new(1.0, 2.0, 3.0), quat(0.9, 0.1, 0.2, 0.3).normalize());
        let out = pd_control(&s, &Setpoint::from(s), &PdGains::default(), &sys);
        assert!(out.wrench_desired.force.norm() + out.wrench_desired.torque.norm() < 1e-15);
        assert!(out.u.iter().all(|u| *u < 1e-12));
    }

    #[test]
    fn pd_pure_position_error() {
        let gains = PdGains::default();
        let s = State::default();
        let w = pd_wrench(&s, &Setpoint::hold(Vec3::new(0.3, 0.0, 0.0), identity_quat()), &gains);
        assert!((w.force - Vec3::new(gains.kp_p * 0.3, 0.0, 0.0)).norm() < 1e-15);
        assert_eq!(w.torque, Vec3::zeros());
    }

    #[test]
    fn pd_critically_damped_double_integrator_does_not_overshoot() {
        // m = 1, Kp = 1, Kd = 2: x(t) = (1 + t) e^{-t} x0, monotone toward 0
        let body = BodyParams::diagonal(1.0, 1.0, 1.0, 1.0).unwrap();
        let gains = PdGains { kp_p: 1.0, kd_v: 2.0, kp_q: 1.0, kd_w: 2.0 };
        let sp = Setpoint::default();
        let mut s = State::at_rest(Vec3::new(1.0, 0.0, 0.0), identity_quat());
        let mut prev = 1.0;
        for k in 1..=1000 {
            let w = pd_wrench(&s, &sp, &gains);
            s = step(&s, &body, &w, 0.01).unwrap();
            let x = s.position.x;
            let t = k as f64 * 0.01;
            assert!(x >= 0.0 && x <= prev + 1e-15);
            // zero-order hold over each step shifts the response by O(dt)
            assert!((x - (1.0 + t) * (-t).exp()).abs() < 1e-2);
            prev = x;
        }
    }

    #[test]
    fn effort_examples() {
        assert_eq!(control_effort(&[], 0.02), 0.0);
        assert_eq!(control_effort(&vec![vec![0.0; 4]; 10], 0.02), 0.0);
        assert!((control_effort(&vec![vec![1.0, 0.5, 0.5]; 7], 0.02) - 2.0).abs() < 1e-12);
        // (0.3 + 0.1) + (0.4) + (0.0) + (0.2 + 0.2 + 0.1) = 1.3 over 4 rows
        let log = vec![vec![0.3, 0.1, 0.0], vec![0.0, 0.4, 0.0], vec![0.0; 3], vec![0.2, 0.2, 0.1]];
        assert!((control_effort(&log, 0.1) - 0.325).abs() < 1e-12);
    }

    #[test]
    fn mpc_at_reference_commands_nothing() {
        let sys = ThrusterSystem::default_cube();
        let body = BodyParams::default();
        let s = State::at_rest(Vec3::new(0.5, 0.0, 0.0), identity_quat());
        let out = mpc_control(&s, &[Setpoint::from(s)], &MpcConfig::default(), &body, &sys, None).unwrap();
        let w = sys.mix(&out.u).unwrap();
        assert!(w.force.norm() + w.torque.norm() <= 1e-6);
    }

    #[test]
    fn box_qp_matches_unconstrained_interior_solution() {
        // P = [[2, 0.5], [0.5, 1]], c = (-1, -1): interior optimum P⁻¹(1, 1)
        let p = [[2.0, 0.5], [0.5, 1.0]];
        let apply = |x: &[f64], out: &mut [f64]| {
            out[0] = p[0][0] * x[0] + p[0][1] * x[1];
            out[1] = p[1][0] * x[0] + p[1][1] * x[1];
        };
        let (x, _) = solve_box_qp(apply, &[-1.0, -1.0], &[10.0, 10.0], &[0.0, 0.0], 2.5, 10_000, 1e-12).unwrap();
        let det = 2.0 - 0.25;
        assert!((x[0] - 0.5 / det).abs() < 1e-10);
        assert!((x[1] - 1.5 / det).abs() < 1e-10);
    }
}
