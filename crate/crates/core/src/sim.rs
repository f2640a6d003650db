//! Single-environment episode runner, scenario configuration, step logs and
//! the packaged inspection and docking scenarios.
//!
//! Each physics step runs, in order: planner → controller (zero-order hold at
//! its own period) → fault models → mixer plus sampled disturbance → contact
//! solve → integration → log row. A row describes the state at time `t` and
//! everything applied over `[t, t + dt)`.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::actuation::{
    sample_disturbance, validate_fault_events, Disturbance, DisturbanceFn, DisturbanceSpec, FaultEvent, FaultSchedule,
    FaultSpec, ThrusterSystem,
};
use crate::contact::{check_supported, CollisionShape, ContactModel, ContactRecord, SettleTolerances};
use crate::control::{
    attitude_error, control_effort, ControlContext, ControlDiagnostics, Controller, MpcConfig, MpcController, PdController,
    PdGains, Setpoint,
};
use crate::error::{Error, Result};
use crate::planning::{
    plan_inspection, random_attitude_within, AttitudeMode, DockingPlan, DockingStage, DockingSupervisor, InspectionPlan,
    DEFAULT_APPROACH_SPEED, DEFAULT_DWELL, DEFAULT_GATE_HOLD, DEFAULT_TRANSIT_SPEED,
};
use crate::rigid_body::{identity_quat, step, BodyParams, State, Vec3, Wrench, DEFAULT_DT, MAX_DT};
use crate::rng::{purpose, RngStream};

pub const SCHEMA_VERSION: u32 = 1;
/// Position tolerance for the non-docking rendezvous flag, m.
pub const RENDEZVOUS_TOL: f64 = 0.05;
const BONUS_TOL: f64 = 0.05;

/// Setpoint-tracking reward shared by episode logs and the RL task:
/// `−‖e_p‖ − 0.1‖u‖₁ + 10·[‖e_p‖ < 0.05 ∧ ‖v‖ < 0.05]`.
pub fn tracking_reward(e_p: &Vec3, v: &Vec3, u: &[f64]) -> f64 {
    let e = e_p.norm();
    let bonus = if e < BONUS_TOL && v.norm() < BONUS_TOL { 10.0 } else { 0.0 };
    -e - 0.1 * u.iter().map(|x| x.abs()).sum::<f64>() + bonus
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerConfig {
    Pd {
        #[serde(default)]
        gains: PdGains,
        /// Update period, s; defaults to 5 physics steps.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        period: Option<f64>,
    },
    Mpc {
        #[serde(default)]
        mpc: MpcConfig,
        /// Gains of the PD fallback used when a solve fails.
        #[serde(default)]
        fallback: PdGains,
    },
    /// Deterministic RL policy loaded from a checkpoint.
    Policy { checkpoint: String },
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig::Pd { gains: PdGains::default(), period: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanConfig {
    Hold {
        #[serde(default)]
        setpoint: Setpoint,
    },
    Inspection {
        #[serde(default)]
        target_center: [f64; 3],
        target_radius: f64,
        n_waypoints: usize,
        standoff: f64,
        #[serde(default)]
        attitude_mode: AttitudeMode,
        #[serde(default = "z_axis")]
        plane_normal: [f64; 3],
        #[serde(default = "default_dwell")]
        dwell: f64,
        #[serde(default = "default_transit_speed")]
        transit_speed: f64,
    },
    Docking(DockingPlan),
}

fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_dwell() -> f64 {
    DEFAULT_DWELL
}

fn default_transit_speed() -> f64 {
    DEFAULT_TRANSIT_SPEED
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig::Hold { setpoint: Setpoint::default() }
    }
}

impl PlanConfig {
    pub fn inspection_plan(&self) -> Result<Option<InspectionPlan>> {
        match self {
            PlanConfig::Inspection {
                target_center,
                target_radius,
                n_waypoints,
                standoff,
                attitude_mode,
                plane_normal,
                dwell,
                transit_speed,
            } => {
                let plan = plan_inspection(
                    Vec3::from(*target_center),
                    *target_radius,
                    *n_waypoints,
                    *standoff,
                    *attitude_mode,
                    Vec3::from(*plane_normal),
                    *dwell,
                    *transit_speed,
                )?;
                plan.validate()?;
                Ok(Some(plan))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactConfig {
    #[serde(default = "default_body_shape")]
    pub body_shape: CollisionShape,
    pub world: Vec<CollisionShape>,
    /// N/m.
    pub stiffness: f64,
    /// N·s/m.
    pub damping: f64,
    #[serde(default)]
    pub settle: SettleTolerances,
    /// Bound for the bounded-contact flag, N.
    #[serde(default = "default_max_force")]
    pub max_force: f64,
}

fn default_body_shape() -> CollisionShape {
    CollisionShape::Sphere { radius: 0.15, center: [0.0; 3] }
}

fn default_max_force() -> f64 {
    5.0
}

/// Initial state plus optional randomization drawn from the scenario seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConditions {
    pub state: State,
    /// Uniform position offset per axis, `[lo, hi]`, m.
    pub position_range: [[f64; 2]; 3],
    /// Uniform linear velocity offset per axis, m/s.
    pub velocity_range: [[f64; 2]; 3],
    /// Maximum random tilt away from `state.attitude`, rad.
    pub attitude_cone: f64,
}

impl InitialConditions {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !self.state.is_finite() || (self.state.attitude.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("{field}.state"), "state must be finite with a unit quaternion"));
        }
        for (name, r) in [("position_range", &self.position_range), ("velocity_range", &self.velocity_range)] {
            if r.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
                return Err(Error::config(format!("{field}.{name}"), "each range needs lo <= hi"));
            }
        }
        if !(self.attitude_cone >= 0.0 && self.attitude_cone <= std::f64::consts::PI) {
            return Err(Error::config(format!("{field}.attitude_cone"), "must lie in [0, pi]"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> State {
        let mut s = self.state;
        for k in 0..3 {
            s.position[k] += rng.uniform(self.position_range[k][0], self.position_range[k][1]);
        }
        for k in 0..3 {
            s.velocity[k] += rng.uniform(self.velocity_range[k][0], self.velocity_range[k][1]);
        }
        if self.attitude_cone > 0.0 {
            s.attitude = (s.attitude * random_attitude_within(rng, self.attitude_cone)).normalize();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogOptions {
    /// Write the step log CSV (the summary is always produced).
    pub write_csv: bool,
}

impl Default for LogOptions {
    fn default() -> Self {
        Self { write_csv: true }
    }
}

fn default_disturbance() -> DisturbanceSpec {
    DisturbanceSpec::None
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

/// Versioned scenario document. All units SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub body: BodyParams,
    #[serde(default)]
    pub thrusters: ThrusterSystem,
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
    #[serde(default = "default_disturbance")]
    pub disturbance: DisturbanceSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact: Option<ContactConfig>,
    #[serde(default)]
    pub initial: InitialConditions,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub log: LogOptions,
}

impl ScenarioConfig {
    /// Minimal station-keeping scenario with every default filled in.
    pub fn minimal(duration: f64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            name: String::new(),
            body: BodyParams::default(),
            thrusters: ThrusterSystem::default(),
            faults: vec![],
            disturbance: DisturbanceSpec::None,
            controller: ControllerConfig::default(),
            plan: PlanConfig::default(),
            contact: None,
            initial: InitialConditions::default(),
            dt: DEFAULT_DT,
            duration,
            seed: 0,
            log: LogOptions::default(),
        }
    }

    /// Checks every invariant; a zero duration is accepted only when
    /// `allow_empty` is set.
    fn check(&self, allow_empty: bool) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::config("schema", format!("unsupported schema {}, expected {SCHEMA_VERSION}", self.schema)));
        }
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::config("dt", format!("must lie in (0, {MAX_DT}]")));
        }
        let duration_ok = if allow_empty { self.duration >= 0.0 } else { self.duration > 0.0 };
        if !duration_ok || !self.duration.is_finite() {
            return Err(Error::config("duration", "must be > 0 and finite"));
        }
        validate_fault_events(&self.faults, &self.thrusters)?;
        self.disturbance
            .validate()
            .map_err(|e| prefix_field(e, "disturbance"))?;
        match &self.controller {
            ControllerConfig::Pd { gains, period } => {
                gains.validate()?;
                if let Some(p) = period {
                    self.period_steps(*p, "controller.period")?;
                }
            }
            ControllerConfig::Mpc { mpc, fallback } => {
                mpc.validate()?;
                fallback.validate()?;
                self.period_steps(mpc.dt_c, "controller.mpc.dt_c")?;
            }
            ControllerConfig::Policy { checkpoint } => {
                if checkpoint.is_empty() {
                    return Err(Error::config("controller.checkpoint", "path must not be empty"));
                }
            }
        }
        match &self.plan {
            PlanConfig::Hold { setpoint } => {
                if (setpoint.attitude.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::config("plan.setpoint.attitude", "must be a unit quaternion"));
                }
            }
            PlanConfig::Inspection { .. } => {
                self.plan.inspection_plan()?;
            }
            PlanConfig::Docking(plan) => {
                plan.validate()?;
                if self.contact.is_none() {
                    return Err(Error::config("contact", "docking plans need a contact model"));
                }
            }
        }
        if let Some(c) = &self.contact {
            check_supported(&c.body_shape, &c.world)?;
            if !(c.stiffness > 0.0) || !(c.damping >= 0.0) {
                return Err(Error::config("contact.stiffness", "stiffness must be > 0 and damping >= 0"));
            }
            if !(c.settle.pos_tol > 0.0 && c.settle.vel_tol > 0.0 && c.settle.t_settle >= 0.0) {
                return Err(Error::config("contact.settle", "tolerances must be > 0"));
            }
            if !(c.max_force > 0.0) {
                return Err(Error::config("contact.max_force", "must be > 0"));
            }
        }
        self.initial.validate("initial")
    }

    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    fn period_steps(&self, period: f64, field: &str) -> Result<usize> {
        let ratio = period / self.dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 {
            return Err(Error::config(field, format!("period {period} must be a positive multiple of dt = {}", self.dt)));
        }
        Ok(n as usize)
    }

    pub fn n_steps(&self) -> usize {
        (self.duration / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{prefix}.{field}"), reason),
        e => e,
    }
}

/// Parses and fully validates a JSON scenario document.
pub fn load_config(source: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_json::from_str(source).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// One physics step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub t: f64,
    pub state: State,
    pub u_dem: Vec<f64>,
    pub u_act: Vec<f64>,
    /// Thruster wrench `B u_act`, body frame.
    pub wrench: Wrench,
    pub disturbance: Wrench,
    pub contact_force: f64,
    pub setpoint: Setpoint,
    pub lateral_error: f64,
    pub reward: f64,
    pub stage: Option<DockingStage>,
    /// Active faults, `thruster:kind` joined by `;`.
    pub faults: String,
    pub diagnostics: ControlDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub duration: f64,
    pub mean_lateral_error: f64,
    pub max_lateral_error: f64,
    pub mean_control_effort: f64,
    pub total_reward: f64,
    pub first_contact_time: Option<f64>,
    pub first_contact_stage: Option<DockingStage>,
    pub peak_contact_force: f64,
    pub settled: bool,
    pub settle_time: Option<f64>,
    pub final_position_error: f64,
    pub final_attitude_error: f64,
    pub rendezvous_success: bool,
    pub dock_success: bool,
    pub bounded_contact: bool,
}

impl EpisodeSummary {
    /// Field-wise comparison with `tol` on floating-point fields.
    pub fn matches(&self, other: &EpisodeSummary, tol: f64) -> std::result::Result<(), String> {
        let close = |a: f64, b: f64| (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()));
        let opt_close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => true,
            (Some(x), Some(y)) => close(x, y),
            _ => false,
        };
        let checks = [
            ("steps", self.steps == other.steps),
            ("duration", close(self.duration, other.duration)),
            ("mean_lateral_error", close(self.mean_lateral_error, other.mean_lateral_error)),
            ("max_lateral_error", close(self.max_lateral_error, other.max_lateral_error)),
            ("mean_control_effort", close(self.mean_control_effort, other.mean_control_effort)),
            ("total_reward", close(self.total_reward, other.total_reward)),
            ("first_contact_time", opt_close(self.first_contact_time, other.first_contact_time)),
            ("first_contact_stage", self.first_contact_stage == other.first_contact_stage),
            ("peak_contact_force", close(self.peak_contact_force, other.peak_contact_force)),
            ("settled", self.settled == other.settled),
            ("settle_time", opt_close(self.settle_time, other.settle_time)),
            ("final_position_error", close(self.final_position_error, other.final_position_error)),
            ("final_attitude_error", close(self.final_attitude_error, other.final_attitude_error)),
            ("rendezvous_success", self.rendezvous_success == other.rendezvous_success),
            ("dock_success", self.dock_success == other.dock_success),
            ("bounded_contact", self.bounded_contact == other.bounded_contact),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(format!("summary field `{name}` differs")),
            None => Ok(()),
        }
    }
}

/// Recomputes the episode summary from its log alone.
pub fn summarize(rows: &[StepLog], cfg: &ScenarioConfig) -> EpisodeSummary {
    let Some(last) = rows.last() else {
        return EpisodeSummary::default();
    };
    let n = rows.len() as f64;
    let settle = cfg.contact.as_ref().map(|c| c.settle).unwrap_or_default();
    let mut record = ContactRecord::default();
    let mut first_contact_stage = None;
    for r in rows {
        let had_contact = record.first_contact_time.is_some();
        record = record.observe(
            r.contact_force,
            (r.state.position - r.setpoint.position).norm(),
            r.state.velocity.norm(),
            r.t,
            &settle,
        );
        if !had_contact && record.first_contact_time.is_some() {
            first_contact_stage = r.stage;
        }
    }
    let u_log: Vec<Vec<f64>> = rows.iter().map(|r| r.u_act.clone()).collect();
    let final_position_error = (last.state.position - last.setpoint.position).norm();
    let docking = matches!(cfg.plan, PlanConfig::Docking(_));
    let rendezvous_success = if docking {
        rows.iter().any(|r| r.stage.is_some_and(|s| s >= DockingStage::GateHold))
    } else {
        final_position_error <= RENDEZVOUS_TOL
    };
    let max_force = cfg.contact.as_ref().map_or(f64::INFINITY, |c| c.max_force);
    EpisodeSummary {
        steps: rows.len(),
        duration: n * cfg.dt,
        mean_lateral_error: rows.iter().map(|r| r.lateral_error).sum::<f64>() / n,
        max_lateral_error: rows.iter().map(|r| r.lateral_error).fold(0.0, f64::max),
        mean_control_effort: control_effort(&u_log, cfg.dt),
        total_reward: rows.iter().map(|r| r.reward).sum(),
        first_contact_time: record.first_contact_time,
        first_contact_stage,
        peak_contact_force: record.peak_force,
        settled: record.settled,
        settle_time: record.settle_time,
        final_position_error,
        final_attitude_error: attitude_error(&last.state.attitude, &last.setpoint.attitude).norm(),
        rendezvous_success,
        dock_success: docking && record.settled,
        bounded_contact: record.peak_force <= max_force,
    }
}

/// Distance to the reference position, measured perpendicular to the transit
/// direction when there is one.
pub fn lateral_error(position: &Vec3, reference: &Vec3, direction: Option<&Vec3>) -> f64 {
    let e = position - reference;
    match direction {
        Some(d) => (e - d * e.dot(d)).norm(),
        None => e.norm(),
    }
}

pub type PreStepHook<'a> = Box<dyn FnMut(f64, &State) + 'a>;
pub type PostStepHook<'a> = Box<dyn FnMut(&State, &StepLog) + 'a>;

/// Pre- and post-step callback slots plus an optional user disturbance term
/// added to the configured one.
#[derive(Default)]
pub struct Hooks<'a> {
    pub pre_step: Vec<PreStepHook<'a>>,
    pub post_step: Vec<PostStepHook<'a>>,
    pub extra_disturbance: Option<Arc<DisturbanceFn>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub log: Vec<StepLog>,
    pub summary: EpisodeSummary,
}

/// Failure of an episode, keeping the rows logged before the failing step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeFailure {
    pub error: Error,
    pub log: Vec<StepLog>,
}

impl std::fmt::Display for EpisodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} rows logged)", self.error, self.log.len())
    }
}

impl std::error::Error for EpisodeFailure {}

impl From<EpisodeFailure> for Error {
    fn from(f: EpisodeFailure) -> Self {
        f.error
    }
}

pub fn build_controller(cfg: &ScenarioConfig) -> Result<Box<dyn Controller>> {
    Ok(match &cfg.controller {
        ControllerConfig::Pd { gains, period } => {
            Box::new(PdController { gains: *gains, period: period.unwrap_or(5.0 * cfg.dt) })
        }
        ControllerConfig::Mpc { mpc, fallback } => Box::new(MpcController::new(*mpc, *fallback, None)?),
        ControllerConfig::Policy { checkpoint } => Box::new(crate::rl::deploy(std::path::Path::new(checkpoint))?),
    })
}

enum Planner {
    Hold(Setpoint),
    Inspection(InspectionPlan),
    Docking(DockingSupervisor),
}

impl Planner {
    fn preview(&self, t: f64) -> Setpoint {
        match self {
            Planner::Hold(sp) => *sp,
            Planner::Inspection(p) => p.reference(t),
            Planner::Docking(s) => s.preview(t),
        }
    }
}

pub fn run_episode(cfg: &ScenarioConfig) -> Result<Episode, EpisodeFailure> {
    run_episode_with(cfg, None, &mut Hooks::default())
}

/// Runs an episode with an optional externally built controller (otherwise
/// taken from the config) and hooks.
pub fn run_episode_with(
    cfg: &ScenarioConfig,
    controller: Option<Box<dyn Controller>>,
    hooks: &mut Hooks,
) -> Result<Episode, EpisodeFailure> {
    let fail = |error: Error, log: Vec<StepLog>| EpisodeFailure { error, log };
    cfg.check(true).map_err(|e| fail(e, vec![]))?;
    let n_steps = cfg.n_steps();
    if n_steps == 0 {
        return Ok(Episode { log: vec![], summary: EpisodeSummary::default() });
    }
    let mut controller = match controller {
        Some(c) => c,
        None => build_controller(cfg).map_err(|e| fail(e, vec![]))?,
    };
    controller.reset();
    let period_steps = cfg.period_steps(controller.period(), "controller.period").map_err(|e| fail(e, vec![]))?;

    let root = RngStream::new(cfg.seed);
    let mut fault_rng = root.child(purpose::FAULTS);
    let mut dist_rng = root.child(purpose::DISTURBANCE);
    let mut gp_rng = root.child(purpose::GP_FAULT_MAP);
    let mut init_rng = root.child(purpose::INITIAL_STATE);

    let system = &cfg.thrusters;
    let body = &cfg.body;
    let schedule = FaultSchedule::new(&cfg.faults, system, &mut gp_rng).map_err(|e| fail(e, vec![]))?;
    let disturbance = cfg.disturbance.build();
    let mut contact = match &cfg.contact {
        Some(c) => Some(
            ContactModel::new(c.body_shape.clone(), c.world.clone(), c.stiffness, c.damping).map_err(|e| fail(e, vec![]))?,
        ),
        None => None,
    };
    let settle = cfg.contact.as_ref().map(|c| c.settle).unwrap_or_default();
    let mut planner = match &cfg.plan {
        PlanConfig::Hold { setpoint } => Planner::Hold(*setpoint),
        PlanConfig::Inspection { .. } => {
            Planner::Inspection(cfg.plan.inspection_plan().map_err(|e| fail(e, vec![]))?.expect("inspection plan"))
        }
        PlanConfig::Docking(plan) => Planner::Docking(DockingSupervisor::new(*plan)),
    };

    let mut state = cfg.initial.sample(&mut init_rng);
    let mut record = ContactRecord::default();
    let mut log: Vec<StepLog> = Vec::with_capacity(n_steps);
    let mut u_dem = vec![0.0; system.len()];
    let mut diagnostics = ControlDiagnostics::default();

    for k in 0..n_steps {
        let t = k as f64 * cfg.dt;
        let wrap = |e: Error| Error::Step { step: k, source: Box::new(e) };

        // (1) planner
        let (setpoint, stage, direction) = match &mut planner {
            Planner::Hold(sp) => (*sp, None, None),
            Planner::Inspection(p) => (p.reference(t), None, p.transit_direction(t)),
            Planner::Docking(sup) => {
                let (stage, sp) = sup.update(&state, t, record.settled);
                (sp, Some(stage), sup.transit_direction())
            }
        };
        for h in hooks.pre_step.iter_mut() {
            h(t, &state);
        }

        // (2) controller at its own rate
        if k % period_steps == 0 {
            let preview = |tq: f64| planner.preview(tq);
            let ctx = ControlContext { t, state: &state, body, system, reference: &preview };
            let out = match controller.compute(&ctx) {
                Ok(o) => o,
                Err(e) => return Err(fail(wrap(e), log)),
            };
            u_dem = out.u;
            diagnostics = out.diagnostics;
        }

        // (3) faults, (4) mixer and disturbances
        let u_act = match schedule.apply(&u_dem, system.u_max(), t, &mut fault_rng) {
            Ok(u) => u,
            Err(e) => return Err(fail(wrap(e), log)),
        };
        let thrust = match system.mix(&u_act) {
            Ok(w) => w,
            Err(e) => return Err(fail(wrap(e), log)),
        };
        let mut dist = match sample_disturbance(&disturbance, &state, t, &mut dist_rng) {
            Ok(w) => w,
            Err(e) => return Err(fail(wrap(e), log)),
        };
        if let Some(extra) = &hooks.extra_disturbance {
            match sample_disturbance(&Disturbance::Callback(extra.clone()), &state, t, &mut dist_rng) {
                Ok(w) => dist += w,
                Err(e) => return Err(fail(wrap(e), log)),
            }
        }

        // (5) contacts
        let (contact_wrench, contact_force) = match contact.as_mut() {
            Some(model) => match model.resolve(&state, body, cfg.dt) {
                Ok((_, res)) => (res.total_wrench, res.force_magnitude()),
                Err(e) => return Err(fail(wrap(e), log)),
            },
            None => (Wrench::zero(), 0.0),
        };
        record = record.observe(
            contact_force,
            (state.position - setpoint.position).norm(),
            state.velocity.norm(),
            t,
            &settle,
        );

        // (6) integrate
        let total = thrust + dist + contact_wrench;
        let next = match step(&state, body, &total, cfg.dt) {
            Ok(s) => s,
            Err(Error::IntegrationDiverged { dt, .. }) => {
                return Err(fail(wrap(Error::IntegrationDiverged { t, dt }), log));
            }
            Err(e) => return Err(fail(wrap(e), log)),
        };

        // (7) log
        let row = StepLog {
            t,
            state,
            reward: tracking_reward(&(setpoint.position - state.position), &state.velocity, &u_act),
            u_dem: u_dem.clone(),
            u_act,
            wrench: thrust,
            disturbance: dist,
            contact_force,
            setpoint,
            lateral_error: lateral_error(&state.position, &setpoint.position, direction.as_ref()),
            stage,
            faults: schedule.annotation(t),
            diagnostics,
        };
        for h in hooks.post_step.iter_mut() {
            h(&next, &row);
        }
        log.push(row);
        state = next;
    }
    let summary = summarize(&log, cfg);
    Ok(Episode { log, summary })
}

fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Column names in file order for a system with `n_u` thrusters.
pub fn log_columns(n_u: usize) -> Vec<String> {
    let mut c: Vec<String> = ["t", "r_x", "r_y", "r_z", "q_w", "q_x", "q_y", "q_z", "v_x", "v_y", "v_z", "w_x", "w_y", "w_z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.extend((0..n_u).map(|i| format!("u_dem_{i}")));
    c.extend((0..n_u).map(|i| format!("u_act_{i}")));
    for prefix in ["", "dist_"] {
        c.extend(["f_x", "f_y", "f_z", "tau_x", "tau_y", "tau_z"].iter().map(|s| format!("{prefix}{s}")));
    }
    c.push("contact_force".into());
    c.extend(
        ["r_x", "r_y", "r_z", "q_w", "q_x", "q_y", "q_z", "v_x", "v_y", "v_z", "w_x", "w_y", "w_z"]
            .iter()
            .map(|s| format!("ref_{s}")),
    );
    c.extend(["lateral_error", "reward", "stage", "faults", "ctrl_iters", "ctrl_cost", "ctrl_fallback"].map(String::from));
    c
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    schema: u32,
    columns: Vec<String>,
    config: ScenarioConfig,
}

/// CSV log: one `#`-prefixed JSON header line carrying the resolved config
/// and column list, the column-name row, then one row per physics step.
pub fn write_log_csv(rows: &[StepLog], cfg: &ScenarioConfig) -> String {
    let columns = log_columns(cfg.thrusters.len());
    let header = LogHeader { schema: SCHEMA_VERSION, columns: columns.clone(), config: cfg.clone() };
    let mut out = String::new();
    writeln!(out, "# {}", serde_json::to_string(&header).expect("serializable")).unwrap();
    writeln!(out, "{}", columns.join(",")).unwrap();
    for r in rows {
        let mut fields: Vec<String> = Vec::with_capacity(columns.len());
        fields.push(fmt_f64(r.t));
        fields.extend(r.state.to_array().iter().map(|v| fmt_f64(*v)));
        fields.extend(r.u_dem.iter().chain(&r.u_act).map(|v| fmt_f64(*v)));
        fields.extend(r.wrench.to_array().iter().chain(&r.disturbance.to_array()).map(|v| fmt_f64(*v)));
        fields.push(fmt_f64(r.contact_force));
        fields.extend(State::from(r.setpoint).to_array().iter().map(|v| fmt_f64(*v)));
        fields.push(fmt_f64(r.lateral_error));
        fields.push(fmt_f64(r.reward));
        fields.push(r.stage.map_or("-", |s| s.label()).to_string());
        fields.push(if r.faults.is_empty() { "-".into() } else { r.faults.clone() });
        fields.push(r.diagnostics.iterations.to_string());
        fields.push(fmt_f64(r.diagnostics.cost));
        fields.push((r.diagnostics.fallback as u8).to_string());
        writeln!(out, "{}", fields.join(",")).unwrap();
    }
    out
}

fn parse_stage(s: &str) -> Option<Option<DockingStage>> {
    Some(match s {
        "-" => None,
        "transit" => Some(DockingStage::Transit),
        "gate_hold" => Some(DockingStage::GateHold),
        "final_approach" => Some(DockingStage::FinalApproach),
        "docked" => Some(DockingStage::Docked),
        _ => return None,
    })
}

/// Parses a CSV log back into its config and rows.
pub fn read_log_csv(text: &str) -> Result<(ScenarioConfig, Vec<StepLog>)> {
    let mut lines = text.lines();
    let perr = |line: usize, column: usize, message: String| Error::Parse { line, column, message };
    let first = lines.next().ok_or_else(|| perr(1, 1, "empty log".into()))?;
    let json = first.strip_prefix("# ").ok_or_else(|| perr(1, 1, "missing header line".into()))?;
    let header: LogHeader = serde_json::from_str(json).map_err(|e| perr(1, e.column() + 2, e.to_string()))?;
    let cfg = header.config;
    let n_u = cfg.thrusters.len();
    let columns = log_columns(n_u);
    if header.columns != columns {
        return Err(perr(1, 1, "column list does not match the thruster layout".into()));
    }
    let names = lines.next().ok_or_else(|| perr(2, 1, "missing column row".into()))?;
    if names != columns.join(",") {
        return Err(perr(2, 1, "column row does not match header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(perr(lineno, 1, format!("expected {} fields, found {}", columns.len(), fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| perr(lineno, k + 1, format!("column `{}`: {e}", columns[k])))
        };
        let nums = |from: usize, len: usize| -> Result<Vec<f64>> { (from..from + len).map(num).collect() };
        let mut at = 0;
        let mut take = |len: usize| {
            let s = at;
            at += len;
            s
        };
        let t = num(take(1))?;
        let state = State::from_slice(&nums(take(13), 13)?);
        let u_dem = nums(take(n_u), n_u)?;
        let u_act = nums(take(n_u), n_u)?;
        let wrench = Wrench::from_slice(&nums(take(6), 6)?);
        let disturbance = Wrench::from_slice(&nums(take(6), 6)?);
        let contact_force = num(take(1))?;
        let setpoint = Setpoint::from(State::from_slice(&nums(take(13), 13)?));
        let lateral_error = num(take(1))?;
        let reward = num(take(1))?;
        let k = take(1);
        let stage = parse_stage(fields[k]).ok_or_else(|| perr(lineno, k + 1, format!("unknown stage `{}`", fields[k])))?;
        let k = take(1);
        let faults = if fields[k] == "-" { String::new() } else { fields[k].to_string() };
        let k = take(1);
        let iterations = fields[k].parse::<usize>().map_err(|e| perr(lineno, k + 1, e.to_string()))?;
        let cost = num(take(1))?;
        let k = take(1);
        let fallback = match fields[k] {
            "0" => false,
            "1" => true,
            other => return Err(perr(lineno, k + 1, format!("bad flag `{other}`"))),
        };
        rows.push(StepLog {
            t,
            state,
            u_dem,
            u_act,
            wrench,
            disturbance,
            contact_force,
            setpoint,
            lateral_error,
            reward,
            stage,
            faults,
            diagnostics: ControlDiagnostics { iterations, cost, solve_time_s: 0.0, fallback },
        });
    }
    Ok((cfg, rows))
}

/// Checks a log for internal consistency and against a stored summary:
/// recomputable columns must match bit-for-bit, the summary within `1e-12`.
pub fn verify_log(text: &str, stored: &EpisodeSummary) -> Result<EpisodeSummary> {
    let (cfg, rows) = read_log_csv(text)?;
    cfg.check(true)?;
    let mut gp_rng = RngStream::new(cfg.seed).child(purpose::GP_FAULT_MAP);
    let schedule = FaultSchedule::new(&cfg.faults, &cfg.thrusters, &mut gp_rng)?;
    for (i, r) in rows.iter().enumerate() {
        let expected_t = i as f64 * cfg.dt;
        if r.t != expected_t {
            return Err(Error::Mismatch(format!("row {i}: t = {} but expected {expected_t}", r.t)));
        }
        let reward = tracking_reward(&(r.setpoint.position - r.state.position), &r.state.velocity, &r.u_act);
        if reward != r.reward {
            return Err(Error::Mismatch(format!("row {i}: reward {} does not match recomputed {reward}", r.reward)));
        }
        let wrench = cfg.thrusters.mix(&r.u_act)?;
        if (wrench.force - r.wrench.force).norm() + (wrench.torque - r.wrench.torque).norm() > 1e-12 {
            return Err(Error::Mismatch(format!("row {i}: wrench does not match B u_act")));
        }
        let annotation = schedule.annotation(r.t);
        if annotation != r.faults {
            return Err(Error::Mismatch(format!("row {i}: fault annotation `{}` != schedule `{annotation}`", r.faults)));
        }
    }
    let recomputed = summarize(&rows, &cfg);
    recomputed.matches(stored, 1e-12).map_err(Error::Mismatch)?;
    Ok(recomputed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    Nominal,
    StuckOff,
    StuckOn,
}

/// Thruster disabled or jammed in the canonical inspection scenario.
pub const INSPECTION_FAULT_THRUSTER: usize = 6;
/// Fault window `[onset, end)` in the canonical inspection scenario, s.
pub const INSPECTION_FAULT_ONSET: f64 = 5.0;
pub const INSPECTION_FAULT_END: f64 = 15.0;

/// Canonical inspection run: four point-at-target waypoints on a 1 m circle
/// around a 0.5 m target, tracked by the default MPC, with an optional
/// single-thruster fault during the first transit.
pub fn inspection_config(mode: FailureMode) -> ScenarioConfig {
    let plan = PlanConfig::Inspection {
        target_center: [0.0; 3],
        target_radius: 0.5,
        n_waypoints: 4,
        standoff: 0.5,
        attitude_mode: AttitudeMode::PointAtTarget,
        plane_normal: z_axis(),
        dwell: DEFAULT_DWELL,
        transit_speed: DEFAULT_TRANSIT_SPEED,
    };
    let p = plan.inspection_plan().expect("canonical plan").expect("inspection");
    let start = p.waypoints[0];
    let fault = match mode {
        FailureMode::Nominal => None,
        FailureMode::StuckOff => Some(FaultSpec::StuckOff),
        FailureMode::StuckOn => Some(FaultSpec::StuckOn),
    };
    let mut cfg = ScenarioConfig::minimal(0.0);
    cfg.name = format!("inspection-{}", serde_json::to_value(mode).unwrap().as_str().unwrap());
    cfg.controller = ControllerConfig::Mpc { mpc: MpcConfig::default(), fallback: PdGains::default() };
    cfg.faults = fault
        .into_iter()
        .map(|fault| FaultEvent {
            thruster: INSPECTION_FAULT_THRUSTER,
            fault,
            t_on: INSPECTION_FAULT_ONSET,
            t_off: INSPECTION_FAULT_END,
        })
        .collect();
    cfg.initial.state = State::at_rest(start.position, start.attitude);
    cfg.duration = (p.duration() / cfg.dt).ceil() * cfg.dt;
    cfg.plan = plan;
    cfg
}

pub fn inspection_scenario(mode: FailureMode) -> Result<EpisodeSummary> {
    Ok(run_episode(&inspection_config(mode))?.summary)
}

/// Docking port surrogate: a back wall plus two side walls around the dock
/// pose at the origin, approached along +x. The back wall face sits 5 mm
/// inside the docked sphere so that the docked state is in contact.
pub fn docking_world() -> Vec<CollisionShape> {
    let wall = |center: [f64; 3], half_extents: [f64; 3]| CollisionShape::Box {
        half_extents,
        center,
        orientation: [1.0, 0.0, 0.0, 0.0],
    };
    vec![
        wall([0.195, 0.0, 0.0], [0.05, 0.4, 0.4]),
        wall([0.0, 0.25, 0.0], [0.2, 0.05, 0.4]),
        wall([0.0, -0.25, 0.0], [0.2, 0.05, 0.4]),
    ]
}

/// Canonical docking run with a randomized start: position uniform in a 1 m
/// box centered 2 m behind the gate, attitude within 15° of the dock axis.
pub fn docking_config(seed: u64) -> ScenarioConfig {
    let gate = Vec3::new(-0.5, 0.0, 0.0);
    let plan = DockingPlan {
        pre_dock: Setpoint::hold(gate, identity_quat()),
        dock: Setpoint::hold(Vec3::zeros(), identity_quat()),
        approach_speed: DEFAULT_APPROACH_SPEED,
        gate_pos_tol: 0.05,
        gate_att_tol: 0.1,
        gate_hold: DEFAULT_GATE_HOLD,
        transit_speed: DEFAULT_TRANSIT_SPEED,
    };
    let mut cfg = ScenarioConfig::minimal(60.0);
    cfg.name = "docking".into();
    cfg.seed = seed;
    cfg.controller = ControllerConfig::Mpc { mpc: MpcConfig::default(), fallback: PdGains::default() };
    cfg.plan = PlanConfig::Docking(plan);
    cfg.contact = Some(ContactConfig {
        body_shape: default_body_shape(),
        world: docking_world(),
        stiffness: 200.0,
        damping: 20.0,
        settle: SettleTolerances { pos_tol: 0.03, vel_tol: 0.01, t_settle: 2.0 },
        max_force: default_max_force(),
    });
    cfg.initial = InitialConditions {
        state: State::at_rest(gate - 2.0 * Vec3::x(), identity_quat()),
        position_range: [[-0.5, 0.5]; 3],
        velocity_range: [[0.0, 0.0]; 3],
        attitude_cone: 15f64.to_radians(),
    };
    cfg
}

pub fn docking_scenario(seed: u64) -> Result<EpisodeSummary> {
    Ok(run_episode(&docking_config(seed))?.summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_fills_defaults() {
        let cfg = load_config(r#"{"schema": 1, "duration": 2.0}"#).unwrap();
        assert_eq!(cfg, ScenarioConfig::minimal(2.0));
        assert_eq!(cfg.dt, 0.02);
        assert_eq!(cfg.thrusters.len(), 12);
    }

    #[test]
    fn out_of_range_fault_names_field() {
        let doc = r#"{"schema": 1, "duration": 1.0, "faults": [{"thruster": 99, "kind": "stuck_off"}]}"#;
        match load_config(doc) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "faults[0].thruster"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        match load_config("{\n  \"schema\": 1,\n  \"duration\": ,\n}") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_config(r#"{"schema": 2, "duration": 1.0}"#), Err(Error::Config { .. })));
        assert!(matches!(load_config(r#"{"schema": 1, "duration": 0.0}"#), Err(Error::Config { .. })));
        assert!(matches!(load_config(r#"{"schema": 1, "duration": 1.0, "bogus": 3}"#), Err(Error::Parse { .. })));
    }

    #[test]
    fn zero_duration_episode_is_empty() {
        let ep = run_episode(&ScenarioConfig::minimal(0.0)).unwrap();
        assert!(ep.log.is_empty());
        assert_eq!(ep.summary, EpisodeSummary::default());
    }

    #[test]
    fn lateral_error_definition() {
        let d = Vec3::x();
        assert_eq!(lateral_error(&Vec3::new(0.3, 0.4, 0.0), &Vec3::zeros(), Some(&d)), 0.4);
        assert_eq!(lateral_error(&Vec3::new(0.3, 0.4, 0.0), &Vec3::zeros(), None), 0.5);
    }

    #[test]
    fn reward_fixtures() {
        assert_eq!(tracking_reward(&Vec3::zeros(), &Vec3::zeros(), &[0.0; 12]), 10.0);
        assert_eq!(tracking_reward(&Vec3::new(1.0, 0.0, 0.0), &Vec3::zeros(), &[0.0; 12]), -1.0);
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.0, -0.0, 1.0, 0.1, 1e-5, -3.25e-17, 1e300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
