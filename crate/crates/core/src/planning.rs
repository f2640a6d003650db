//! Reference generation: circular inspection waypoints and the staged
//! docking approach.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::control::{attitude_error, Setpoint};
use crate::error::{Error, Result};
use crate::rigid_body::{identity_quat, quat_exp, quat_from_rotation, quat_log, rotation_matrix, State, Vec3};

pub const DEFAULT_TRANSIT_SPEED: f64 = 0.1;
pub const DEFAULT_DWELL: f64 = 5.0;
pub const DEFAULT_GATE_HOLD: f64 = 2.0;
pub const DEFAULT_APPROACH_SPEED: f64 = 0.05;
/// Slew-rate cap used to time pure-rotation segments.
pub const DEFAULT_TURN_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttitudeMode {
    /// Identity attitude at every waypoint.
    #[default]
    Fixed,
    /// Body +x toward the target center, body +z along the plane normal.
    PointAtTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionPlan {
    pub waypoints: Vec<Setpoint>,
    pub dwell: f64,
    pub standoff: f64,
    pub transit_speed: f64,
    pub turn_rate: f64,
}

/// Unit vectors spanning the plane orthogonal to `normal`; for the z normal
/// they are exactly x and y.
fn plane_basis(normal: &Vec3) -> (Vec3, Vec3) {
    let axis = (0..3)
        .min_by(|a, b| normal[*a].abs().total_cmp(&normal[*b].abs()))
        .expect("three axes");
    let e = Vec3::ith(axis, 1.0);
    let u1 = (e - normal * normal.dot(&e)).normalize();
    (u1, normal.cross(&u1))
}

#[allow(clippy::too_many_arguments)]
pub fn plan_inspection(
    target_center: Vec3,
    target_radius: f64,
    n_waypoints: usize,
    standoff: f64,
    attitude_mode: AttitudeMode,
    plane_normal: Vec3,
    dwell: f64,
    transit_speed: f64,
) -> Result<InspectionPlan> {
    if n_waypoints == 0 {
        return Err(Error::config("plan.n_waypoints", "must be >= 1"));
    }
    if !(standoff > 0.0) || !(target_radius >= 0.0) {
        return Err(Error::config("plan.standoff", "standoff must be > 0 and radius >= 0"));
    }
    if !(transit_speed > 0.0) || !(dwell >= 0.0) {
        return Err(Error::config("plan.transit_speed", "speed must be > 0 and dwell >= 0"));
    }
    if (plane_normal.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::config("plan.plane_normal", "must be unit length"));
    }
    let (u1, u2) = plane_basis(&plane_normal);
    let radius = target_radius + standoff;
    let waypoints = (0..n_waypoints)
        .map(|i| {
            let theta = std::f64::consts::TAU * i as f64 / n_waypoints as f64;
            let offset = radius * (theta.cos() * u1 + theta.sin() * u2);
            let attitude = match attitude_mode {
                AttitudeMode::Fixed => identity_quat(),
                AttitudeMode::PointAtTarget => {
                    let x = -offset / radius;
                    let m = Matrix3::from_columns(&[x, plane_normal.cross(&x), plane_normal]);
                    quat_from_rotation(&m)
                }
            };
            Setpoint::hold(target_center + offset, attitude)
        })
        .collect();
    Ok(InspectionPlan { waypoints, dwell, standoff, transit_speed, turn_rate: DEFAULT_TURN_RATE })
}

/// Straight-line, slerped transit between two poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub from: Setpoint,
    pub to: Setpoint,
    pub t_start: f64,
    pub duration: f64,
}

impl Segment {
    pub fn new(from: Setpoint, to: Setpoint, t_start: f64, speed: f64, turn_rate: f64) -> Self {
        let dist = (to.position - from.position).norm();
        let angle = attitude_error(&to.attitude, &from.attitude).norm();
        Self { from, to, t_start, duration: (dist / speed).max(angle / turn_rate) }
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.duration
    }

    pub fn direction(&self) -> Option<Vec3> {
        let d = self.to.position - self.from.position;
        (d.norm() > 1e-12).then(|| d.normalize())
    }

    /// Setpoint at absolute time `t`, clamped to the segment.
    pub fn sample(&self, t: f64) -> Setpoint {
        if self.duration <= 0.0 || t >= self.t_end() {
            return Setpoint::hold(self.to.position, self.to.attitude);
        }
        let s = ((t - self.t_start) / self.duration).max(0.0);
        let rotvec = quat_log(&(self.from.attitude.conjugate() * self.to.attitude));
        let attitude = (self.from.attitude * quat_exp(&(s * rotvec))).normalize();
        let v_inertial = (self.to.position - self.from.position) / self.duration;
        Setpoint {
            position: self.from.position + s * (self.to.position - self.from.position),
            attitude,
            velocity: rotation_matrix(&attitude).transpose() * v_inertial,
            angular_velocity: rotvec / self.duration,
        }
    }
}

impl InspectionPlan {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::config("plan.waypoints", "at least one waypoint required"));
        }
        if !(self.standoff > 0.0) {
            return Err(Error::config("plan.standoff", "must be > 0"));
        }
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let moved = (w[1].position - w[0].position).norm() > 1e-6;
            let turned = attitude_error(&w[1].attitude, &w[0].attitude).norm() > 1e-12;
            if !(moved || turned) {
                return Err(Error::config(format!("plan.waypoints[{}]", i + 1), "duplicates its predecessor"));
            }
        }
        Ok(())
    }

    /// Transit segments; each is followed by a dwell at its end waypoint.
    pub fn segments(&self) -> Vec<Segment> {
        let mut t = 0.0;
        self.waypoints
            .windows(2)
            .map(|w| {
                let seg = Segment::new(w[0], w[1], t, self.transit_speed, self.turn_rate);
                t = seg.t_end() + self.dwell;
                seg
            })
            .collect()
    }

    /// Time at which the final dwell ends.
    pub fn duration(&self) -> f64 {
        self.segments().last().map_or(self.dwell, |s| s.t_end() + self.dwell)
    }

    pub fn reference(&self, t: f64) -> Setpoint {
        self.locate(t).0
    }

    /// Transit direction at `t`, `None` while dwelling or holding.
    pub fn transit_direction(&self, t: f64) -> Option<Vec3> {
        self.locate(t).1
    }

    fn locate(&self, t: f64) -> (Setpoint, Option<Vec3>) {
        for seg in self.segments() {
            if t < seg.t_end() {
                return (seg.sample(t), seg.direction());
            }
            if t < seg.t_end() + self.dwell {
                return (Setpoint::hold(seg.to.position, seg.to.attitude), None);
            }
        }
        let last = self.waypoints.last().expect("validated non-empty");
        (Setpoint::hold(last.position, last.attitude), None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DockingPlan {
    pub pre_dock: Setpoint,
    pub dock: Setpoint,
    pub approach_speed: f64,
    /// Gate tolerance on position, m.
    pub gate_pos_tol: f64,
    /// Gate tolerance on attitude, rad.
    pub gate_att_tol: f64,
    pub gate_hold: f64,
    pub transit_speed: f64,
}

impl DockingPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.approach_speed > 0.0) || !(self.transit_speed > 0.0) {
            return Err(Error::config("plan.approach_speed", "speeds must be > 0"));
        }
        if !(self.gate_pos_tol > 0.0) || !(self.gate_att_tol > 0.0) || !(self.gate_hold >= 0.0) {
            return Err(Error::config("plan.gate", "tolerances must be > 0 and hold >= 0"));
        }
        if (self.dock.position - self.pre_dock.position).norm() <= 1e-9 {
            return Err(Error::config("plan.pre_dock", "gate must precede the dock along the approach axis"));
        }
        Ok(())
    }

    pub fn approach_axis(&self) -> Vec3 {
        (self.dock.position - self.pre_dock.position).normalize()
    }

    pub fn at_gate(&self, state: &State) -> bool {
        (state.position - self.pre_dock.position).norm() <= self.gate_pos_tol
            && attitude_error(&state.attitude, &self.pre_dock.attitude).norm() <= self.gate_att_tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DockingStage {
    Transit,
    GateHold,
    FinalApproach,
    Docked,
}

impl DockingStage {
    pub fn label(&self) -> &'static str {
        match self {
            DockingStage::Transit => "transit",
            DockingStage::GateHold => "gate_hold",
            DockingStage::FinalApproach => "final_approach",
            DockingStage::Docked => "docked",
        }
    }
}

/// Stateless classification: at the gate → GateHold, else Transit; both
/// command the gate pose.
pub fn docking_stage(state: &State, plan: &DockingPlan) -> (DockingStage, Setpoint) {
    let gate = Setpoint::hold(plan.pre_dock.position, plan.pre_dock.attitude);
    if plan.at_gate(state) {
        (DockingStage::GateHold, gate)
    } else {
        (DockingStage::Transit, gate)
    }
}

/// Per-environment stage machine; stages only advance.
#[derive(Debug, Clone, PartialEq)]
pub struct DockingSupervisor {
    pub plan: DockingPlan,
    stage: DockingStage,
    transit: Option<Segment>,
    stage_start: f64,
    approach: Option<Segment>,
}

impl DockingSupervisor {
    pub fn new(plan: DockingPlan) -> Self {
        Self { plan, stage: DockingStage::Transit, transit: None, stage_start: 0.0, approach: None }
    }

    pub fn stage(&self) -> DockingStage {
        self.stage
    }

    fn enter(&mut self, stage: DockingStage, t: f64) {
        self.stage = stage;
        self.stage_start = t;
    }

    /// Advances the stage machine and returns the active setpoint. `settled`
    /// is the contact record's settle flag.
    pub fn update(&mut self, state: &State, t: f64, settled: bool) -> (DockingStage, Setpoint) {
        let plan = self.plan;
        if self.stage == DockingStage::Transit && plan.at_gate(state) {
            self.enter(DockingStage::GateHold, t);
        }
        if self.stage == DockingStage::GateHold && t - self.stage_start >= plan.gate_hold - 1e-9 {
            self.enter(DockingStage::FinalApproach, t);
            self.approach = Some(Segment::new(plan.pre_dock, plan.dock, t, plan.approach_speed, DEFAULT_TURN_RATE));
        }
        if self.stage == DockingStage::FinalApproach && settled {
            self.enter(DockingStage::Docked, t);
        }
        let sp = match self.stage {
            DockingStage::Transit => {
                let seg = *self.transit.get_or_insert_with(|| {
                    Segment::new(Setpoint::hold(state.position, state.attitude), plan.pre_dock, t, plan.transit_speed, DEFAULT_TURN_RATE)
                });
                seg.sample(t)
            }
            DockingStage::GateHold => Setpoint::hold(plan.pre_dock.position, plan.pre_dock.attitude),
            DockingStage::FinalApproach => self.approach.expect("set on entry").sample(t),
            DockingStage::Docked => Setpoint::hold(plan.dock.position, plan.dock.attitude),
        };
        (self.stage, sp)
    }
    /// Setpoint of the current stage at time `t`, without advancing the stage.
    pub fn preview(&self, t: f64) -> Setpoint {
        let plan = self.plan;
        match self.stage {
            DockingStage::Transit => match self.transit {
                Some(seg) => seg.sample(t),
                None => Setpoint::hold(plan.pre_dock.position, plan.pre_dock.attitude),
            },
            DockingStage::GateHold => Setpoint::hold(plan.pre_dock.position, plan.pre_dock.attitude),
            DockingStage::FinalApproach => match self.approach {
                Some(seg) => seg.sample(t),
                None => Setpoint::hold(plan.dock.position, plan.dock.attitude),
            },
            DockingStage::Docked => Setpoint::hold(plan.dock.position, plan.dock.attitude),
        }
    }

    /// Unit direction of the active straight-line segment, if any.
    pub fn transit_direction(&self) -> Option<Vec3> {
        match self.stage {
            DockingStage::Transit => self.transit.and_then(|s| s.direction()),
            DockingStage::FinalApproach | DockingStage::Docked => self.approach.and_then(|s| s.direction()),
            DockingStage::GateHold => None,
        }
    }
}

/// Rotation about a random axis by an angle uniform in `[0, max_angle]`.
pub fn random_attitude_within(rng: &mut crate::rng::RngStream, max_angle: f64) -> crate::rigid_body::Quat {
    let axis = Vec3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal());
    let axis = if axis.norm() > 0.0 { axis.normalize() } else { Vec3::x() };
    quat_exp(&(axis * rng.uniform(0.0, max_angle)))
}
