//! Primitive-shape collision detection and a regularized normal-impulse solver.
//!
//! Each step the contact impulses `f` solve the convex program
//!
//! ```text
//!   min_{f >= 0}  ½ fᵀ (A + R) f + fᵀ (v⁻ - v*)
//! ```
//!
//! where `A` is the contact-space inverse inertia, `v⁻` the pre-impulse normal
//! velocity (positive when separating) and `R`, `v*` come from
//! [`compliance_targets`].
//!
//! # Compliance mapping
//!
//! For a single contact with inverse inertia `a`, penetration `d` and stiffness /
//! damping `(k, c)`, integrate the spring–damper `F = k d - c v` over one step
//! with the implicit midpoint rule:
//!
//! ```text
//!   v⁺    = v⁻ + a f
//!   v_mid = (v⁻ + v⁺) / 2
//!   d_mid = d - (dt/2) v_mid
//!   f     = dt (k d_mid - c v_mid)
//! ```
//!
//! Solving for `f` gives `f = (v* - v⁻) / (a + R)` with
//!
//! ```text
//!   β  = dt (k dt / 2 + c)
//!   R  = 2 / β
//!   v* = 2 k dt d / β - v⁻
//! ```
//!
//! which is exactly the unconstrained optimum of the program above; the `f >= 0`
//! constraint stops contacts from pulling. The midpoint rule matches the way the
//! rigid-body integrator advances position under a force held constant over the
//! step, so the combined scheme reproduces the continuous spring–damper without
//! the numerical damping of a backward-Euler mapping. At rest (`d = 0`, `v⁻ = 0`)
//! the target is zero, and as `k → ∞` the regularizer vanishes.

use nalgebra::{DMatrix, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rigid_body::{quat, rotation_matrix, BodyParams, State, Vec3, Wrench};

const PGS_TOL: f64 = 1e-8;
const PGS_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum CollisionShape {
    /// For the free-flyer, `center` is in the body frame; for world shapes it
    /// is inertial.
    Sphere {
        radius: f64,
        #[serde(default)]
        center: [f64; 3],
    },
    /// Half-space boundary `n·x = offset`; the free side is `n·x > offset`.
    Plane { normal: [f64; 3], offset: f64 },
    Box {
        half_extents: [f64; 3],
        center: [f64; 3],
        /// Scalar-first quaternion, box frame to inertial.
        #[serde(default = "identity_orientation")]
        orientation: [f64; 4],
    },
}

fn identity_orientation() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl CollisionShape {
    pub fn validate(&self) -> Result<()> {
        match self {
            CollisionShape::Sphere { radius, center } => {
                if !(*radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::config("sphere", "radius must be > 0 and center finite"));
                }
            }
            CollisionShape::Plane { normal, offset } => {
                let n = Vec3::from(*normal).norm();
                if (n - 1.0).abs() > 1e-9 || !offset.is_finite() {
                    return Err(Error::config("plane.normal", "normal must be unit length"));
                }
            }
            CollisionShape::Box { half_extents, orientation, .. } => {
                if half_extents.iter().any(|h| !(*h > 0.0)) {
                    return Err(Error::config("box.half_extents", "must be > 0"));
                }
                let q = quat(orientation[0], orientation[1], orientation[2], orientation[3]);
                if (q.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::config("box.orientation", "quaternion must be unit"));
                }
            }
        }
        Ok(())
    }
}

/// Fails unless every `(body, world)` pair has a narrow-phase routine: the
/// free-flyer must be a sphere; world shapes may be planes, boxes or spheres.
pub fn check_supported(body: &CollisionShape, world: &[CollisionShape]) -> Result<()> {
    body.validate()?;
    if !matches!(body, CollisionShape::Sphere { .. }) {
        return Err(Error::config("contact.body_shape", "only sphere free-flyer shapes are supported"));
    }
    for (i, w) in world.iter().enumerate() {
        w.validate().map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("contact.world[{i}].{field}"), reason),
            e => e,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPoint {
    /// Inertial contact location.
    pub position: Vec3,
    /// Unit normal pointing from the world shape into the free-flyer.
    pub normal: Vec3,
    /// Penetration depth, `>= 0` for reported contacts.
    pub depth: f64,
    /// Pre-impulse normal velocity of the body at the contact, positive when
    /// separating.
    pub rel_vel_normal: f64,
}

fn point_velocity(state: &State, rot: &Matrix3<f64>, p: &Vec3) -> Vec3 {
    rot * state.velocity + (rot * state.angular_velocity).cross(&(p - state.position))
}

fn sphere_contact(
    center: &Vec3,
    radius: f64,
    world: &CollisionShape,
) -> Option<(Vec3, Vec3, f64)> {
    match world {
        CollisionShape::Plane { normal, offset } => {
            let n = Vec3::from(*normal);
            let dist = n.dot(center) - offset;
            let depth = radius - dist;
            (depth >= 0.0).then(|| (center - n * dist, n, depth))
        }
        CollisionShape::Sphere { radius: r2, center: c2 } => {
            let d = center - Vec3::from(*c2);
            let dist = d.norm();
            let depth = radius + r2 - dist;
            if depth < 0.0 {
                return None;
            }
            let n = if dist > 0.0 { d / dist } else { Vec3::z() };
            Some((Vec3::from(*c2) + n * (r2 - 0.5 * depth), n, depth))
        }
        CollisionShape::Box { half_extents, center: bc, orientation } => {
            let rot = rotation_matrix(&quat(orientation[0], orientation[1], orientation[2], orientation[3]));
            let h = Vec3::from(*half_extents);
            let local = rot.transpose() * (center - Vec3::from(*bc));
            let closest = Vec3::new(
                local.x.clamp(-h.x, h.x),
                local.y.clamp(-h.y, h.y),
                local.z.clamp(-h.z, h.z),
            );
            let diff = local - closest;
            let dist = diff.norm();
            if dist > 0.0 {
                let depth = radius - dist;
                if depth < 0.0 {
                    return None;
                }
                let n = rot * (diff / dist);
                return Some((rot * closest + Vec3::from(*bc), n, depth));
            }
            // center inside the box: push out through the nearest face
            let (axis, gap) = (0..3)
                .map(|k| (k, h[k] - local[k].abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("three axes");
            let sign = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
            let n_local = Vec3::ith(axis, sign);
            let mut surface = local;
            surface[axis] = sign * h[axis];
            Some((rot * surface + Vec3::from(*bc), rot * n_local, radius + gap))
        }
    }
}

/// Narrow phase between the free-flyer's sphere and each world shape.
pub fn detect(body_shape: &CollisionShape, state: &State, world: &[CollisionShape]) -> Result<Vec<ContactPoint>> {
    let CollisionShape::Sphere { radius, center } = body_shape else {
        return Err(Error::config("contact.body_shape", "only sphere free-flyer shapes are supported"));
    };
    let rot = state.rotation();
    let c = state.position + rot * Vec3::from(*center);
    Ok(world
        .iter()
        .filter_map(|w| sphere_contact(&c, *radius, w))
        .map(|(position, normal, depth)| ContactPoint {
            position,
            normal,
            depth,
            rel_vel_normal: normal.dot(&point_velocity(state, &rot, &position)),
        })
        .collect())
}

/// Per-contact regularization `R` and target velocity `v*` (see module docs).
pub fn compliance_targets(contacts: &[ContactPoint], stiffness: f64, damping: f64, dt: f64) -> (Vec<f64>, Vec<f64>) {
    let beta = dt * (stiffness * dt / 2.0 + damping);
    contacts
        .iter()
        .map(|c| (2.0 / beta, 2.0 * stiffness * dt * c.depth / beta - c.rel_vel_normal))
        .unzip()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactSolveResult {
    /// Normal impulses, N·s.
    pub impulses: Vec<f64>,
    /// `impulses / dt`, N.
    pub forces: Vec<f64>,
    /// Equivalent body-frame wrench over the step.
    pub total_wrench: Wrench,
    pub residual: f64,
    pub sweeps: usize,
}

impl ContactSolveResult {
    pub fn empty() -> Self {
        Self {
            impulses: vec![],
            forces: vec![],
            total_wrench: Wrench::zero(),
            residual: 0.0,
            sweeps: 0,
        }
    }

    /// Magnitude of the net contact force.
    pub fn force_magnitude(&self) -> f64 {
        self.total_wrench.force.norm()
    }
}

/// Contact-space inverse inertia `A = J M⁻¹ Jᵀ` for normal-only contacts.
pub fn contact_inverse_inertia(contacts: &[ContactPoint], body: &BodyParams, state: &State) -> DMatrix<f64> {
    let rot = state.rotation();
    let iw_inv = rot * body.inertia_inv() * rot.transpose();
    let ang: Vec<Vec3> = contacts
        .iter()
        .map(|c| (c.position - state.position).cross(&c.normal))
        .collect();
    let n = contacts.len();
    DMatrix::from_fn(n, n, |i, j| {
        contacts[i].normal.dot(&contacts[j].normal) / body.mass() + ang[i].dot(&(iw_inv * ang[j]))
    })
}

/// Complementarity residual `max_i |min(f_i, ((A+R) f + v⁻ - v*)_i)|`.
pub fn complementarity_residual(m: &DMatrix<f64>, b: &[f64], f: &[f64]) -> f64 {
    (0..f.len())
        .map(|i| {
            let w: f64 = (0..f.len()).map(|j| m[(i, j)] * f[j]).sum::<f64>() + b[i];
            f[i].min(w).abs()
        })
        .fold(0.0, f64::max)
}

/// Projected Gauss–Seidel on the regularized contact program, sweeping in
/// contact-index order, optionally warm-started.
pub fn solve_contacts(
    contacts: &[ContactPoint],
    body: &BodyParams,
    state: &State,
    reg: &[f64],
    v_star: &[f64],
    dt: f64,
    warm_start: Option<&[f64]>,
) -> Result<ContactSolveResult> {
    if !(dt > 0.0) {
        return Err(Error::invalid("contact solve needs dt > 0"));
    }
    let n = contacts.len();
    if reg.len() != n || v_star.len() != n {
        return Err(Error::invalid("regularization/target length mismatch"));
    }
    if n == 0 {
        return Ok(ContactSolveResult::empty());
    }
    if reg.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::invalid("regularization must be non-negative"));
    }
    let mut m = contact_inverse_inertia(contacts, body, state);
    for i in 0..n {
        m[(i, i)] += reg[i];
    }
    let b: Vec<f64> = contacts.iter().zip(v_star).map(|(c, vs)| c.rel_vel_normal - vs).collect();
    let mut f: Vec<f64> = match warm_start {
        Some(w) if w.len() == n => w.iter().map(|x| x.max(0.0)).collect(),
        _ => vec![0.0; n],
    };
    let mut residual = complementarity_residual(&m, &b, &f);
    let mut sweeps = 0;
    while residual > PGS_TOL {
        if sweeps == PGS_MAX_SWEEPS {
            return Err(Error::SolverStall { sweeps, residual });
        }
        for i in 0..n {
            let w: f64 = (0..n).map(|j| m[(i, j)] * f[j]).sum::<f64>() + b[i];
            f[i] = (f[i] - w / m[(i, i)]).max(0.0);
        }
        sweeps += 1;
        residual = complementarity_residual(&m, &b, &f);
    }

    let rot = state.rotation();
    let mut force = Vec3::zeros();
    let mut torque = Vec3::zeros();
    for (c, fi) in contacts.iter().zip(&f) {
        let lin = c.normal * (fi / dt);
        force += lin;
        torque += (c.position - state.position).cross(&lin);
    }
    Ok(ContactSolveResult {
        forces: f.iter().map(|x| x / dt).collect(),
        impulses: f,
        total_wrench: Wrench::new(rot.transpose() * force, rot.transpose() * torque),
        residual,
        sweeps,
    })
}

/// Contact parameters of a scenario plus the warm-start cache of one
/// environment.
#[derive(Debug, Clone)]
pub struct ContactModel {
    pub body_shape: CollisionShape,
    pub world: Vec<CollisionShape>,
    pub stiffness: f64,
    pub damping: f64,
    warm: Vec<f64>,
}

impl ContactModel {
    pub fn new(body_shape: CollisionShape, world: Vec<CollisionShape>, stiffness: f64, damping: f64) -> Result<Self> {
        check_supported(&body_shape, &world)?;
        if !(stiffness > 0.0) || !(damping >= 0.0) {
            return Err(Error::config("contact", "stiffness must be > 0 and damping >= 0"));
        }
        Ok(Self { body_shape, world, stiffness, damping, warm: vec![] })
    }

    /// Detects contacts at `state` and solves for this step's impulses.
    pub fn resolve(&mut self, state: &State, body: &BodyParams, dt: f64) -> Result<(Vec<ContactPoint>, ContactSolveResult)> {
        let contacts = detect(&self.body_shape, state, &self.world)?;
        let (reg, v_star) = compliance_targets(&contacts, self.stiffness, self.damping, dt);
        let warm = (self.warm.len() == contacts.len()).then_some(self.warm.as_slice());
        let result = solve_contacts(&contacts, body, state, &reg, &v_star, dt, warm)?;
        self.warm = result.impulses.clone();
        Ok((contacts, result))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettleTolerances {
    /// Position error bound, m.
    pub pos_tol: f64,
    /// Speed bound, m/s.
    pub vel_tol: f64,
    /// Required dwell inside both bounds, s.
    pub t_settle: f64,
}

impl Default for SettleTolerances {
    fn default() -> Self {
        Self { pos_tol: 0.03, vel_tol: 0.01, t_settle: 2.0 }
    }
}

/// Docking contact bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContactRecord {
    pub first_contact_time: Option<f64>,
    pub peak_force: f64,
    pub settled: bool,
    pub settle_time: Option<f64>,
    #[serde(skip)]
    window_start: Option<f64>,
}

impl ContactRecord {
    /// Folds in one step; `force` is the net contact force magnitude.
    pub fn observe(mut self, force: f64, pose_error: f64, vel_norm: f64, t: f64, tol: &SettleTolerances) -> Self {
        if force > 0.0 && self.first_contact_time.is_none() {
            self.first_contact_time = Some(t);
        }
        self.peak_force = self.peak_force.max(force);
        if self.settled || self.first_contact_time.is_none() {
            return self;
        }
        if pose_error <= tol.pos_tol && vel_norm <= tol.vel_tol {
            let start = *self.window_start.get_or_insert(t);
            if t - start >= tol.t_settle - 1e-9 {
                self.settled = true;
                self.settle_time = Some(start);
            }
        } else {
            self.window_start = None;
        }
        self
    }
}

pub fn update_record(
    record: ContactRecord,
    result: &ContactSolveResult,
    pose_error: f64,
    vel_norm: f64,
    t: f64,
    tol: &SettleTolerances,
) -> ContactRecord {
    record.observe(result.force_magnitude(), pose_error, vel_norm, t, tol)
}
