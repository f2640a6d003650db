//! 6-DoF Newton–Euler free-flyer dynamics.
//!
//! State layout (13 components): inertial CoM position `r`, attitude quaternion `q`,
//! body-frame CoM velocity `v`, body-frame angular velocity `w`.
//!
//! Quaternions are scalar-first `(w, x, y, z)` with the Hamilton product. `q`
//! describes the body frame relative to the inertial frame, so `R(q)` maps body
//! vectors into the inertial frame (`r_dot = R v`). With body-frame rates the
//! kinematics are `q_dot = 1/2 q ⊗ (0, w) = 1/2 H(q)^T w`, where
//!
//! ```text
//!          [ -x   w   z  -y ]
//!   H(q) = [ -y  -z   w   x ]
//!          [ -z   y  -x   w ]
//! ```
//!
//! Translational and rotational equations, all in the body frame:
//!
//! ```text
//!   v_dot = F / m - w × v
//!   w_dot = I^-1 (T - w × (I w))
//! ```

use nalgebra::{Matrix3, Matrix3x4, Quaternion, SVector, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Neg, Sub};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Quat = Quaternion<f64>;
pub type StateVector = SVector<f64, 13>;
pub type Tangent = SVector<f64, 12>;

/// Default physics timestep in seconds.
pub const DEFAULT_DT: f64 = 0.02;
/// Largest accepted integration step.
pub const MAX_DT: f64 = 0.1;

const UNIT_TOL: f64 = 1e-6;

pub fn quat(w: f64, x: f64, y: f64, z: f64) -> Quat {
    Quaternion::new(w, x, y, z)
}

pub fn identity_quat() -> Quat {
    Quaternion::new(1.0, 0.0, 0.0, 0.0)
}

/// Scalar-first 4-vector view of a quaternion.
pub fn quat_to_vec4(q: &Quat) -> Vector4<f64> {
    Vector4::new(q.w, q.i, q.j, q.k)
}

pub fn vec4_to_quat(v: &Vector4<f64>) -> Quat {
    Quaternion::new(v[0], v[1], v[2], v[3])
}

fn check_unit(q: &Quat, tol: f64) -> Result<()> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > tol {
        return Err(Error::invalid(format!("quaternion norm {n} is not 1 (tolerance {tol})")));
    }
    Ok(())
}

/// Rotation matrix for a quaternion of any non-zero norm (normalized first).
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R_IB`: maps body-frame vectors to the inertial frame.
pub fn quat_to_rotation(q: &Quat) -> Result<Matrix3<f64>> {
    check_unit(q, UNIT_TOL)?;
    Ok(rotation_matrix(q))
}

/// The 3×4 quaternion kinematic matrix `H(q)`.
pub fn kinematic_matrix(q: &Quat) -> Matrix3x4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3x4::new(
        -x, w, z, -y, //
        -y, -z, w, x, //
        -z, y, -x, w,
    )
}

fn quat_rate(q: &Quat, w_body: &Vec3) -> Vector4<f64> {
    0.5 * kinematic_matrix(q).transpose() * w_body
}

/// `q_dot = 1/2 H(q)^T w` as a scalar-first 4-vector.
pub fn quat_derivative(q: &Quat, w_body: &Vec3) -> Result<Vector4<f64>> {
    check_unit(q, UNIT_TOL)?;
    Ok(quat_rate(q, w_body))
}

/// Unit quaternion for a rotation vector (axis × angle).
pub fn quat_exp(rotvec: &Vec3) -> Quat {
    let angle = rotvec.norm();
    if angle < 1e-12 {
        // second-order series keeps the result unit to rounding
        let h = 0.5 * rotvec;
        return Quaternion::new(1.0, h.x, h.y, h.z).normalize();
    }
    let axis = rotvec / angle;
    let (s, c) = (0.5 * angle).sin_cos();
    Quaternion::new(c, s * axis.x, s * axis.y, s * axis.z)
}

/// Rotation vector of a unit quaternion, taking the short way (angle ≤ π).
///
/// At exactly π the axis sign is fixed so that its first non-zero component is
/// positive.
pub fn quat_log(q: &Quat) -> Vec3 {
    let mut q = q.normalize();
    if q.w < 0.0 {
        q = -q;
    }
    let v = Vec3::new(q.i, q.j, q.k);
    let s = v.norm();
    if s < 1e-15 {
        return 2.0 * v;
    }
    let angle = 2.0 * s.atan2(q.w);
    let mut axis = v / s;
    if q.w == 0.0 {
        if let Some(first) = axis.iter().copied().find(|c| *c != 0.0) {
            if first < 0.0 {
                axis = -axis;
            }
        }
    }
    axis * angle
}

/// Spherical linear interpolation along the shorter arc.
pub fn slerp(q0: &Quat, q1: &Quat, s: f64) -> Quat {
    let rel = q0.conjugate() * q1;
    q0 * quat_exp(&(s * quat_log(&rel)))
}

/// Quaternion whose rotation matrix has the given columns (body axes in the
/// inertial frame). Columns must be orthonormal and right-handed.
pub fn quat_from_rotation(m: &Matrix3<f64>) -> Quat {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
    let uq = UnitQuaternion::from_rotation_matrix(&rot);
    let q = uq.into_inner();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Mass properties of the free-flyer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BodyParamsRepr", into = "BodyParamsRepr")]
pub struct BodyParams {
    mass: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
}

#[derive(Serialize, Deserialize)]
struct BodyParamsRepr {
    mass: f64,
    inertia: [[f64; 3]; 3],
}

impl TryFrom<BodyParamsRepr> for BodyParams {
    type Error = Error;
    fn try_from(r: BodyParamsRepr) -> Result<Self> {
        let i = r.inertia;
        BodyParams::new(r.mass, Matrix3::from_fn(|a, b| i[a][b]))
    }
}

impl From<BodyParams> for BodyParamsRepr {
    fn from(b: BodyParams) -> Self {
        let i = b.inertia;
        BodyParamsRepr {
            mass: b.mass,
            inertia: [0, 1, 2].map(|a| [0, 1, 2].map(|c| i[(a, c)])),
        }
    }
}

impl BodyParams {
    pub fn new(mass: f64, inertia: Matrix3<f64>) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::config("body.mass", format!("must be positive and finite, got {mass}")));
        }
        if inertia.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("body.inertia", "non-finite entry"));
        }
        if (inertia - inertia.transpose()).norm() >= 1e-12 {
            return Err(Error::config("body.inertia", "matrix is not symmetric"));
        }
        let eig = inertia.symmetric_eigenvalues();
        if eig.iter().any(|&e| e <= 0.0) {
            return Err(Error::config("body.inertia", "matrix is not positive definite"));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| Error::config("body.inertia", "matrix is singular"))?;
        Ok(Self { mass, inertia, inertia_inv })
    }

    pub fn diagonal(mass: f64, ixx: f64, iyy: f64, izz: f64) -> Result<Self> {
        Self::new(mass, Matrix3::from_diagonal(&Vec3::new(ixx, iyy, izz)))
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn inertia(&self) -> &Matrix3<f64> {
        &self.inertia
    }

    pub fn inertia_inv(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }
}

impl Default for BodyParams {
    /// An 8 kg, 0.3 m cube-like free-flyer.
    fn default() -> Self {
        Self::diagonal(8.0, 0.12, 0.13, 0.14).expect("default body params are valid")
    }
}

/// Body-frame force and torque.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
}

impl Wrench {
    pub fn new(force: Vec3, torque: Vec3) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(Vec3::new(s[0], s[1], s[2]), Vec3::new(s[3], s[4], s[5]))
    }
}

impl Add for Wrench {
    type Output = Wrench;
    fn add(self, o: Wrench) -> Wrench {
        Wrench::new(self.force + o.force, self.torque + o.torque)
    }
}

impl AddAssign for Wrench {
    fn add_assign(&mut self, o: Wrench) {
        self.force += o.force;
        self.torque += o.torque;
    }
}

impl Sub for Wrench {
    type Output = Wrench;
    fn sub(self, o: Wrench) -> Wrench {
        Wrench::new(self.force - o.force, self.torque - o.torque)
    }
}

impl Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench::new(-self.force, -self.torque)
    }
}

/// Rigid-body state: `[r_I, q_IB, v_B, w_B]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "StateRepr", into = "StateRepr")]
pub struct State {
    pub position: Vec3,
    pub attitude: Quat,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
}

#[derive(Serialize, Deserialize)]
struct StateRepr {
    position: [f64; 3],
    /// scalar first
    attitude: [f64; 4],
    velocity: [f64; 3],
    angular_velocity: [f64; 3],
}

impl From<StateRepr> for State {
    fn from(r: StateRepr) -> Self {
        let a = r.attitude;
        State {
            position: r.position.into(),
            attitude: quat(a[0], a[1], a[2], a[3]),
            velocity: r.velocity.into(),
            angular_velocity: r.angular_velocity.into(),
        }
    }
}

impl From<State> for StateRepr {
    fn from(s: State) -> Self {
        StateRepr {
            position: s.position.into(),
            attitude: [s.attitude.w, s.attitude.i, s.attitude.j, s.attitude.k],
            velocity: s.velocity.into(),
            angular_velocity: s.angular_velocity.into(),
        }
    }
}

impl Default for State {
    fn default() -> Self {
        Self::at_rest(Vec3::zeros(), identity_quat())
    }
}

impl State {
    pub fn at_rest(position: Vec3, attitude: Quat) -> Self {
        Self {
            position,
            attitude,
            velocity: Vec3::zeros(),
            angular_velocity: Vec3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<4>(3).copy_from(&quat_to_vec4(&self.attitude));
        x.fixed_rows_mut::<3>(7).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(10).copy_from(&self.angular_velocity);
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            attitude: vec4_to_quat(&x.fixed_rows::<4>(3).into_owned()),
            velocity: x.fixed_rows::<3>(7).into_owned(),
            angular_velocity: x.fixed_rows::<3>(10).into_owned(),
        }
    }

    pub fn to_array(&self) -> [f64; 13] {
        self.to_vector().into()
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::from_vector(&StateVector::from_column_slice(&s[..13]))
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(&self.attitude)
    }

    /// CoM velocity expressed in the inertial frame.
    pub fn inertial_velocity(&self) -> Vec3 {
        self.rotation() * self.velocity
    }

    /// Applies a 12-dimensional tangent perturbation `[dr, dθ, dv, dw]`; the
    /// attitude part is a body-frame rotation vector.
    pub fn retract(&self, delta: &Tangent) -> State {
        let dtheta: Vec3 = delta.fixed_rows::<3>(3).into_owned();
        State {
            position: self.position + delta.fixed_rows::<3>(0),
            attitude: (self.attitude * quat_exp(&dtheta)).normalize(),
            velocity: self.velocity + delta.fixed_rows::<3>(6),
            angular_velocity: self.angular_velocity + delta.fixed_rows::<3>(9),
        }
    }

    /// Inverse of [`State::retract`]: the tangent taking `self` to `other`.
    pub fn local_difference(&self, other: &State) -> Tangent {
        let mut d = Tangent::zeros();
        d.fixed_rows_mut::<3>(0).copy_from(&(other.position - self.position));
        d.fixed_rows_mut::<3>(3)
            .copy_from(&quat_log(&(self.attitude.conjugate() * other.attitude)));
        d.fixed_rows_mut::<3>(6).copy_from(&(other.velocity - self.velocity));
        d.fixed_rows_mut::<3>(9)
            .copy_from(&(other.angular_velocity - self.angular_velocity));
        d
    }
}

/// Time derivative of the 13-component state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative(pub StateVector);

fn derivative_vector(x: &StateVector, body: &BodyParams, wrench: &Wrench) -> StateVector {
    let q = vec4_to_quat(&x.fixed_rows::<4>(3).into_owned());
    let v: Vec3 = x.fixed_rows::<3>(7).into_owned();
    let w: Vec3 = x.fixed_rows::<3>(10).into_owned();

    let r_dot = rotation_matrix(&q) * v;
    let q_dot = quat_rate(&q, &w);
    let v_dot = wrench.force / body.mass - w.cross(&v);
    let iw = body.inertia * w;
    let w_dot = body.inertia_inv * (wrench.torque - w.cross(&iw));

    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&r_dot);
    dx.fixed_rows_mut::<4>(3).copy_from(&q_dot);
    dx.fixed_rows_mut::<3>(7).copy_from(&v_dot);
    dx.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    dx
}

/// Continuous-time dynamics.
pub fn dynamics(state: &State, body: &BodyParams, wrench: &Wrench) -> StateDerivative {
    StateDerivative(derivative_vector(&state.to_vector(), body, wrench))
}

/// One classical RK4 step followed by quaternion renormalization, without the
/// timestep guard. Negative `dt` integrates backwards.
pub fn integrate_rk4(state: &State, body: &BodyParams, wrench: &Wrench, dt: f64) -> State {
    integrate_rk4_with_accel(state, body, wrench, dt, |_| Vec3::zeros())
}

/// [`integrate_rk4`] with an additional body-frame linear acceleration
/// `extra(v_B)` added to `v̇_B` at every stage.
pub fn integrate_rk4_with_accel(
    state: &State,
    body: &BodyParams,
    wrench: &Wrench,
    dt: f64,
    extra: impl Fn(&Vec3) -> Vec3,
) -> State {
    let f = |x: &StateVector| {
        let mut dx = derivative_vector(x, body, wrench);
        let a = extra(&x.fixed_rows::<3>(7).into_owned());
        let mut v_dot = dx.fixed_rows_mut::<3>(7);
        v_dot += a;
        dx
    };
    let x = state.to_vector();
    let k1 = f(&x);
    let k2 = f(&(x + 0.5 * dt * k1));
    let k3 = f(&(x + 0.5 * dt * k2));
    let k4 = f(&(x + dt * k3));
    let x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    let mut next = State::from_vector(&x_next);
    let n = next.attitude.norm();
    next.attitude /= n;
    next
}

/// Fixed-step RK4 integration over `dt` seconds with the wrench held constant.
pub fn step(state: &State, body: &BodyParams, wrench: &Wrench, dt: f64) -> Result<State> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::invalid(format!("timestep {dt} outside (0, {MAX_DT}]")));
    }
    if !wrench.is_finite() {
        return Err(Error::invalid("non-finite wrench"));
    }
    let next = integrate_rk4(state, body, wrench, dt);
    if !next.is_finite() {
        return Err(Error::IntegrationDiverged { t: f64::NAN, dt });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn random_unit_quat(a: f64, b: f64, c: f64, d: f64) -> Quat {
        quat(a, b, c, d).normalize()
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rotation(&identity_quat()).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = std::f64::consts::FRAC_PI_4;
        let r = quat_to_rotation(&quat(h.cos(), 0.0, 0.0, h.sin())).unwrap();
        let y = r * Vec3::x();
        assert_relative_eq!(y, Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(quat_to_rotation(&quat(1.0, 0.1, 0.0, 0.0)).is_err());
        assert!(quat_derivative(&quat(2.0, 0.0, 0.0, 0.0), &Vec3::x()).is_err());
    }

    #[test]
    fn quat_rate_at_identity_about_z() {
        let omega = 0.7;
        let qd = quat_derivative(&identity_quat(), &Vec3::new(0.0, 0.0, omega)).unwrap();
        assert_relative_eq!(qd, Vector4::new(0.0, 0.0, 0.0, omega / 2.0), epsilon = 1e-15);

        // finite difference of exact axis-angle propagation
        let h = 1e-6;
        let qp = quat_to_vec4(&quat_exp(&Vec3::new(0.0, 0.0, omega * h)));
        let qm = quat_to_vec4(&quat_exp(&Vec3::new(0.0, 0.0, -omega * h)));
        let fd = (qp - qm) / (2.0 * h);
        assert_relative_eq!(qd, fd, epsilon = 1e-9);
    }

    #[test]
    fn zero_rate_zero_quat_derivative() {
        let q = random_unit_quat(0.3, -0.2, 0.5, 0.1);
        assert_eq!(quat_derivative(&q, &Vec3::zeros()).unwrap(), Vector4::zeros());
    }

    #[test]
    fn equilibrium_has_zero_derivative() {
        let body = BodyParams::default();
        let d = dynamics(&State::default(), &body, &Wrench::zero());
        assert_eq!(d.0, StateVector::zeros());
    }

    #[test]
    fn newton_second_law() {
        let body = BodyParams::default();
        let w = Wrench::new(Vec3::new(body.mass(), 0.0, 0.0), Vec3::zeros());
        let d = dynamics(&State::default(), &body, &w);
        assert_relative_eq!(d.0.fixed_rows::<3>(7).into_owned(), Vec3::x(), epsilon = 1e-15);
    }

    #[test]
    fn spherical_body_has_no_gyroscopic_term() {
        let body = BodyParams::diagonal(3.0, 0.2, 0.2, 0.2).unwrap();
        let mut s = State::default();
        s.angular_velocity = Vec3::new(0.3, -1.2, 0.8);
        let d = dynamics(&s, &body, &Wrench::zero());
        assert!(d.0.fixed_rows::<3>(10).norm() < 1e-15);
    }

    #[test]
    fn linear_velocity_coupling_term_is_live() {
        let body = BodyParams::default();
        let mut s = State::default();
        s.velocity = Vec3::x();
        s.angular_velocity = Vec3::z();
        let d = dynamics(&s, &body, &Wrench::zero());
        // -w × v = -(z × x) = -y
        assert_relative_eq!(d.0.fixed_rows::<3>(7).into_owned(), -Vec3::y(), epsilon = 1e-15);
    }

    #[test]
    fn rest_is_fixed_point_of_step() {
        let body = BodyParams::default();
        let s = State::default();
        assert_eq!(step(&s, &body, &Wrench::zero(), 0.02).unwrap(), s);
    }

    #[test]
    fn step_rejects_bad_dt() {
        let body = BodyParams::default();
        let s = State::default();
        assert!(step(&s, &body, &Wrench::zero(), 0.0).is_err());
        assert!(step(&s, &body, &Wrench::zero(), 0.2).is_err());
        assert!(step(&s, &body, &Wrench::zero(), -0.01).is_err());
    }

    #[test]
    fn step_flags_divergence() {
        let body = BodyParams::default();
        let mut s = State::default();
        s.velocity = Vec3::new(f64::MAX, f64::MAX, 0.0);
        s.angular_velocity = Vec3::new(0.0, 0.0, f64::MAX);
        let err = step(&s, &body, &Wrench::zero(), 0.02).unwrap_err();
        assert!(matches!(err, Error::IntegrationDiverged { .. }));
    }

    #[test]
    fn constant_force_matches_closed_form() {
        let body = BodyParams::default();
        let f = 0.37;
        let w = Wrench::new(Vec3::new(f, 0.0, 0.0), Vec3::zeros());
        let mut s = State::default();
        let n = 250;
        let dt = 0.02;
        for _ in 0..n {
            s = step(&s, &body, &w, dt).unwrap();
        }
        let t = n as f64 * dt;
        assert!((s.velocity.norm() - f * t / body.mass()).abs() < 1e-9);
        assert!((s.position.x - 0.5 * f / body.mass() * t * t).abs() < 1e-9);
    }

    #[test]
    fn bad_body_params_rejected() {
        assert!(BodyParams::diagonal(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(BodyParams::diagonal(1.0, 1.0, -1.0, 1.0).is_err());
        let mut m = Matrix3::identity();
        m[(0, 1)] = 0.1;
        assert!(BodyParams::new(1.0, m).is_err());
    }

    #[test]
    fn log_exp_roundtrip_and_pi_tiebreak() {
        let v = Vec3::new(0.3, -0.4, 1.1);
        assert_relative_eq!(quat_log(&quat_exp(&v)), v, epsilon = 1e-12);
        let half_turn = quat(0.0, 0.0, -1.0, 0.0);
        let l = quat_log(&half_turn);
        assert_relative_eq!(l, Vec3::new(0.0, std::f64::consts::PI, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn retract_inverts_local_difference() {
        let a = State {
            position: Vec3::new(1.0, 2.0, 3.0),
            attitude: random_unit_quat(0.9, 0.1, -0.3, 0.2),
            velocity: Vec3::new(0.1, 0.0, -0.2),
            angular_velocity: Vec3::new(0.01, 0.02, 0.03),
        };
        let mut d = Tangent::zeros();
        for i in 0..12 {
            d[i] = 0.01 * (i as f64 - 5.0);
        }
        let b = a.retract(&d);
        assert_relative_eq!(a.local_difference(&b), d, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, d in -1.0..1.0f64) {
            prop_assume!(a * a + b * b + c * c + d * d > 1e-3);
            let q = random_unit_quat(a, b, c, d);
            let r = quat_to_rotation(&q).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn quat_rate_is_tangent(a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, d in -1.0..1.0f64,
                                wx in -3.0..3.0f64, wy in -3.0..3.0f64, wz in -3.0..3.0f64) {
            prop_assume!(a * a + b * b + c * c + d * d > 1e-3);
            let q = random_unit_quat(a, b, c, d);
            let qd = quat_derivative(&q, &Vec3::new(wx, wy, wz)).unwrap();
            prop_assert!(quat_to_vec4(&q).dot(&qd).abs() < 1e-12);
        }

        #[test]
        fn step_keeps_unit_quaternion_and_is_pure(wx in -2.0..2.0f64, wy in -2.0..2.0f64, wz in -2.0..2.0f64,
                                                  fx in -1.0..1.0f64, tz in -0.1..0.1f64) {
            let body = BodyParams::default();
            let mut s = State::default();
            s.angular_velocity = Vec3::new(wx, wy, wz);
            s.velocity = Vec3::new(0.1, -0.2, 0.05);
            let w = Wrench::new(Vec3::new(fx, 0.0, 0.0), Vec3::new(0.0, 0.0, tz));
            let a = step(&s, &body, &w, 0.02).unwrap();
            let b = step(&s, &body, &w, 0.02).unwrap();
            prop_assert!((a.attitude.norm() - 1.0).abs() < 1e-9);
            prop_assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn central_difference_of_step_converges_to_dynamics() {
        let body = BodyParams::diagonal(5.0, 0.2, 0.25, 0.3).unwrap();
        let s = State {
            position: Vec3::new(0.1, 0.2, -0.3),
            attitude: random_unit_quat(0.8, 0.2, -0.4, 0.3),
            velocity: Vec3::new(0.3, -0.1, 0.2),
            angular_velocity: Vec3::new(0.5, -0.7, 0.4),
        };
        let w = Wrench::new(Vec3::new(0.2, -0.1, 0.3), Vec3::new(0.01, 0.02, -0.03));
        let f = dynamics(&s, &body, &w).0;
        let err = |h: f64| {
            let p = integrate_rk4(&s, &body, &w, h).to_vector();
            let m = integrate_rk4(&s, &body, &w, -h).to_vector();
            ((p - m) / (2.0 * h) - f).norm()
        };
        let (e1, e2) = (err(1e-2), err(1e-3));
        let order = (e1 / e2).log10();
        assert!(order >= 1.9, "observed order {order} (errors {e1:e}, {e2:e})");
    }
}
