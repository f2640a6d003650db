//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use freeflyer::contact::{CollisionShape, ContactModel, ContactPoint};
use freeflyer::rigid_body::{identity_quat, step, BodyParams, State, Vec3};
use freeflyer::rng::RngStream;
use nalgebra::{DMatrix, DVector};

/// Enumerates every active set of the LCP `w = M f + b`, `f >= 0`, `w >= 0`,
/// `f·w = 0` and returns the unique feasible solution.
pub fn brute_force_lcp(m: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    for mask in 0u32..(1 << n) {
        let active: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut f = vec![0.0; n];
        if !active.is_empty() {
            let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| m[(active[i], active[j])]);
            let rhs = DVector::from_iterator(active.len(), active.iter().map(|&i| -b[i]));
            let sol = sub.lu().solve(&rhs).expect("principal minor is invertible");
            for (k, &i) in active.iter().enumerate() {
                f[i] = sol[k];
            }
        }
        let ok = (0..n).all(|i| {
            let w: f64 = (0..n).map(|j| m[(i, j)] * f[j]).sum::<f64>() + b[i];
            f[i] >= -1e-13 && w >= -1e-13
        });
        if ok {
            return f;
        }
    }
    panic!("no feasible active set");
}

pub fn random_contacts(rng: &mut RngStream, n: usize) -> Vec<ContactPoint> {
    (0..n)
        .map(|_| {
            let normal = Vec3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal()).normalize();
            ContactPoint {
                position: -normal * 0.15 + Vec3::new(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), 0.0),
                normal,
                depth: rng.uniform(0.0, 0.01),
                rel_vel_normal: rng.uniform(-0.2, 0.1),
            }
        })
        .collect()
}

/// Sphere dropped onto the floor through the full detect/solve/integrate path;
/// returns the peak net contact force.
pub fn simulated_drop_peak(k: f64, c: f64, v0: f64, dt: f64) -> f64 {
    let body = BodyParams::diagonal(8.0, 0.12, 0.13, 0.14).unwrap();
    let floor = CollisionShape::Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 };
    let mut model = ContactModel::new(CollisionShape::Sphere { radius: 0.15, center: [0.0; 3] }, vec![floor], k, c).unwrap();
    let mut s = State::at_rest(Vec3::new(0.0, 0.0, 0.15), identity_quat());
    s.velocity = Vec3::new(0.0, 0.0, -v0);
    let mut peak: f64 = 0.0;
    for _ in 0..(3.0 / dt) as usize {
        let (_, res) = model.resolve(&s, &body, dt).unwrap();
        peak = peak.max(res.force_magnitude());
        s = step(&s, &body, &res.total_wrench, dt).unwrap();
    }
    peak
}

/// Direct spring–damper law `F = max(0, k d + c ḋ)` on the same 1-D drop,
/// integrated with RK4 at `dt / 100`.
pub fn reference_drop_peak(k: f64, c: f64, v0: f64, dt: f64) -> f64 {
    let m = 8.0;
    let h = dt / 100.0;
    let force = |d: f64, ddot: f64| if d > 0.0 { (k * d + c * ddot).max(0.0) } else { 0.0 };
    // penetration d and its rate, starting at first touch
    let (mut d, mut r) = (0.0, v0);
    let mut peak: f64 = 0.0;
    for _ in 0..(3.0 / h) as usize {
        let acc = |d: f64, r: f64| -force(d, r) / m;
        let (k1d, k1r) = (r, acc(d, r));
        let (k2d, k2r) = (r + 0.5 * h * k1r, acc(d + 0.5 * h * k1d, r + 0.5 * h * k1r));
        let (k3d, k3r) = (r + 0.5 * h * k2r, acc(d + 0.5 * h * k2d, r + 0.5 * h * k2r));
        let (k4d, k4r) = (r + h * k3r, acc(d + h * k3d, r + h * k3r));
        d += h / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        r += h / 6.0 * (k1r + 2.0 * k2r + 2.0 * k3r + k4r);
        peak = peak.max(force(d, r));
    }
    peak
}

/// `A_t = Σ_{k≥t} (γλ)^{k−t} Π_{j<k}(1−d_j) δ_k`, evaluated directly.
pub fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let value = |t: usize| if t == n { bootstrap } else { v[t] };
    let delta: Vec<f64> = (0..n).map(|t| r[t] + gamma * value(t + 1) * if d[t] { 0.0 } else { 1.0 } - v[t]).collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for k in t..n {
                let alive = (t..k).all(|j| !d[j]);
                if !alive {
                    break;
                }
                sum += (gamma * lambda).powi((k - t) as i32) * delta[k];
            }
            sum
        })
        .collect()
}
