use freeflyer::actuation::ThrusterSystem;
use freeflyer::control::{
    mpc_solve, ControlContext, Controller, MpcConfig, MpcController, MpcModel, PdGains, ResidualModel, Setpoint,
};
use freeflyer::gp::GpHyper;
use freeflyer::rigid_body::{dynamics, identity_quat, quat, step, BodyParams, State, Vec3, Wrench};
use freeflyer::rng::RngStream;
use nalgebra::{DMatrix, DVector};

/// Cost of the 1-D double integrator `p'' = w / m` under the MPC stage cost,
/// minimized in closed form over the net force sequence. With two opposing
/// thrusters and a command penalty only one of each pair fires, so the
/// command cost equals `r_u w²`.
fn dense_1d_optimum(p0: f64, v0: f64, m: f64, h: usize, dt: f64, cfg: &MpcConfig) -> (f64, Vec<f64>) {
    // p_k = p0 + k dt v0 + Σ_j a_kj w_j, v_k = v0 + Σ_j b_kj w_j
    let mut a = DMatrix::zeros(h, h);
    let mut b = DMatrix::zeros(h, h);
    for k in 1..=h {
        for j in 0..k {
            a[(k - 1, j)] = dt * dt / m * ((k - j) as f64 - 0.5);
            b[(k - 1, j)] = dt / m;
        }
    }
    let p_free = DVector::from_fn(h, |k, _| p0 + (k + 1) as f64 * dt * v0);
    let v_free = DVector::from_element(h, v0);
    let hess = cfg.q_p * a.transpose() * &a + cfg.q_v * b.transpose() * &b + cfg.r_u * DMatrix::identity(h, h);
    let grad = cfg.q_p * a.transpose() * &p_free + cfg.q_v * b.transpose() * &v_free;
    let w = -hess.clone().cholesky().unwrap().solve(&grad);
    let p = &p_free + &a * &w;
    let v = &v_free + &b * &w;
    let cost = cfg.q_p * p.norm_squared() + cfg.q_v * v.norm_squared() + cfg.r_u * w.norm_squared();
    (cost, w.iter().copied().collect())
}

#[test]
fn one_dimensional_mpc_matches_dense_qp() {
    let body = BodyParams::diagonal(1.0, 1.0, 1.0, 1.0).unwrap();
    let sys = ThrusterSystem::new(vec![Vec3::zeros(); 2], vec![Vec3::x(), -Vec3::x()], vec![100.0; 2]).unwrap();
    let cfg = MpcConfig { horizon: 10, qp_max_iters: 20_000, qp_tol: 1e-9, ..MpcConfig::default() };
    for (p0, v0) in [(-1.0, 0.0), (0.5, 0.3), (0.2, -0.4)] {
        let mut s = State::at_rest(Vec3::new(p0, 0.0, 0.0), identity_quat());
        s.velocity.x = v0;
        let sol = mpc_solve(&s, &[Setpoint::default()], &cfg, &body, &sys, None, None).unwrap();
        let (oracle, w) = dense_1d_optimum(p0, v0, 1.0, 10, cfg.dt_c, &cfg);
        assert!(w.iter().all(|x| x.abs() < 100.0), "oracle must be interior to the thrust bound");
        assert!((sol.cost - oracle).abs() <= 1e-4, "mpc {} vs dense {}", sol.cost, oracle);
        for (k, wk) in w.iter().enumerate() {
            let net = sol.plan[2 * k] - sol.plan[2 * k + 1];
            assert!((net - wk).abs() < 1e-3);
        }
    }
}

#[test]
fn sqp_cost_never_increases_with_more_rounds() {
    let body = BodyParams::default();
    let sys = ThrusterSystem::default_cube();
    let mut s = State::at_rest(Vec3::new(0.4, -0.3, 0.2), quat(0.8, 0.3, -0.4, 0.3).normalize());
    s.angular_velocity = Vec3::new(0.1, -0.05, 0.08);
    let target = [Setpoint::hold(Vec3::zeros(), quat(0.9, 0.0, 0.0, 0.43).normalize())];
    let mut prev = f64::INFINITY;
    for iters in 1..=5 {
        let cfg = MpcConfig { max_iters: iters, tol: 0.0, ..MpcConfig::default() };
        let sol = mpc_solve(&s, &target, &cfg, &body, &sys, None, None).unwrap();
        assert!(sol.cost <= prev);
        prev = sol.cost;
    }
}

#[test]
fn mpc_step_response_settles() {
    let body = BodyParams::default();
    let sys = ThrusterSystem::default_cube();
    let mut ctrl = MpcController::new(MpcConfig::default(), PdGains::default(), None).unwrap();
    let goal = Setpoint::hold(Vec3::new(1.0, 0.0, 0.0), identity_quat());
    let reference = move |_t: f64| goal;
    let dt = 0.02;
    let mut s = State::default();
    let mut u = vec![0.0; sys.len()];
    let mut fallbacks = 0;
    for k in 0..2000 {
        let t = k as f64 * dt;
        if k % 5 == 0 {
            let ctx = ControlContext { t, state: &s, body: &body, system: &sys, reference: &reference };
            let out = ctrl.compute(&ctx).unwrap();
            fallbacks += out.diagnostics.fallback as usize;
            u = out.u;
        }
        assert!(u.iter().zip(sys.u_max()).all(|(x, m)| *x >= 0.0 && *x <= *m));
        s = step(&s, &body, &sys.mix(&u).unwrap(), dt).unwrap();
    }
    assert_eq!(fallbacks, 0);
    let err = (s.position - goal.position).norm();
    assert!(err <= 0.05, "steady-state error {err}");
}

#[test]
fn gp_residual_reduces_prediction_error_under_mass_bias() {
    let model_body = BodyParams::default();
    let true_body = BodyParams::new(10.0, *model_body.inertia()).unwrap();
    let mut rng = RngStream::new(11);
    let mut samples = Vec::new();
    for _ in 0..80 {
        let mut s = State::default();
        s.velocity = Vec3::new(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
        let w = Wrench::new(Vec3::new(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8)), Vec3::zeros());
        let a_true = dynamics(&s, &true_body, &w).0.fixed_rows::<3>(7).into_owned();
        let a_model = dynamics(&s, &model_body, &w).0.fixed_rows::<3>(7).into_owned();
        samples.push((s, w, a_true - a_model));
    }
    let hyper = GpHyper { lengthscale: vec![1.0, 1.0, 1.0, 0.1, 0.1, 0.1], signal_var: 1e-4, noise_var: 1e-10 };
    let residual = ResidualModel::fit(&samples, model_body.mass(), hyper).unwrap();

    let nominal = MpcModel { body: &model_body, residual: None, dt: 0.1 };
    let corrected = MpcModel { body: &model_body, residual: Some(&residual), dt: 0.1 };
    let (mut err_nom, mut err_gp) = (0.0, 0.0);
    for trial in 0..5 {
        let mut rng = RngStream::new(100 + trial);
        let seq: Vec<Wrench> = (0..20)
            .map(|_| Wrench::new(Vec3::new(rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)), Vec3::zeros()))
            .collect();
        let (mut xt, mut xn, mut xg) = (State::default(), State::default(), State::default());
        for w in &seq {
            xt = step(&xt, &true_body, w, 0.1).unwrap();
            xn = nominal.propagate(&xn, w);
            xg = corrected.propagate(&xg, w);
        }
        err_nom += (xt.position - xn.position).norm();
        err_gp += (xt.position - xg.position).norm();
    }
    assert!(err_gp < err_nom, "gp {err_gp} vs nominal {err_nom}");
}
