//! Thruster geometry, per-thruster fault models, wrench mixing and allocation, and
//! additive disturbances.

use nalgebra::{DMatrix, DVector, Matrix6};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gp::{GpHyper, GpModel};
use crate::rigid_body::{State, Vec3, Wrench};
use crate::rng::RngStream;

const ALLOC_MAX_ITERS: usize = 500;
const ALLOC_TOL: f64 = 1e-8;

/// Thruster layout and the 6×n mixer matrix `B` (rows: force xyz, torque xyz).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThrusterLayout", into = "ThrusterLayout")]
pub struct ThrusterSystem {
    positions: Vec<Vec3>,
    directions: Vec<Vec3>,
    u_max: Vec<f64>,
    mixer: DMatrix<f64>,
    lipschitz: f64,
}

/// Serialized thruster layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThrusterLayout {
    pub positions: Vec<[f64; 3]>,
    pub directions: Vec<[f64; 3]>,
    pub u_max: Vec<f64>,
}

impl TryFrom<ThrusterLayout> for ThrusterSystem {
    type Error = Error;
    fn try_from(l: ThrusterLayout) -> Result<Self> {
        ThrusterSystem::new(
            l.positions.into_iter().map(Vec3::from).collect(),
            l.directions.into_iter().map(Vec3::from).collect(),
            l.u_max,
        )
    }
}

impl From<ThrusterSystem> for ThrusterLayout {
    fn from(s: ThrusterSystem) -> Self {
        ThrusterLayout {
            positions: s.positions.iter().map(|p| (*p).into()).collect(),
            directions: s.directions.iter().map(|d| (*d).into()).collect(),
            u_max: s.u_max,
        }
    }
}

impl ThrusterSystem {
    pub fn new(positions: Vec<Vec3>, directions: Vec<Vec3>, u_max: Vec<f64>) -> Result<Self> {
        let n = positions.len();
        if n == 0 {
            return Err(Error::config("thrusters", "at least one thruster is required"));
        }
        if directions.len() != n || u_max.len() != n {
            return Err(Error::config(
                "thrusters",
                format!(
                    "length mismatch: {n} positions, {} directions, {} u_max",
                    directions.len(),
                    u_max.len()
                ),
            ));
        }
        for (j, d) in directions.iter().enumerate() {
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    format!("thrusters.directions[{j}]"),
                    format!("direction must be unit length, norm is {}", d.norm()),
                ));
            }
        }
        for (j, u) in u_max.iter().enumerate() {
            if !(*u > 0.0 && u.is_finite()) {
                return Err(Error::config(
                    format!("thrusters.u_max[{j}]"),
                    format!("must lie in (0, inf), got {u}"),
                ));
            }
        }
        if positions.iter().any(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::config("thrusters.positions", "non-finite coordinate"));
        }
        let mut mixer = DMatrix::zeros(6, n);
        for j in 0..n {
            let d = directions[j];
            let t = positions[j].cross(&d);
            for r in 0..3 {
                mixer[(r, j)] = d[r];
                mixer[(r + 3, j)] = t[r];
            }
        }
        let bbt: Matrix6<f64> = Matrix6::from_iterator((&mixer * mixer.transpose()).iter().copied());
        let lipschitz = bbt.symmetric_eigenvalues().max();
        Ok(Self { positions, directions, u_max, mixer, lipschitz })
    }

    /// Twelve thrusters on a 0.3 m cube, 0.4 N each. For every axis two thrusters
    /// push along `+axis` and two along `-axis`, offset ±0.15 m along the next axis
    /// so that differential firing yields torque; `B` has rank 6.
    pub fn default_cube() -> Self {
        let half = 0.15;
        let mut positions = Vec::with_capacity(12);
        let mut directions = Vec::with_capacity(12);
        for axis in 0..3 {
            let e = Vec3::ith(axis, 1.0);
            let off = Vec3::ith((axis + 1) % 3, 1.0);
            for sign in [1.0, -1.0] {
                for side in [1.0, -1.0] {
                    directions.push(sign * e);
                    positions.push(-sign * half * e + side * half * off);
                }
            }
        }
        Self::new(positions, directions, vec![0.4; 12]).expect("default layout is valid")
    }

    pub fn len(&self) -> usize {
        self.u_max.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_max.is_empty()
    }

    pub fn u_max(&self) -> &[f64] {
        &self.u_max
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn mixer(&self) -> &DMatrix<f64> {
        &self.mixer
    }

    /// `λ_max(B Bᵀ)`, the squared spectral norm of the mixer.
    pub fn mixer_norm_sq(&self) -> f64 {
        self.lipschitz
    }

    pub fn rank(&self) -> usize {
        self.mixer.rank(1e-10)
    }

    /// Indices of the thrusters pushing along `+x, -x, +y, -y, +z, -z`.
    pub fn direction_groups(&self) -> [Vec<usize>; 6] {
        let mut groups: [Vec<usize>; 6] = Default::default();
        for (j, d) in self.directions.iter().enumerate() {
            for axis in 0..3 {
                if d[axis] > 1.0 - 1e-9 {
                    groups[2 * axis].push(j);
                } else if d[axis] < -1.0 + 1e-9 {
                    groups[2 * axis + 1].push(j);
                }
            }
        }
        groups
    }

    pub(crate) fn mix_unchecked(&self, u: &[f64]) -> Wrench {
        let mut w = [0.0; 6];
        for (j, &uj) in u.iter().enumerate() {
            if uj != 0.0 {
                for (r, wr) in w.iter_mut().enumerate() {
                    *wr += self.mixer[(r, j)] * uj;
                }
            }
        }
        Wrench::from_slice(&w)
    }

    /// `[F; T] = B u`.
    pub fn mix(&self, u_act: &[f64]) -> Result<Wrench> {
        if u_act.len() != self.len() {
            return Err(Error::invalid(format!(
                "command length {} does not match thruster count {}",
                u_act.len(),
                self.len()
            )));
        }
        if u_act.iter().any(|u| !u.is_finite()) {
            return Err(Error::invalid("non-finite thruster command"));
        }
        Ok(self.mix_unchecked(u_act))
    }

    /// Box-constrained least-squares allocation `argmin |Bu - w|²`, `0 ≤ u ≤ u_max`.
    ///
    /// Accelerated projected gradient with fixed step `1/|BᵀB|₂` and adaptive
    /// restart. Stops when the wrench residual drops below 1e-8, the iterate stops
    /// moving, or after 500 iterations. Infeasible wrenches return the constrained
    /// least-squares point.
    pub fn allocate(&self, desired: &Wrench) -> Vec<f64> {
        let n = self.len();
        let w = DVector::from_row_slice(&desired.to_array());
        let step = 1.0 / self.lipschitz;
        let b = &self.mixer;
        let bt = b.transpose();
        let project = |v: &mut DVector<f64>| {
            for j in 0..n {
                v[j] = v[j].clamp(0.0, self.u_max[j]);
            }
        };
        let mut u = DVector::zeros(n);
        if w.norm() == 0.0 {
            return vec![0.0; n];
        }
        let mut y = u.clone();
        let mut momentum = 1.0f64;
        let mut prev_obj = f64::INFINITY;
        for _ in 0..ALLOC_MAX_ITERS {
            let grad = &bt * (b * &y - &w);
            let mut u_next = &y - step * grad;
            project(&mut u_next);
            let resid = (b * &u_next - &w).norm();
            let obj = 0.5 * resid * resid;
            let moved = (&u_next - &u).norm();
            if obj > prev_obj {
                // restart: drop momentum and take a plain projected step from u
                momentum = 1.0;
                y = u.clone();
                prev_obj = f64::INFINITY;
                continue;
            }
            let m_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            y = &u_next + ((momentum - 1.0) / m_next) * (&u_next - &u);
            momentum = m_next;
            u = u_next;
            prev_obj = obj;
            if resid <= ALLOC_TOL || moved <= 1e-15 {
                break;
            }
        }
        u.iter().copied().collect()
    }
}

impl Default for ThrusterSystem {
    fn default() -> Self {
        Self::default_cube()
    }
}

/// Configured fault kind, before instantiation against a thruster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    Nominal,
    StuckOff,
    StuckOn,
    Saturation {
        u_sat: f64,
    },
    FaultyValve {
        /// `(u_dem, u_act)` pairs in newtons; defaults to
        /// `(0,0), (0.3 u_max, 0.1 u_max), (u_max, 0.8 u_max)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        breakpoints: Option<Vec<[f64; 2]>>,
    },
    Instability {
        #[serde(default = "default_instability_amplitude")]
        amplitude: f64,
        #[serde(default = "default_instability_frequency")]
        frequency: f64,
        /// Defaults to 0.05 u_max.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise_std: Option<f64>,
    },
    GpSample {
        #[serde(default = "default_gp_grid")]
        grid_points: usize,
    },
}

fn default_instability_amplitude() -> f64 {
    0.2
}

fn default_instability_frequency() -> f64 {
    1.0
}

fn default_gp_grid() -> usize {
    41
}

impl FaultSpec {
    pub fn label(&self) -> &'static str {
        match self {
            FaultSpec::Nominal => "nominal",
            FaultSpec::StuckOff => "stuck_off",
            FaultSpec::StuckOn => "stuck_on",
            FaultSpec::Saturation { .. } => "saturation",
            FaultSpec::FaultyValve { .. } => "faulty_valve",
            FaultSpec::Instability { .. } => "instability",
            FaultSpec::GpSample { .. } => "gp_sample",
        }
    }

    /// Checks parameter invariants against the thruster's `u_max`.
    pub fn validate(&self, u_max: f64) -> Result<()> {
        match self {
            FaultSpec::Saturation { u_sat } => {
                if !(*u_sat > 0.0 && *u_sat <= u_max) {
                    return Err(Error::config("u_sat", format!("must lie in (0, {u_max}], got {u_sat}")));
                }
            }
            FaultSpec::FaultyValve { breakpoints: Some(bp) } => {
                validate_breakpoints(&bp.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>())?
            }
            FaultSpec::Instability { amplitude, frequency, noise_std } => {
                if !(*amplitude >= 0.0) {
                    return Err(Error::config("amplitude", "must be >= 0"));
                }
                if !(*frequency > 0.0) {
                    return Err(Error::config("frequency", "must be > 0"));
                }
                if let Some(s) = noise_std {
                    if !(*s >= 0.0) {
                        return Err(Error::config("noise_std", "must be >= 0"));
                    }
                }
            }
            FaultSpec::GpSample { grid_points } => {
                if *grid_points < 2 {
                    return Err(Error::config("grid_points", "need at least 2 grid points"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolves defaults and, for GP faults, draws the episode's fault map.
    pub fn instantiate(&self, u_max: f64, rng: &mut RngStream) -> Result<FaultModel> {
        self.validate(u_max)?;
        Ok(match self {
            FaultSpec::Nominal => FaultModel::Nominal,
            FaultSpec::StuckOff => FaultModel::StuckOff,
            FaultSpec::StuckOn => FaultModel::StuckOn,
            FaultSpec::Saturation { u_sat } => FaultModel::Saturation { u_sat: *u_sat },
            FaultSpec::FaultyValve { breakpoints } => FaultModel::FaultyValve {
                breakpoints: match breakpoints {
                    Some(bp) => bp.iter().map(|p| (p[0], p[1])).collect(),
                    None => default_valve_breakpoints(u_max),
                },
            },
            FaultSpec::Instability { amplitude, frequency, noise_std } => FaultModel::Instability {
                amplitude: *amplitude,
                frequency: *frequency,
                noise_std: noise_std.unwrap_or(0.05 * u_max),
            },
            FaultSpec::GpSample { grid_points } => {
                FaultModel::GpSample(GpFaultMap::sample(u_max, *grid_points, rng)?)
            }
        })
    }
}

pub fn default_valve_breakpoints(u_max: f64) -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (0.3 * u_max, 0.1 * u_max), (u_max, 0.8 * u_max)]
}

fn validate_breakpoints(bp: &[(f64, f64)]) -> Result<()> {
    if bp.len() < 2 {
        return Err(Error::config("breakpoints", "need at least two breakpoints"));
    }
    if bp[0] != (0.0, 0.0) {
        return Err(Error::config("breakpoints", "first breakpoint must be (0, 0)"));
    }
    for w in bp.windows(2) {
        if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
            return Err(Error::config("breakpoints", "breakpoints must be non-decreasing"));
        }
    }
    Ok(())
}

/// A thrust map `g(u)` drawn once from a GP posterior over `u ∈ [0, u_max]`,
/// stored on a uniform grid and linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct GpFaultMap {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl GpFaultMap {
    /// Prior mean is the identity map. The residual GP is conditioned on a zero
    /// residual at `u = 0` (no command, no thrust), with lengthscale 0.3 u_max and
    /// signal variance (0.25 u_max)².
    pub fn sample(u_max: f64, grid_points: usize, rng: &mut RngStream) -> Result<Self> {
        let hyper = GpHyper {
            lengthscale: vec![0.3 * u_max],
            signal_var: (0.25 * u_max).powi(2),
            noise_var: 0.0,
        };
        let model = GpModel::fit(&[vec![0.0]], &[0.0], hyper)?;
        let grid: Vec<f64> = (0..grid_points)
            .map(|i| u_max * i as f64 / (grid_points - 1) as f64)
            .collect();
        let query: Vec<Vec<f64>> = grid.iter().map(|&u| vec![u]).collect();
        let residual = model.sample_path(&query, rng)?;
        let values = grid.iter().zip(&residual).map(|(u, r)| u + r).collect();
        Ok(Self { grid, values })
    }

    pub fn from_points(grid: Vec<f64>, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    pub fn eval(&self, u: f64) -> f64 {
        interp(&self.grid, &self.values, u)
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&xi| xi <= x) - 1;
    let (x0, x1, y0, y1) = (xs[i], xs[i + 1], ys[i], ys[i + 1]);
    if x1 == x0 {
        return y1;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Instantiated per-thruster demanded→actual thrust map `g(·)`.
#[derive(Debug, Clone, PartialEq)]
pub enum FaultModel {
    Nominal,
    StuckOff,
    StuckOn,
    Saturation { u_sat: f64 },
    FaultyValve { breakpoints: Vec<(f64, f64)> },
    Instability { amplitude: f64, frequency: f64, noise_std: f64 },
    GpSample(GpFaultMap),
}

impl FaultModel {
    pub fn is_stochastic(&self) -> bool {
        matches!(self, FaultModel::Instability { .. })
    }
}

/// `u_act = g(u_dem)`. Output always lies in `[0, u_max]`; stochastic kinds draw
/// only from `rng`.
pub fn apply_fault(
    fault: &FaultModel,
    u_dem: f64,
    u_max: f64,
    t: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(0.0..=u_max).contains(&u_dem) {
        return Err(Error::invalid(format!("demanded thrust {u_dem} outside [0, {u_max}]")));
    }
    let u = match fault {
        FaultModel::Nominal => return Ok(u_dem),
        FaultModel::StuckOff => 0.0,
        FaultModel::StuckOn => u_max,
        FaultModel::Saturation { u_sat } => u_dem.min(*u_sat),
        FaultModel::FaultyValve { breakpoints } => {
            let (xs, ys): (Vec<f64>, Vec<f64>) = breakpoints.iter().copied().unzip();
            interp(&xs, &ys, u_dem)
        }
        FaultModel::Instability { amplitude, frequency, noise_std } => {
            let phase = 2.0 * std::f64::consts::PI * frequency * t;
            u_dem * (1.0 + amplitude * phase.sin()) + rng.normal(*noise_std)
        }
        FaultModel::GpSample(map) => map.eval(u_dem),
    };
    Ok(u.clamp(0.0, u_max))
}

/// One scheduled fault: active on `thruster` for `t_on <= t < t_off`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaultEvent {
    pub thruster: usize,
    #[serde(flatten)]
    pub fault: FaultSpec,
    pub t_on: f64,
    #[serde(serialize_with = "inf_as_null::serialize")]
    pub t_off: f64,
}

/// JSON has no infinity; an open window is written as `null`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl FaultSpec {
    /// Keys accepted next to `kind` for each fault kind.
    fn parameter_keys(kind: &str) -> &'static [&'static str] {
        match kind {
            "saturation" => &["u_sat"],
            "faulty_valve" => &["breakpoints"],
            "instability" => &["amplitude", "frequency", "noise_std"],
            "gp_sample" => &["grid_points"],
            _ => &[],
        }
    }
}

impl<'de> Deserialize<'de> for FaultEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let thruster = map.remove("thruster").ok_or_else(|| D::Error::missing_field("thruster"))?;
        let thruster = usize::deserialize(thruster).map_err(D::Error::custom)?;
        let t_on = match map.remove("t_on") {
            Some(v) => f64::deserialize(v).map_err(D::Error::custom)?,
            None => 0.0,
        };
        let t_off = match map.remove("t_off") {
            Some(v) => inf_as_null::deserialize(v).map_err(D::Error::custom)?,
            None => f64::INFINITY,
        };
        let kind = map.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
        let allowed = FaultSpec::parameter_keys(&kind);
        if let Some(key) = map.keys().find(|k| *k != "kind" && !allowed.contains(&k.as_str())) {
            return Err(D::Error::custom(format!("unknown field `{key}` for fault kind `{kind}`")));
        }
        let fault = FaultSpec::deserialize(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(FaultEvent { thruster, fault, t_on, t_off })
    }
}

impl FaultEvent {
    pub fn active(&self, t: f64) -> bool {
        t >= self.t_on && t < self.t_off
    }
}

#[derive(Debug, Clone)]
struct ActiveFault {
    thruster: usize,
    label: &'static str,
    t_on: f64,
    t_off: f64,
    model: FaultModel,
}

/// Instantiated fault schedule for one episode.
#[derive(Debug, Clone, Default)]
pub struct FaultSchedule {
    entries: Vec<ActiveFault>,
}

impl FaultSchedule {
    pub fn new(events: &[FaultEvent], system: &ThrusterSystem, rng: &mut RngStream) -> Result<Self> {
        validate_fault_events(events, system)?;
        let entries = events
            .iter()
            .map(|e| {
                Ok(ActiveFault {
                    thruster: e.thruster,
                    label: e.fault.label(),
                    t_on: e.t_on,
                    t_off: e.t_off,
                    model: e.fault.instantiate(system.u_max()[e.thruster], rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn from_models(models: Vec<(usize, FaultModel)>) -> Self {
        Self {
            entries: models
                .into_iter()
                .map(|(thruster, model)| ActiveFault {
                    thruster,
                    label: "custom",
                    t_on: 0.0,
                    t_off: f64::INFINITY,
                    model,
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn active_for(&self, thruster: usize, t: f64) -> Option<&ActiveFault> {
        self.entries
            .iter()
            .find(|e| e.thruster == thruster && t >= e.t_on && t < e.t_off)
    }

    /// Maps demanded to actual thrust for every thruster at time `t`.
    pub fn apply(&self, u_dem: &[f64], u_max: &[f64], t: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
        u_dem
            .iter()
            .enumerate()
            .map(|(j, &u)| match self.active_for(j, t) {
                Some(f) => apply_fault(&f.model, u, u_max[j], t, rng),
                None => apply_fault(&FaultModel::Nominal, u, u_max[j], t, rng),
            })
            .collect()
    }

    /// Log annotation of the faults active at `t`, e.g. `"3:stuck_on"`; empty when
    /// all thrusters are nominal.
    pub fn annotation(&self, t: f64) -> String {
        self.entries
            .iter()
            .filter(|e| t >= e.t_on && t < e.t_off)
            .map(|e| format!("{}:{}", e.thruster, e.label))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn validate_fault_events(events: &[FaultEvent], system: &ThrusterSystem) -> Result<()> {
    for (i, e) in events.iter().enumerate() {
        let field = format!("faults[{i}]");
        if e.thruster >= system.len() {
            return Err(Error::config(
                format!("{field}.thruster"),
                format!("index {} out of range for {} thrusters", e.thruster, system.len()),
            ));
        }
        if !(e.t_on >= 0.0 && e.t_on < e.t_off) {
            return Err(Error::config(
                format!("{field}.t_on"),
                format!("window [{}, {}) must satisfy 0 <= t_on < t_off", e.t_on, e.t_off),
            ));
        }
        e.fault
            .validate(system.u_max()[e.thruster])
            .map_err(|err| match err {
                Error::Config { field: f, reason } => Error::config(format!("{field}.{f}"), reason),
                other => other,
            })?;
        for (k, o) in events[..i].iter().enumerate() {
            if o.thruster == e.thruster && e.t_on < o.t_off && o.t_on < e.t_off {
                return Err(Error::config(
                    field.clone(),
                    format!("window overlaps faults[{k}] on thruster {}", e.thruster),
                ));
            }
        }
    }
    Ok(())
}

/// State-dependent additive wrench term, e.g. relative-orbit corrections.
pub type DisturbanceFn = dyn Fn(&State, f64) -> Wrench + Send + Sync;

/// Additive disturbance entering the dynamics as an extra body wrench.
#[derive(Clone, Default)]
pub enum Disturbance {
    #[default]
    None,
    WhiteNoiseWrench { std_force: f64, std_torque: f64 },
    ConstantWrench(Wrench),
    Callback(Arc<DisturbanceFn>),
}

impl fmt::Debug for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Disturbance::None => write!(f, "None"),
            Disturbance::WhiteNoiseWrench { std_force, std_torque } => f
                .debug_struct("WhiteNoiseWrench")
                .field("std_force", std_force)
                .field("std_torque", std_torque)
                .finish(),
            Disturbance::ConstantWrench(w) => f.debug_tuple("ConstantWrench").field(w).finish(),
            Disturbance::Callback(_) => write!(f, "Callback(..)"),
        }
    }
}

/// Serializable disturbance description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisturbanceSpec {
    None,
    WhiteNoiseWrench { std_force: f64, std_torque: f64 },
    ConstantWrench { force: [f64; 3], torque: [f64; 3] },
}

impl DisturbanceSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DisturbanceSpec::WhiteNoiseWrench { std_force, std_torque } => {
                if !(*std_force >= 0.0 && *std_torque >= 0.0) {
                    return Err(Error::config("std_force/std_torque", "must be >= 0"));
                }
            }
            DisturbanceSpec::ConstantWrench { force, torque } => {
                if force.iter().chain(torque).any(|v| !v.is_finite()) {
                    return Err(Error::config("force/torque", "must be finite"));
                }
            }
            DisturbanceSpec::None => {}
        }
        Ok(())
    }

    pub fn build(&self) -> Disturbance {
        match self {
            DisturbanceSpec::None => Disturbance::None,
            DisturbanceSpec::WhiteNoiseWrench { std_force, std_torque } => {
                Disturbance::WhiteNoiseWrench { std_force: *std_force, std_torque: *std_torque }
            }
            DisturbanceSpec::ConstantWrench { force, torque } => {
                Disturbance::ConstantWrench(Wrench::new((*force).into(), (*torque).into()))
            }
        }
    }
}

pub fn sample_disturbance(d: &Disturbance, state: &State, t: f64, rng: &mut RngStream) -> Result<Wrench> {
    let w = match d {
        Disturbance::None => Wrench::zero(),
        Disturbance::WhiteNoiseWrench { std_force, std_torque } => {
            let f = Vec3::new(rng.normal(*std_force), rng.normal(*std_force), rng.normal(*std_force));
            let tq = Vec3::new(rng.normal(*std_torque), rng.normal(*std_torque), rng.normal(*std_torque));
            Wrench::new(f, tq)
        }
        Disturbance::ConstantWrench(w) => *w,
        Disturbance::Callback(f) => f(state, t),
    };
    if !w.is_finite() {
        return Err(Error::Disturbance { t });
    }
    Ok(w)
}
