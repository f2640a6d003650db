//! Exact Gaussian-process regression with an ARD squared-exponential kernel.
//!
//! Used to draw nonlinear thruster fault maps and as the residual model of the
//! GP-augmented MPC. Hyperparameters are set by the caller.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

const SAMPLE_JITTER: f64 = 1e-8;
const JITTER_ESCALATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Per-dimension lengthscales (one entry broadcasts to every dimension).
    pub lengthscale: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl GpHyper {
    fn validate(&self) -> Result<()> {
        if self.lengthscale.is_empty() || self.lengthscale.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::invalid("lengthscales must be positive"));
        }
        if !(self.signal_var > 0.0) {
            return Err(Error::invalid("signal variance must be positive"));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::invalid("noise variance must be non-negative"));
        }
        Ok(())
    }

    fn lengthscale(&self, d: usize) -> f64 {
        if self.lengthscale.len() == 1 {
            self.lengthscale[0]
        } else {
            self.lengthscale[d]
        }
    }

    /// `k(x, x') = s² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .enumerate()
            .map(|(d, (x, y))| {
                let z = (x - y) / self.lengthscale(d);
                z * z
            })
            .sum();
        self.signal_var * (-0.5 * r2).exp()
    }
}

/// A fitted GP posterior.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: DVector<f64>,
    hyper: GpHyper,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl GpModel {
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], hyper: GpHyper) -> Result<Self> {
        hyper.validate()?;
        let n = inputs.len();
        if n == 0 {
            return Err(Error::GpFit("need at least one training point".into()));
        }
        if targets.len() != n {
            return Err(Error::invalid(format!("{n} inputs but {} targets", targets.len())));
        }
        let dim = inputs[0].len();
        if dim == 0 || inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::invalid("training inputs must share a non-zero dimension"));
        }
        if hyper.lengthscale.len() != 1 && hyper.lengthscale.len() != dim {
            return Err(Error::invalid(format!(
                "{} lengthscales for {dim}-dimensional inputs",
                hyper.lengthscale.len()
            )));
        }
        let mut gram = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&inputs[i], &inputs[j]));
        for i in 0..n {
            gram[(i, i)] += hyper.noise_var;
        }
        let chol = Cholesky::new(gram)
            .ok_or_else(|| Error::GpFit("Gram matrix is not positive definite".into()))?;
        let targets = DVector::from_column_slice(targets);
        let alpha = chol.solve(&targets);
        Ok(Self { inputs: inputs.to_vec(), targets, hyper, chol, alpha })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    /// Lower Cholesky factor of `K + σ_n² I`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.inputs.iter().map(|xi| self.hyper.kernel(xi, x)))
    }

    /// Posterior mean only.
    pub fn mean(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.cross_cov(x).dot(&self.alpha))
    }

    /// Posterior mean and variance (variance clamped at zero).
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_dim(x)?;
        let ks = self.cross_cov(x);
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let var = self.hyper.kernel(x, x) - v.norm_squared();
        Ok((mean, var.max(0.0)))
    }

    /// Posterior mean vector and covariance over a set of query points.
    pub fn joint_posterior(&self, grid: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        for g in grid {
            self.check_dim(g)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite grid point"));
            }
        }
        let m = grid.len();
        let ks = DMatrix::from_fn(self.len(), m, |i, j| self.hyper.kernel(&self.inputs[i], &grid[j]));
        let mean = ks.transpose() * &self.alpha;
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let kss = DMatrix::from_fn(m, m, |i, j| self.hyper.kernel(&grid[i], &grid[j]));
        let cov = kss - v.transpose() * v;
        Ok((mean, cov))
    }

    /// One joint draw from the posterior over `grid`.
    pub fn sample_path(&self, grid: &[Vec<f64>], rng: &mut RngStream) -> Result<Vec<f64>> {
        let (mean, cov) = self.joint_posterior(grid)?;
        let m = grid.len();
        let mut jitter = SAMPLE_JITTER;
        let mut factor = None;
        for _ in 0..=JITTER_ESCALATIONS {
            let mut c = cov.clone();
            for i in 0..m {
                c[(i, i)] += jitter;
            }
            if let Some(ch) = Cholesky::new(c) {
                factor = Some(ch.unpack());
                break;
            }
            jitter *= 10.0;
        }
        let l = factor.ok_or(Error::GpSampling { jitter: jitter / 10.0 })?;
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.standard_normal()));
        Ok((mean + l * z).iter().copied().collect())
    }
}
