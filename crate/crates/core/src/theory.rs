//! Majorized consensus equilibrium on small quadratic problems.
//!
//! Each objective is `f_i(x) = 1/2 (x - a_i)^T Q_i (x - a_i)` and its
//! surrogate at `xi` is `f_i(x) + (L_i / 2) |x - xi|^2`: the error term has an
//! `L_i`-Lipschitz gradient vanishing at `xi`, and the surrogate is
//! `p_i = lambda_min(Q_i) + L_i` strongly convex. With equal weights and
//! `rho = 1/2` the iteration is consensus ADMM in the variables
//! `z = w_bar`, `u_i = w_bar - w_i`, which gives the Lyapunov sequence
//!
//! ```text
//! E = sum_i L_i |r_i - x*|^2 + |z - x*|^2 / sigma^2 + |u_i - u_i*|^2 / sigma^2
//! ```
//!
//! with `u_i* = -sigma^2 Q_i (x* - a_i)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 8;
pub const MAX_AGENTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConsensusProblem {
    pub q: Vec<DMatrix<f64>>,
    pub a: Vec<DVector<f64>>,
    /// Lipschitz constants `L_i` of the surrogate error gradients.
    pub lipschitz: Vec<f64>,
}

impl ToyConsensusProblem {
    pub fn new(q: Vec<DMatrix<f64>>, a: Vec<DVector<f64>>, lipschitz: Vec<f64>) -> Result<Self> {
        let p = ToyConsensusProblem { q, a, lipschitz };
        p.validate()?;
        Ok(p)
    }

    /// `N` scalar objectives `1/2 (x - a_i)^2` with `L_i = 1`.
    pub fn scalars(a: &[f64]) -> Result<Self> {
        Self::new(
            a.iter().map(|_| DMatrix::identity(1, 1)).collect(),
            a.iter().map(|&v| DVector::from_element(1, v)).collect(),
            vec![1.0; a.len()],
        )
    }

    /// Random problem with `Q_i = B B^T + 0.1 I` and `L_i = lambda_min(Q_i)`,
    /// so that `p_i = 2 L_i`.
    pub fn random(agents: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = Vec::with_capacity(agents);
        let mut a = Vec::with_capacity(agents);
        for _ in 0..agents {
            let b = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
            q.push(&b * b.transpose() + DMatrix::identity(dim, dim) * 0.1);
            a.push(DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0)));
        }
        let lipschitz = q.iter().map(lambda_min).collect();
        Self::new(q, a, lipschitz)
    }

    pub fn agents(&self) -> usize {
        self.q.len()
    }

    pub fn dim(&self) -> usize {
        self.a.first().map_or(0, |a| a.len())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q.len();
        if !(2..=MAX_AGENTS).contains(&n) {
            return Err(Error::invalid(
                "toy problem",
                format!("{n} agents not in 2..={MAX_AGENTS}"),
            ));
        }
        if self.a.len() != n || self.lipschitz.len() != n {
            return Err(Error::dims(
                format!("{n} agents"),
                format!(
                    "{} centers, {} constants",
                    self.a.len(),
                    self.lipschitz.len()
                ),
            ));
        }
        let m = self.dim();
        if m == 0 || m > MAX_DIM {
            return Err(Error::invalid(
                "toy problem",
                format!("dimension {m} not in 1..={MAX_DIM}"),
            ));
        }
        for (i, (q, a)) in self.q.iter().zip(&self.a).enumerate() {
            if q.nrows() != m || q.ncols() != m || a.len() != m {
                return Err(Error::dims(
                    format!("{m}x{m} and {m}"),
                    format!("agent {i}: {}x{} and {}", q.nrows(), q.ncols(), a.len()),
                ));
            }
            if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
                return Err(Error::invalid("Q", format!("Q_{i} is not symmetric")));
            }
            if q.clone().cholesky().is_none() {
                return Err(Error::invalid(
                    "Q",
                    format!("Q_{i} is not positive definite"),
                ));
            }
        }
        if self.lipschitz.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::invalid("L", "constants must be finite and >= 0"));
        }
        Ok(())
    }

    /// Strong convexity `p_i = lambda_min(Q_i) + L_i` of each surrogate.
    pub fn strong_convexity(&self) -> Vec<f64> {
        self.q
            .iter()
            .zip(&self.lipschitz)
            .map(|(q, l)| lambda_min(q) + l)
            .collect()
    }

    pub fn objective(&self, i: usize, x: &DVector<f64>) -> f64 {
        let d = x - &self.a[i];
        0.5 * d.dot(&(&self.q[i] * &d))
    }

    pub fn surrogate(&self, i: usize, x: &DVector<f64>, xi: &DVector<f64>) -> f64 {
        self.objective(i, x) + 0.5 * self.lipschitz[i] * (x - xi).norm_squared()
    }

    /// `argmin_x f_i(x) + c/2 |x - xi|^2 + |x - v|^2 / (2 sigma^2)`.
    fn prox_with(
        &self,
        i: usize,
        v: &DVector<f64>,
        xi: &DVector<f64>,
        c: f64,
        sigma2: f64,
    ) -> DVector<f64> {
        let m = self.dim();
        let lhs = &self.q[i] + DMatrix::identity(m, m) * (c + 1.0 / sigma2);
        let rhs = &self.q[i] * &self.a[i] + xi * c + v / sigma2;
        lhs.cholesky().expect("positive definite").solve(&rhs)
    }

    /// Proximal map of `f_i`.
    pub fn prox_exact(&self, i: usize, v: &DVector<f64>, sigma2: f64) -> DVector<f64> {
        self.prox_with(i, v, v, 0.0, sigma2)
    }

    /// Proximal map of the surrogate of `f_i` at `xi`.
    pub fn prox_surrogate(
        &self,
        i: usize,
        v: &DVector<f64>,
        xi: &DVector<f64>,
        sigma2: f64,
    ) -> DVector<f64> {
        self.prox_with(i, v, xi, self.lipschitz[i], sigma2)
    }

    /// Gradient of `f_i`, its only subgradient.
    pub fn gradient(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.q[i] * (x - &self.a[i])
    }

    /// Minimizer of `sum_i f_i`: solves `sum_i Q_i (x - a_i) = 0`.
    pub fn kkt_point(&self) -> DVector<f64> {
        let m = self.dim();
        let mut lhs = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (q, a) in self.q.iter().zip(&self.a) {
            lhs += q;
            rhs += q * a;
        }
        lhs.cholesky()
            .expect("sum of positive definite matrices")
            .solve(&rhs)
    }
}

fn lambda_min(q: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(q.clone()).eigenvalues.min()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationConfig {
    pub rho: f64,
    pub sigma2: f64,
    pub max_iters: usize,
    /// Stop once `max_i |w_i^(k+1) - w_i^(k)|` falls below this.
    pub tol: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            rho: 0.5,
            sigma2: 1.0,
            max_iters: 20_000,
            tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub iterations: usize,
    pub converged: bool,
    pub limit: DVector<f64>,
    pub kkt_point: DVector<f64>,
    pub kkt_distance: f64,
    /// `E^(k)` for `k = 1, 2, ...`; empty unless `rho = 1/2`.
    pub lyapunov: Vec<f64>,
    pub lyapunov_monotone: bool,
    /// Largest increase `E^(k+1) - E^(k)` observed (zero or negative when monotone).
    pub lyapunov_max_increase: f64,
    pub plain_limit: DVector<f64>,
    /// Distance between the majorized and plain consensus limits.
    pub plain_distance: f64,
}

struct RunOutput {
    iterations: usize,
    converged: bool,
    limit: DVector<f64>,
    lyapunov: Vec<f64>,
}

fn run(problem: &ToyConsensusProblem, cfg: &ValidationConfig, majorized: bool) -> RunOutput {
    let n = problem.agents();
    let m = problem.dim();
    let weight = 1.0 / n as f64;
    let x_star = problem.kkt_point();
    let u_star: Vec<DVector<f64>> = (0..n)
        .map(|i| -problem.gradient(i, &x_star) * cfg.sigma2)
        .collect();
    let track = majorized && cfg.rho == 0.5;
    let mut w = vec![DVector::<f64>::zeros(m); n];
    let mut r = w.clone();
    let mut lyapunov = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mean = |v: &[DVector<f64>]| v.iter().fold(DVector::zeros(m), |acc, x| acc + x * weight);

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let r_new: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                if majorized {
                    problem.prox_surrogate(i, &w[i], &r[i], cfg.sigma2)
                } else {
                    problem.prox_exact(i, &w[i], cfg.sigma2)
                }
            })
            .collect();
        let x: Vec<DVector<f64>> = r_new.iter().zip(&w).map(|(r, w)| r * 2.0 - w).collect();
        let x_bar = mean(&x);
        let w_new: Vec<DVector<f64>> = w
            .iter()
            .zip(&r_new)
            .map(|(w, r)| w + (&x_bar - r) * (2.0 * cfg.rho))
            .collect();
        let step = w_new
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        w = w_new;
        r = r_new;
        if track {
            let z = mean(&w);
            let e: f64 = (0..n)
                .map(|i| {
                    let u = &z - &w[i];
                    problem.lipschitz[i] * (&r[i] - &x_star).norm_squared()
                        + ((&z - &x_star).norm_squared() + (u - &u_star[i]).norm_squared())
                            / cfg.sigma2
                })
                .sum();
            lyapunov.push(e);
        }
        if step < cfg.tol {
            converged = true;
            break;
        }
    }
    RunOutput {
        iterations,
        converged,
        limit: mean(&w),
        lyapunov,
    }
}

/// Runs the majorized iteration and plain consensus on `problem` and checks
/// the limit against the KKT point and the Lyapunov sequence for monotonicity.
pub fn validate_majorized_mace(
    problem: &ToyConsensusProblem,
    cfg: &ValidationConfig,
) -> Result<ValidationReport> {
    problem.validate()?;
    if !(cfg.rho > 0.0 && cfg.rho < 1.0) {
        return Err(Error::invalid("rho", format!("{} not in (0, 1)", cfg.rho)));
    }
    if !(cfg.sigma2 > 0.0) {
        return Err(Error::invalid(
            "sigma2",
            format!("{} must be > 0", cfg.sigma2),
        ));
    }
    let major = run(problem, cfg, true);
    let plain = run(problem, cfg, false);
    let kkt_point = problem.kkt_point();
    let max_increase = major
        .lyapunov
        .windows(2)
        .map(|p| p[1] - p[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ValidationReport {
        iterations: major.iterations,
        converged: major.converged,
        kkt_distance: (&major.limit - &kkt_point).norm(),
        plain_distance: (&major.limit - &plain.limit).norm(),
        lyapunov_monotone: !(max_increase > 1e-12),
        lyapunov_max_increase: if major.lyapunov.len() < 2 {
            0.0
        } else {
            max_increase
        },
        lyapunov: major.lyapunov,
        limit: major.limit,
        plain_limit: plain.limit,
        kkt_point,
    })
}

/// One entry of the built-in suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub report: ValidationReport,
    pub kkt_tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.converged
            && self.report.kkt_distance <= self.kkt_tolerance
            && self.report.plain_distance <= self.kkt_tolerance
            && self.report.lyapunov_monotone
    }
}

/// Scalar pair plus `random_problems` random problems with `N = 3`, `m = 4`.
pub fn run_suite(
    seed: u64,
    random_problems: usize,
    cfg: &ValidationConfig,
) -> Result<Vec<SuiteResult>> {
    let mut out = vec![SuiteResult {
        name: "scalar pair a = (1, 3)".into(),
        report: validate_majorized_mace(&ToyConsensusProblem::scalars(&[1.0, 3.0])?, cfg)?,
        kkt_tolerance: 1e-8,
    }];
    for k in 0..random_problems {
        let s = seed.wrapping_add(k as u64);
        out.push(SuiteResult {
            name: format!("random N=3 m=4 seed={s}"),
            report: validate_majorized_mace(&ToyConsensusProblem::random(3, 4, s)?, cfg)?,
            kkt_tolerance: 1e-6,
        });
    }
    Ok(out)
}
