//! EM-surrogate data-fidelity agents, one per look.
//!
//! The exact per-look likelihood `y | r ~ CN(0, A D(r) A^H + sigma_w^2 I)` is
//! replaced by the expected complete-data negative log likelihood
//!
//! ```text
//! f(r; mu, c) = sum_j log r_j + (|mu_j|^2 + c_j) / r_j
//! ```
//!
//! built from the conditional mean `mu` (advanced by one exact-line-search
//! gradient step per outer iteration) and a diagonal covariance `c`
//! (obtained by treating `A^H A` as `alpha I`). The agent output is the
//! proximal map of that surrogate, either through the per-voxel cubic
//! stationarity condition or through a clipped quadratic fit of its
//! derivative.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::volume::{ComplexVolume, RealVolume};

/// Lower bound applied to `r'` before forming `1/r'` terms.
pub const DEFAULT_R_FLOOR: f64 = 1e-12;
pub const DEFAULT_BETA_FLOOR: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmParams {
    /// Reconstruction noise variance `sigma_w^2`.
    pub sigma_w2: f64,
    /// Proximal strength `sigma^2` of the data agents.
    pub sigma2: f64,
    /// Smallest interval scale allowed for the quadratic surrogate.
    pub beta_floor: f64,
    /// Aperture transmission `alpha = ||a||_1 / n`.
    pub alpha: f64,
    pub r_floor: f64,
}

impl EmParams {
    pub fn new(sigma_w2: f64, sigma2: f64, alpha: f64) -> Result<Self> {
        let params = EmParams {
            sigma_w2,
            sigma2,
            beta_floor: DEFAULT_BETA_FLOOR,
            alpha,
            r_floor: DEFAULT_R_FLOOR,
        };
        params.validate()?;
        Ok(params)
    }

    /// Parameters matching an operator's noise variance and aperture.
    pub fn for_operator(op: &ForwardOperator, sigma2: f64) -> Result<Self> {
        Self::new(op.sigma_w2(), sigma2, op.alpha())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w2 > 0.0 && self.sigma_w2.is_finite()) {
            return Err(Error::invalid(
                "sigma_w2",
                format!("{} must be > 0", self.sigma_w2),
            ));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(
                "sigma2",
                format!("{} must be > 0", self.sigma2),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("{} not in (0, 1]", self.alpha),
            ));
        }
        if !(self.beta_floor > 1.0 && self.beta_floor.is_finite()) {
            return Err(Error::invalid(
                "beta_floor",
                format!("{} must be > 1", self.beta_floor),
            ));
        }
        if !(self.r_floor > 0.0) {
            return Err(Error::invalid(
                "r_floor",
                format!("{} must be > 0", self.r_floor),
            ));
        }
        Ok(())
    }

    pub fn noise_floor(&self) -> f64 {
        self.sigma_w2 / self.alpha
    }

    /// Interval scale for outer iteration `k`, never below `beta_floor`.
    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(beta_schedule(k)?.max(self.beta_floor))
    }
}

/// Per-look state evolved by the data agent.
#[derive(Debug, Clone, PartialEq)]
pub struct LookState {
    pub y: ComplexVolume,
    pub mu: ComplexVolume,
    pub c: RealVolume,
    pub r_agent: RealVolume,
}

impl LookState {
    pub fn new(
        y: ComplexVolume,
        mu: ComplexVolume,
        r0: RealVolume,
        params: &EmParams,
    ) -> Result<Self> {
        y.dims().check(&mu.dims())?;
        y.dims().check(&r0.dims())?;
        let r_agent = r0.map(|v| v.max(params.r_floor));
        let c = update_c(&r_agent, params.sigma_w2, params.alpha)?;
        Ok(LookState { y, mu, c, r_agent })
    }
}

/// Diagonal covariance `c_j = sigma_w^2 r'_j / (alpha r'_j + sigma_w^2)`.
pub fn update_c(r_prime: &RealVolume, sigma_w2: f64, alpha: f64) -> Result<RealVolume> {
    if !(sigma_w2 > 0.0) {
        return Err(Error::invalid(
            "sigma_w2",
            format!("{sigma_w2} must be > 0"),
        ));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha", format!("{alpha} must be > 0")));
    }
    if let Some(bad) = r_prime.as_slice().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(
            "r'",
            format!("entries must be >= 0, found {bad}"),
        ));
    }
    Ok(r_prime.map(|r| {
        if r.is_infinite() {
            sigma_w2 / alpha
        } else {
            sigma_w2 * r / (alpha * r + sigma_w2)
        }
    }))
}

/// Regularized variance `r' + sigma_w^2 / alpha` used in the mean objective.
fn floored_variance(r_prime: &RealVolume, params: &EmParams) -> RealVolume {
    let floor = params.noise_floor();
    r_prime.map(|r| r.max(0.0) + floor)
}

/// Mean objective
/// `h(g) = ||y - A g||^2 / (2 sigma_w^2) + 1/2 sum_j |g_j|^2 / (r'_j + sigma_w^2/alpha)`.
pub fn mu_objective(
    mu: &ComplexVolume,
    y: &ComplexVolume,
    r_prime: &RealVolume,
    op: &ForwardOperator,
    params: &EmParams,
) -> Result<f64> {
    let residual = op.apply(mu)?.distance(y)?;
    let var = floored_variance(r_prime, params);
    let prior: f64 = mu
        .as_slice()
        .iter()
        .zip(var.as_slice())
        .map(|(m, v)| m.norm_sqr() / v)
        .sum();
    Ok(residual * residual / (2.0 * params.sigma_w2) + 0.5 * prior)
}

/// Gradient `(1/sigma_w^2) A^H (A mu - y) + D(1 / (r' + sigma_w^2/alpha)) mu`.
fn mu_gradient(
    mu: &ComplexVolume,
    y: &ComplexVolume,
    var: &RealVolume,
    op: &ForwardOperator,
    params: &EmParams,
) -> Result<ComplexVolume> {
    let mut residual = op.apply(mu)?;
    residual
        .as_mut_slice()
        .par_iter_mut()
        .zip(y.as_slice().par_iter())
        .for_each(|(r, y)| *r -= y);
    let mut grad = op.adjoint(&residual)?;
    let inv = 1.0 / params.sigma_w2;
    grad.as_mut_slice()
        .par_iter_mut()
        .zip(mu.as_slice().par_iter().zip(var.as_slice().par_iter()))
        .for_each(|(g, (m, v))| *g = *g * inv + m / v);
    Ok(grad)
}

/// One steepest-descent step on `h` with exact line search.
///
/// Returns `mu` unchanged when the gradient vanishes.
pub fn mu_gradient_step(
    state: &LookState,
    r_prime: &RealVolume,
    op: &ForwardOperator,
    params: &EmParams,
) -> Result<ComplexVolume> {
    let var = floored_variance(r_prime, params);
    let grad = mu_gradient(&state.mu, &state.y, &var, op, params)?;
    let grad_sqr = grad.norm_sqr();
    if grad_sqr == 0.0 {
        return Ok(state.mu.clone());
    }
    // d = -grad; curvature d^H [A^H A / sigma_w^2 + D(1/var)] d.
    let a_grad = op.apply(&grad)?;
    let diag: f64 = grad
        .as_slice()
        .iter()
        .zip(var.as_slice())
        .map(|(g, v)| g.norm_sqr() / v)
        .sum();
    let curvature = a_grad.norm_sqr() / params.sigma_w2 + diag;
    let gamma = grad_sqr / curvature;
    let mut mu = state.mu.clone();
    mu.as_mut_slice()
        .par_iter_mut()
        .zip(grad.as_slice().par_iter())
        .for_each(|(m, g)| *m -= g * gamma);
    Ok(mu)
}

/// Relative residual `||C^-1 mu - A^H y / sigma_w^2|| / ||A^H y / sigma_w^2||`
/// with `C^-1 = A^H A / sigma_w^2 + D(1 / (r' + sigma_w^2/alpha))`.
pub fn mu_relative_residual(
    mu: &ComplexVolume,
    y: &ComplexVolume,
    r_prime: &RealVolume,
    op: &ForwardOperator,
    params: &EmParams,
) -> Result<f64> {
    let var = floored_variance(r_prime, params);
    let grad = mu_gradient(mu, y, &var, op, params)?;
    let rhs = op.adjoint(y)?.norm() / params.sigma_w2;
    if rhs == 0.0 {
        return Err(Error::invalid("mu residual", "A^H y vanishes"));
    }
    Ok(grad.norm() / rhs)
}

/// `sum_j log r_j + (|mu_j|^2 + c_j) / r_j`.
pub fn em_surrogate_value(r: &RealVolume, mu: &ComplexVolume, c: &RealVolume) -> Result<f64> {
    r.dims().check(&mu.dims())?;
    r.dims().check(&c.dims())?;
    if let Some(bad) = r.as_slice().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(
            "r",
            format!("entries must be > 0, found {bad}"),
        ));
    }
    Ok(r.as_slice()
        .iter()
        .zip(mu.as_slice().iter().zip(c.as_slice()))
        .map(|(r, (m, c))| r.ln() + (m.norm_sqr() + c) / r)
        .sum())
}

fn second_moment(mu: &ComplexVolume, c: &RealVolume) -> Result<Vec<f64>> {
    mu.dims().check(&c.dims())?;
    let s: Vec<f64> = mu
        .as_slice()
        .iter()
        .zip(c.as_slice())
        .map(|(m, c)| m.norm_sqr() + c)
        .collect();
    if let Some(bad) = s.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(
            "|mu|^2 + c",
            format!("must be >= 0, found {bad}"),
        ));
    }
    Ok(s)
}

/// Scalar objective `log r + s/r + (r - v)^2 / (2 sigma^2)` of the exact prox.
pub fn prox_objective(r: f64, v: f64, s: f64, sigma2: f64) -> f64 {
    r.ln() + s / r + (r - v) * (r - v) / (2.0 * sigma2)
}

/// Root of a function increasing on `[lo, hi]` with `f(lo) <= 0 <= f(hi)`,
/// by Newton steps safeguarded with bisection.
fn increasing_root(f: impl Fn(f64) -> (f64, f64), mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE)
            || hi - lo <= f64::EPSILON * hi
        {
            return next;
        }
        x = next;
    }
    x
}

/// Minimizer over `r > 0` of `log r + s/r + (r - v)^2 / (2 sigma^2)`.
///
/// Stationary points solve `r^3 - v r^2 + sigma^2 r - sigma^2 s = 0`. The cubic
/// is split at its critical points into monotone pieces, each positive root is
/// found to machine precision, and the root with the smallest objective wins
/// (ties go to the root nearest `v`).
pub fn prox_cubic_scalar(v: f64, s: f64, sigma2: f64) -> f64 {
    // s = 0 has no minimizer (log r -> -inf); use the smallest positive normal.
    let s = s.max(f64::MIN_POSITIVE);
    let poly = |r: f64| {
        let p = ((r - v) * r + sigma2) * r - sigma2 * s;
        let dp = (3.0 * r - 2.0 * v) * r + sigma2;
        (p, dp)
    };
    let bound = 1.0 + v.abs().max(sigma2).max(sigma2 * s);
    let mut breaks = vec![0.0];
    let disc = v * v - 3.0 * sigma2;
    if disc > 0.0 {
        let root = disc.sqrt();
        for c in [(v - root) / 3.0, (v + root) / 3.0] {
            if c > 0.0 {
                breaks.push(c);
            }
        }
    }
    breaks.push(bound);

    let mut roots = Vec::with_capacity(3);
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let (plo, _) = poly(lo);
        let (phi, _) = poly(hi);
        if plo <= 0.0 && phi >= 0.0 && hi > lo {
            roots.push(increasing_root(poly, lo, hi));
        } else if plo >= 0.0 && phi <= 0.0 && hi > lo {
            // Decreasing piece between the local maximum and minimum.
            let neg = |r: f64| {
                let (p, dp) = poly(r);
                (-p, -dp)
            };
            roots.push(increasing_root(neg, lo, hi));
        }
    }
    let mut best = roots[0];
    let mut best_val = prox_objective(best, v, s, sigma2);
    for &r in &roots[1..] {
        let val = prox_objective(r, v, s, sigma2);
        let tie = (val - best_val).abs() <= 1e-14 * val.abs().max(1.0);
        if (tie && (r - v).abs() < (best - v).abs()) || (!tie && val < best_val) {
            best = r;
            best_val = val;
        }
    }
    best
}

/// Exact proximal map of the EM surrogate, voxel by voxel.
pub fn prox_cubic(
    v: &RealVolume,
    mu: &ComplexVolume,
    c: &RealVolume,
    sigma2: f64,
) -> Result<RealVolume> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("sigma2", format!("{sigma2} must be > 0")));
    }
    v.dims().check(&mu.dims())?;
    let s = second_moment(mu, c)?;
    let data = v
        .as_slice()
        .par_iter()
        .zip(s.par_iter())
        .map(|(&v, &s)| prox_cubic_scalar(v, s, sigma2))
        .collect();
    RealVolume::from_vec(v.dims(), data)
}

/// Quadratic-surrogate prox update for a single voxel.
///
/// The convexified surrogate `q(r) = r/r' + s/r` has its derivative replaced
/// by the line through `(r', q'(r'))` and `(xi, q'(xi))`, where `xi` lies a
/// factor `beta` from `r'` on the side where the full prox objective
/// decreases. The closed-form minimizer is clipped to the interval between
/// `r'` and `xi`.
pub fn prox_quadratic_scalar(v: f64, r_prime: f64, s: f64, sigma2: f64, beta: f64) -> f64 {
    let dq_anchor = 1.0 / r_prime - s / (r_prime * r_prime);
    let slope = dq_anchor + (r_prime - v) / sigma2;
    let xi = if slope > 0.0 {
        r_prime / beta
    } else {
        beta * r_prime
    };
    // Secant slope of q' between r' and xi, in a cancellation-free form.
    let a = s * (xi + r_prime) / (r_prime * r_prime * xi * xi);
    let b = dq_anchor - a * r_prime;
    let r = (v - sigma2 * b) / (1.0 + sigma2 * a);
    let (lo, hi) = if xi < r_prime {
        (xi, r_prime)
    } else {
        (r_prime, xi)
    };
    r.clamp(lo, hi)
}

/// Clipped quadratic-surrogate proximal map, voxel by voxel.
pub fn prox_quadratic(
    v: &RealVolume,
    r_prime: &RealVolume,
    mu: &ComplexVolume,
    c: &RealVolume,
    sigma2: f64,
    beta: f64,
) -> Result<RealVolume> {
    if !(sigma2 > 0.0) {
        return Err(Error::invalid("sigma2", format!("{sigma2} must be > 0")));
    }
    if !(beta > 1.0 && beta.is_finite()) {
        return Err(Error::invalid("beta", format!("{beta} must be > 1")));
    }
    v.dims().check(&r_prime.dims())?;
    v.dims().check(&mu.dims())?;
    if let Some(bad) = r_prime.as_slice().iter().find(|x| !(**x > 0.0)) {
        return Err(Error::invalid(
            "r'",
            format!("entries must be > 0, found {bad}"),
        ));
    }
    let s = second_moment(mu, c)?;
    let data = v
        .as_slice()
        .par_iter()
        .zip(r_prime.as_slice().par_iter().zip(s.par_iter()))
        .map(|(&v, (&rp, &s))| prox_quadratic_scalar(v, rp, s, sigma2, beta))
        .collect();
    RealVolume::from_vec(v.dims(), data)
}

/// Interval scale `1 + 2 / ln(k + 2)` for outer iteration `k >= 1`.
pub fn beta_schedule(k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("iteration", "beta schedule starts at k = 1"));
    }
    Ok(1.0 + 2.0 / ((k + 2) as f64).ln())
}

/// Which proximal map the data agent evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxKind {
    /// Clipped quadratic surrogate with the shrinking `beta` schedule.
    #[default]
    Quadratic,
    /// Exact per-voxel cubic root.
    Cubic,
}

/// Data-fidelity agent for one look.
#[derive(Debug, Clone)]
pub struct EmAgent {
    look: LookState,
    anchor: RealVolume,
    op: Arc<ForwardOperator>,
    params: EmParams,
    prox: ProxKind,
}

impl EmAgent {
    pub fn new(
        y: ComplexVolume,
        mu: ComplexVolume,
        r0: RealVolume,
        op: Arc<ForwardOperator>,
        params: EmParams,
        prox: ProxKind,
    ) -> Result<Self> {
        params.validate()?;
        op.mask().dims().check(&y.dims())?;
        let look = LookState::new(y, mu, r0, &params)?;
        let anchor = look.r_agent.clone();
        Ok(EmAgent {
            look,
            anchor,
            op,
            params,
            prox,
        })
    }

    pub fn look(&self) -> &LookState {
        &self.look
    }

    pub fn params(&self) -> &EmParams {
        &self.params
    }

    /// Anchor `r'` used by the most recent mean update.
    pub fn anchor(&self) -> &RealVolume {
        &self.anchor
    }

    /// One outer iteration: refresh `c` and `mu` at the current anchor, then
    /// apply the surrogate prox to `w`. The output becomes the next anchor.
    pub fn step(&mut self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        let floor = self.params.r_floor;
        let anchor = self.look.r_agent.map(|r| r.max(floor));
        let c = update_c(&anchor, self.params.sigma_w2, self.params.alpha)?;
        self.look.c = c;
        self.look.mu = mu_gradient_step(&self.look, &anchor, &self.op, &self.params)?;
        let r = self.prox_at(w, &anchor, iteration)?;
        self.anchor = anchor;
        self.look.r_agent = r.clone();
        Ok(r)
    }

    /// Surrogate prox at `w` with the current `mu`, `c` and anchor, without
    /// changing the agent.
    pub fn evaluate(&self, w: &RealVolume, iteration: usize) -> Result<RealVolume> {
        let floor = self.params.r_floor;
        let anchor = self.look.r_agent.map(|r| r.max(floor));
        self.prox_at(w, &anchor, iteration)
    }

    fn prox_at(&self, w: &RealVolume, anchor: &RealVolume, iteration: usize) -> Result<RealVolume> {
        match self.prox {
            ProxKind::Quadratic => prox_quadratic(
                w,
                anchor,
                &self.look.mu,
                &self.look.c,
                self.params.sigma2,
                self.params.beta(iteration.max(1))?,
            ),
            ProxKind::Cubic => prox_cubic(w, &self.look.mu, &self.look.c, self.params.sigma2),
        }
    }

    /// Relative residual of the mean equation at the last anchor.
    pub fn mu_residual(&self) -> Result<f64> {
        mu_relative_residual(
            &self.look.mu,
            &self.look.y,
            &self.anchor,
            &self.op,
            &self.params,
        )
    }
}

/// Complex helper used by the dense oracles: `|mu_j|^2 + c_j`.
pub fn second_moments(mu: &ComplexVolume, c: &RealVolume) -> Result<RealVolume> {
    RealVolume::from_vec(mu.dims(), second_moment(mu, c)?)
}
