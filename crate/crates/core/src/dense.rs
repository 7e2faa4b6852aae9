//! Dense evaluators of the exact likelihood and the exact EM surrogate.
//!
//! These build `n x n` matrices explicitly and are only meant for grids with
//! at most [`MAX_DENSE`] voxels, where they serve as references for the
//! FFT-based approximations.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::ForwardOperator;
use crate::volume::ComplexVolume;

pub const MAX_DENSE: usize = 64;

fn check_size(n: usize, a: &DMatrix<Complex64>) -> Result<()> {
    if n == 0 || n > MAX_DENSE {
        return Err(Error::invalid(
            "dense size",
            format!("{n} not in 1..={MAX_DENSE}"),
        ));
    }
    if a.nrows() != n || a.ncols() != n {
        return Err(Error::dims(
            format!("{n}x{n} matrix"),
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(())
}

/// Explicit matrix of `A = D(a) F`, one column per unit impulse.
pub fn operator_matrix(op: &ForwardOperator) -> Result<DMatrix<Complex64>> {
    let dims = op.mask().dims();
    let n = dims.len();
    if n > MAX_DENSE {
        return Err(Error::invalid(
            "dense size",
            format!("{n} exceeds {MAX_DENSE}"),
        ));
    }
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = ComplexVolume::zeros(dims);
        e[j] = Complex64::new(1.0, 0.0);
        let col = op.apply(&e)?;
        for i in 0..n {
            a[(i, j)] = col[i];
        }
    }
    Ok(a)
}

/// `log det(S) + y^H S^-1 y` with `S = A D(r) A^H + sigma_w^2 I`, by Cholesky.
pub fn exact_nll_dense(
    r: &[f64],
    y: &[Complex64],
    a: &DMatrix<Complex64>,
    sigma_w2: f64,
) -> Result<f64> {
    let n = r.len();
    check_size(n, a)?;
    if y.len() != n {
        return Err(Error::dims(n, y.len()));
    }
    if !(sigma_w2 > 0.0) {
        return Err(Error::invalid(
            "sigma_w2",
            format!("{sigma_w2} must be > 0"),
        ));
    }
    let d = DMatrix::from_diagonal(&DVector::from_iterator(
        n,
        r.iter().map(|&v| Complex64::new(v, 0.0)),
    ));
    let sigma = a * d * a.adjoint() + DMatrix::identity(n, n) * Complex64::new(sigma_w2, 0.0);
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::invalid("covariance", "not positive definite"))?;
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|l| 2.0 * l.re.ln())
        .sum();
    let yv = DVector::from_column_slice(y);
    let whitened = chol
        .l()
        .solve_lower_triangular(&yv)
        .ok_or_else(|| Error::invalid("covariance", "singular factor"))?;
    Ok(log_det + whitened.norm_squared())
}

/// Exact posterior of `g | y, r'`: the mean and the covariance diagonal of
/// `C = [A^H A / sigma_w^2 + D(1/r')]^-1`.
pub fn exact_posterior(
    r_prime: &[f64],
    y: &[Complex64],
    a: &DMatrix<Complex64>,
    sigma_w2: f64,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let n = r_prime.len();
    check_size(n, a)?;
    if y.len() != n {
        return Err(Error::dims(n, y.len()));
    }
    if let Some(bad) = r_prime.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(
            "r'",
            format!("entries must be > 0, found {bad}"),
        ));
    }
    let inv_noise = Complex64::new(1.0 / sigma_w2, 0.0);
    let precision = a.adjoint() * a * inv_noise
        + DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            r_prime.iter().map(|&v| Complex64::new(1.0 / v, 0.0)),
        ));
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::invalid("precision", "not positive definite"))?;
    let cov = chol.inverse();
    let rhs = a.adjoint() * DVector::from_column_slice(y) * inv_noise;
    let mu = &cov * rhs;
    Ok((
        mu.iter().copied().collect(),
        cov.diagonal().iter().map(|c| c.re).collect(),
    ))
}

/// EM surrogate `sum_j log r_j + (|mu_j|^2 + C_jj) / r_j` with the exact
/// posterior mean and covariance at anchor `r'`.
pub fn exact_em_surrogate_dense(
    r: &[f64],
    r_prime: &[f64],
    y: &[Complex64],
    a: &DMatrix<Complex64>,
    sigma_w2: f64,
) -> Result<f64> {
    if r.len() != r_prime.len() {
        return Err(Error::dims(r_prime.len(), r.len()));
    }
    if let Some(bad) = r.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid(
            "r",
            format!("entries must be > 0, found {bad}"),
        ));
    }
    let (mu, cdiag) = exact_posterior(r_prime, y, a, sigma_w2)?;
    Ok(r.iter()
        .zip(mu.iter().zip(&cdiag))
        .map(|(r, (m, c))| r.ln() + (m.norm_sqr() + c) / r)
        .sum())
}
