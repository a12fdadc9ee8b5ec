//! Dense helpers for the small symmetric systems that show up in fitting:
//! Cholesky solves for ridge normal equations and Newton steps, and a
//! spectral-radius bound for stationarity checks.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower factor L with A = L Lᵀ, or an error when the matrix
/// is not positive definite to working precision.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Singular(format!(
                        "matrix not positive definite at pivot {i} (value {sum:.3e})"
                    )));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b for symmetric positive-definite A via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    Ok(solve_with_factor(&l, b))
}

/// Solve L Lᵀ x = b given a lower Cholesky factor.
pub fn solve_with_factor(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    // forward: L y = b
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    // backward: Lᵀ x = y
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    x
}

/// True iff the symmetric matrix is positive definite (Cholesky succeeds).
pub fn is_positive_definite(a: &Array2<f64>) -> bool {
    cholesky(a).is_ok()
}

/// Spectral norm (largest singular value) via power iteration on AᵀA.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 {
        return 0.0;
    }
    let ata = a.t().dot(a);
    let mut v = Array1::<f64>::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0_f64;
    for _ in 0..200 {
        let w = ata.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = &w / norm;
        let new_lambda = next.dot(&ata.dot(&next));
        let done = (new_lambda - lambda).abs() <= 1e-12 * new_lambda.abs().max(1.0);
        v = next;
        lambda = new_lambda;
        if done {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

/// Upper bound on the spectral radius via Gelfand's formula:
/// rho(A) <= ||A^(2^k)||^(1/2^k), evaluated by repeated squaring with
/// rescaling in log space. Tight enough at k = 7 to separate stable
/// from unstable dynamics.
pub fn spectral_radius_bound(a: &Array2<f64>) -> f64 {
    const K: u32 = 7;
    let mut power = a.clone();
    // After step i the running product carries a factor s_i^(2^(K-i));
    // accumulate log(s_i) / 2^i so the final root needs only one exp.
    let mut acc = 0.0_f64;
    for i in 0..K {
        let scale = spectral_norm(&power);
        if scale == 0.0 {
            return 0.0;
        }
        power.mapv_inplace(|v| v / scale);
        acc += scale.ln() / f64::powi(2.0, i as i32);
        power = power.dot(&power);
    }
    let tail = spectral_norm(&power).max(f64::MIN_POSITIVE).ln();
    (acc + tail / f64::powi(2.0, K as i32)).exp()
}
