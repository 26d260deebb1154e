//! Brute-force derivative oracles used to check the tape.
//!
//! Both are O(d) or O(d^2) in cost and refuse inputs above a dimension cap.

use super::api::{grad, value, ScalarFunction};
use crate::error::{check_dim, Error, Result};

/// Default central-difference step on unit-scaled parameters.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Largest `d` the oracles accept unless the caller raises the cap.
pub const DEFAULT_ORACLE_CAP: usize = 2000;

#[derive(Debug, Clone, Copy)]
pub struct OracleOptions {
    pub step: f64,
    pub cap: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_FD_STEP,
            cap: DEFAULT_ORACLE_CAP,
        }
    }
}

fn check_cap(d: usize, cap: usize) -> Result<()> {
    if d > cap {
        Err(Error::OracleCapExceeded { dim: d, cap })
    } else {
        Ok(())
    }
}

/// Central-difference gradient `(f(θ+h e_j) - f(θ-h e_j)) / 2h`.
pub fn fd_grad<F: ScalarFunction>(f: &F, theta: &[f64], h: f64) -> Result<Vec<f64>> {
    fd_grad_with(f, theta, OracleOptions { step: h, ..Default::default() })
}

pub fn fd_grad_with<F: ScalarFunction>(f: &F, theta: &[f64], opts: OracleOptions) -> Result<Vec<f64>> {
    check_dim("fd_grad", f.dim(), theta.len())?;
    check_cap(theta.len(), opts.cap)?;
    let h = opts.step;
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        probe[j] = theta[j] + h;
        let fp = value(f, &probe)?;
        probe[j] = theta[j] - h;
        let fm = value(f, &probe)?;
        probe[j] = theta[j];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Dense Hessian assembled column by column from central differences of the
/// reverse-mode gradient, then symmetrised. Row-major `d x d`.
pub fn dense_hessian<F: ScalarFunction>(f: &F, theta: &[f64], opts: OracleOptions) -> Result<Vec<f64>> {
    check_dim("dense_hessian", f.dim(), theta.len())?;
    let d = theta.len();
    check_cap(d, opts.cap)?;
    let h = opts.step;
    let mut probe = theta.to_vec();
    let mut hess = vec![0.0; d * d];
    for j in 0..d {
        probe[j] = theta[j] + h;
        let gp = grad(f, &probe)?;
        probe[j] = theta[j] - h;
        let gm = grad(f, &probe)?;
        probe[j] = theta[j];
        for i in 0..d {
            hess[i * d + j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (hess[i * d + j] + hess[j * d + i]);
            hess[i * d + j] = s;
            hess[j * d + i] = s;
        }
    }
    Ok(hess)
}

/// `H v` through an explicitly materialised Hessian.
pub fn dense_hessian_hvp<F: ScalarFunction>(f: &F, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim("dense_hessian_hvp", theta.len(), v.len())?;
    let hess = dense_hessian(f, theta, OracleOptions::default())?;
    Ok(mat_vec(&hess, v))
}

pub fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    m.chunks_exact(d)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
