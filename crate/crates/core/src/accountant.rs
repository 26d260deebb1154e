//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! For integer order `α` the per-step RDP is `log(A_α) / (α - 1)` with
//!
//! ```text
//! A_α = Σ_{k=0..α} C(α,k) (1-q)^{α-k} q^k exp((k² - k) / (2σ²))
//! ```
//!
//! Conversion to `(ε, δ)` uses `ε = min_α [ rdp(α) + log(1/δ) / (α - 1) ]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integers 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

fn validate_orders(orders: &[u32]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::contract("order grid is empty"));
    }
    if orders.iter().any(|&a| a < 2) {
        return Err(Error::contract("Rényi orders must be > 1"));
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log A_α`, streamed in log space with a running log-binomial.
fn log_a_int(q: f64, sigma: f64, alpha: u32) -> f64 {
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let a = alpha as f64;
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        if k > 0 {
            log_binom += (a - kf + 1.0).ln() - kf.ln();
        }
        let term = log_binom + kf * log_q + (a - kf) * log_1mq + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

/// Per-order RDP of one step. `σ = 0` with `q > 0` yields `+∞` everywhere.
pub fn rdp_step(q: f64, sigma: f64, orders: &[u32]) -> Result<Vec<f64>> {
    validate_orders(orders)?;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract("sampling rate q must lie in [0, 1]"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::contract("noise multiplier must be >= 0"));
    }
    Ok(orders
        .iter()
        .map(|&alpha| {
            let a = alpha as f64;
            if q == 0.0 {
                0.0
            } else if sigma == 0.0 {
                f64::INFINITY
            } else if q == 1.0 {
                a / (2.0 * sigma * sigma)
            } else {
                let full = a / (2.0 * sigma * sigma);
                (log_a_int(q, sigma, alpha) / (a - 1.0)).clamp(0.0, full)
            }
        })
        .collect())
}

/// `(ε, best order)` for accumulated per-order RDP values.
pub fn rdp_to_eps(rdp: &[f64], orders: &[u32], delta: f64) -> Result<(f64, u32)> {
    validate_orders(orders)?;
    if rdp.len() != orders.len() {
        return Err(Error::DimensionMismatch {
            context: "rdp_to_eps",
            expected: orders.len(),
            got: rdp.len(),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::contract("delta must lie in (0, 1)"));
    }
    let log_inv_delta = -delta.ln();
    let mut best = (f64::INFINITY, orders[0]);
    for (&r, &alpha) in rdp.iter().zip(orders) {
        let eps = r + log_inv_delta / (alpha as f64 - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(best)
}

/// Running privacy ledger for a fixed `(q, σ)`.
///
/// Accumulated RDP is `steps × increment`, so composition is exactly
/// additive and non-decreasing in the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantLedger {
    orders: Vec<u32>,
    increment: Vec<f64>,
    steps: u64,
    q: f64,
    sigma: f64,
    delta: f64,
}

impl AccountantLedger {
    pub fn new(q: f64, sigma: f64, delta: f64, orders: Vec<u32>) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::contract("delta must lie in (0, 1)"));
        }
        let increment = rdp_step(q, sigma, &orders)?;
        Ok(Self {
            orders,
            increment,
            steps: 0,
            q,
            sigma,
            delta,
        })
    }

    pub fn with_default_orders(q: f64, sigma: f64, delta: f64) -> Result<Self> {
        Self::new(q, sigma, delta, default_orders())
    }

    pub fn step(&mut self) {
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn increment(&self) -> &[f64] {
        &self.increment
    }

    pub fn sampling_rate(&self) -> f64 {
        self.q
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.sigma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Accumulated RDP after `steps` steps, per order.
    pub fn rdp_after(&self, steps: u64) -> Vec<f64> {
        let t = steps as f64;
        self.increment
            .iter()
            .map(|&r| if steps == 0 { 0.0 } else { t * r })
            .collect()
    }

    pub fn rdp(&self) -> Vec<f64> {
        self.rdp_after(self.steps)
    }

    /// `(ε, best order)` spent so far at the ledger's δ.
    pub fn epsilon(&self) -> (f64, u32) {
        self.epsilon_after(self.steps)
    }

    pub fn epsilon_after(&self, steps: u64) -> (f64, u32) {
        rdp_to_eps(&self.rdp_after(steps), &self.orders, self.delta)
            .expect("ledger invariants hold by construction")
    }
}

/// Outcome of [`calibrate_sigma`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub sigma: f64,
    pub epsilon: f64,
    pub order: u32,
    pub iterations: usize,
}

const CALIBRATION_REL_TOL: f64 = 1e-4;
const CALIBRATION_MAX_ITERS: usize = 200;
const SIGMA_MIN: f64 = 1e-4;
const SIGMA_MAX: f64 = 1e6;

/// Smallest-noise `σ` (to within tolerance) whose `ε` after `steps` steps is
/// at most `target_eps`; the returned `ε` lies in `[(1 - 1e-4)·target, target]`.
pub fn calibrate_sigma(target_eps: f64, delta: f64, q: f64, steps: u64, orders: &[u32]) -> Result<Calibration> {
    if !(target_eps > 0.0) || !target_eps.is_finite() {
        return Err(Error::contract("target epsilon must be positive and finite"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::contract("calibration needs q in (0, 1]"));
    }
    if steps == 0 {
        return Err(Error::contract("calibration needs at least one step"));
    }
    validate_orders(orders)?;
    let eps_at = |sigma: f64| -> Result<(f64, u32)> {
        let inc = rdp_step(q, sigma, orders)?;
        let t = steps as f64;
        let rdp: Vec<f64> = inc.iter().map(|r| t * r).collect();
        rdp_to_eps(&rdp, orders, delta)
    };
    let fail = |reason: &str, lo: f64, hi: f64, iterations: usize| Error::Calibration {
        reason: reason.to_string(),
        lo,
        hi,
        iterations,
    };

    // Bracket: eps(lo) > target >= eps(hi).
    let mut hi = 1.0;
    let mut iterations = 0;
    while eps_at(hi)?.0 > target_eps {
        hi *= 2.0;
        iterations += 1;
        if hi > SIGMA_MAX {
            return Err(fail("target epsilon infeasible at any noise level", hi / 2.0, hi, iterations));
        }
    }
    let mut lo = hi / 2.0;
    while eps_at(lo)?.0 <= target_eps {
        lo /= 2.0;
        iterations += 1;
        if lo < SIGMA_MIN {
            let (epsilon, order) = eps_at(lo)?;
            return Err(fail(
                &format!("epsilon stays below target even at tiny noise (eps = {epsilon}, order {order})"),
                lo,
                hi,
                iterations,
            ));
        }
    }

    for _ in 0..CALIBRATION_MAX_ITERS {
        let (eps_hi, order) = eps_at(hi)?;
        if (target_eps - eps_hi) / target_eps <= CALIBRATION_REL_TOL {
            return Ok(Calibration {
                sigma: hi,
                epsilon: eps_hi,
                order,
                iterations,
            });
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if eps_at(mid)?.0 > target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    Err(fail("bisection did not reach tolerance", lo, hi, iterations))
}

/// Slow, independently coded evaluation of the same integer-order bound:
/// every binomial term is formed from `ln Γ` and the sum is taken with one
/// global log-sum-exp. Used to cross-check the production path.
pub mod reference {
    use statrs::function::gamma::ln_gamma;

    pub fn log_a(q: f64, sigma: f64, alpha: u32) -> f64 {
        let a = alpha as f64;
        let terms: Vec<f64> = (0..=alpha)
            .map(|k| {
                let k = k as f64;
                let log_binom = ln_gamma(a + 1.0) - ln_gamma(k + 1.0) - ln_gamma(a - k + 1.0);
                let log_pow = if k == 0.0 { 0.0 } else { k * q.ln() };
                let log_pow_c = if a - k == 0.0 { 0.0 } else { (a - k) * (1.0 - q).ln() };
                log_binom + log_pow + log_pow_c + k * (k - 1.0) / (2.0 * sigma * sigma)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    pub fn rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
        if q == 1.0 {
            return alpha as f64 / (2.0 * sigma * sigma);
        }
        log_a(q, sigma, alpha) / (alpha as f64 - 1.0)
    }

    /// `ε` after `steps` steps by brute-force search over `orders`.
    pub fn epsilon(q: f64, sigma: f64, steps: u64, delta: f64, orders: &[u32]) -> f64 {
        orders
            .iter()
            .map(|&a| steps as f64 * rdp(q, sigma, a) + (1.0 / delta).ln() / (a as f64 - 1.0))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `A_α` by quadrature of `E_{z~N(0,σ²)}[(1 - q + q·exp((2z - 1)/(2σ²)))^α]`,
    /// i.e. straight from the definition of the Rényi divergence between
    /// the subsampled mixture and the base Gaussian.
    fn log_a_quadrature(q: f64, sigma: f64, alpha: u32) -> f64 {
        let half_width = 12.0 * sigma + alpha as f64;
        let n = 400_000;
        let h = 2.0 * half_width / n as f64;
        let f = |z: f64| {
            let base = (-(z * z) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let ratio = 1.0 - q + q * ((2.0 * z - 1.0) / (2.0 * sigma * sigma)).exp();
            base * ratio.powi(alpha as i32)
        };
        // composite Simpson
        let mut s = f(-half_width) + f(half_width);
        for i in 1..n {
            let z = -half_width + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        (s * h / 3.0).ln()
    }

    #[test]
    fn gaussian_closed_form_at_full_sampling() {
        let r = rdp_step(1.0, 2.0, &[8]).unwrap();
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn binomial_form_matches_quadrature() {
        for &(q, sigma) in &[(0.01, 1.0), (0.1, 1.5), (0.05, 0.8)] {
            for alpha in [2u32, 3, 5, 8] {
                let prod = log_a_int(q, sigma, alpha);
                let quad = log_a_quadrature(q, sigma, alpha);
                assert!(
                    ((prod - quad) / quad.abs().max(1e-300)).abs() < 1e-6 || (prod - quad).abs() < 1e-10,
                    "q={q} sigma={sigma} alpha={alpha}: {prod} vs {quad}"
                );
            }
        }
    }

    #[test]
    fn production_matches_reference() {
        let orders = default_orders();
        for &(q, sigma) in &[(0.01, 1.0), (0.05, 0.7), (0.3, 3.0), (0.001, 0.5)] {
            let prod = rdp_step(q, sigma, &orders).unwrap();
            for (&a, &p) in orders.iter().zip(&prod) {
                let r = reference::rdp(q, sigma, a).min(a as f64 / (2.0 * sigma * sigma));
                assert!(((p - r) / r).abs() < 1e-9, "q={q} sigma={sigma} a={a}: {p} vs {r}");
            }
        }
    }

    #[test]
    fn limits_and_sentinels() {
        let orders = default_orders();
        assert!(rdp_step(0.1, 1e6, &orders).unwrap().iter().all(|&r| r < 1e-9));
        assert!(rdp_step(0.1, 0.0, &orders).unwrap().iter().all(|r| r.is_infinite()));
        assert!(rdp_step(0.0, 1.0, &orders).unwrap().iter().all(|&r| r == 0.0));
        assert!(rdp_step(0.1, 1.0, &[1]).is_err());
    }

    #[test]
    fn subsampling_never_hurts() {
        let orders = default_orders();
        for sigma in [0.5, 1.0, 4.0] {
            let full = rdp_step(1.0, sigma, &orders).unwrap();
            for q in [0.001, 0.1, 0.9] {
                let sub = rdp_step(q, sigma, &orders).unwrap();
                assert!(sub.iter().zip(&full).all(|(s, f)| s <= f && *s >= 0.0));
            }
        }
    }

    #[test]
    fn zero_rdp_conversion() {
        let orders = default_orders();
        let (eps, order) = rdp_to_eps(&vec![0.0; orders.len()], &orders, 1e-5).unwrap();
        assert_eq!(order, 256);
        assert!((eps - (1e5f64).ln() / 255.0).abs() < 1e-15);
    }

    #[test]
    fn ledger_is_additive() {
        let mut ledger = AccountantLedger::with_default_orders(0.02, 1.1, 1e-5).unwrap();
        for _ in 0..37 {
            ledger.step();
        }
        let inc = ledger.increment().to_vec();
        assert_eq!(ledger.rdp(), inc.iter().map(|r| 37.0 * r).collect::<Vec<_>>());
        let doubled = ledger.rdp_after(74);
        assert!(doubled.iter().zip(ledger.rdp()).all(|(d, r)| *d == 2.0 * r));
        assert!(ledger.epsilon_after(74).0 >= ledger.epsilon().0);
    }

    #[test]
    fn calibration_is_monotone_and_tight() {
        let orders = default_orders();
        let mut prev = f64::INFINITY;
        for eps in [1.0, 2.0, 10.0] {
            let c = calibrate_sigma(eps, 1e-5, 0.01, 1000, &orders).unwrap();
            assert!(c.sigma < prev);
            prev = c.sigma;
            assert!(c.epsilon <= eps && c.epsilon >= 0.999 * eps);
        }
    }

    #[test]
    fn infeasible_target_reports_bracket() {
        let err = calibrate_sigma(0.01, 1e-5, 0.5, 100, &default_orders()).unwrap_err();
        assert!(matches!(err, Error::Calibration { .. }), "{err}");
    }
}
