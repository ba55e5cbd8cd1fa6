//! Renyi / zero-concentrated DP formulas, noise calibration, step sizes and
//! per-machine budget accounting.
//!
//! Privacy levels follow the `rho^2 / 2`-zCDP convention: a Gaussian release
//! with sensitivity `Delta` and per-coordinate variance `sigma^2` has
//! `rho = Delta / sigma`. All logarithms are natural.

// `!(x > 0.0)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::error::{invalid, Result};
use crate::objectives::ObjectiveConstants;

/// Order-`alpha` Renyi divergence between `N(mu, sigma^2 I)` and
/// `N(mu + Delta, sigma^2 I)`.
pub fn renyi_gaussian(alpha: f64, delta_norm: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) || !alpha.is_finite() {
        return Err(invalid(format!("Renyi order must be > 1, got {alpha}")));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if !(delta_norm >= 0.0) || !delta_norm.is_finite() {
        return Err(invalid(format!("shift norm must be >= 0, got {delta_norm}")));
    }
    Ok(alpha * delta_norm * delta_norm / (2.0 * sigma * sigma))
}

/// `(epsilon, delta)`-DP level implied by `rho^2 / 2`-zCDP.
pub fn zcdp_to_dp(rho: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(rho >= 0.0) {
        return Err(invalid(format!("rho must be >= 0, got {rho}")));
    }
    Ok(rho * rho / 2.0 + rho * (2.0 * (1.0 / delta).ln()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub rho: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl PrivacyBudget {
    pub const DEFAULT_DELTA: f64 = 1e-5;

    pub fn new(rho: f64, delta: f64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(invalid(format!("target rho must be > 0, got {rho}")));
        }
        Ok(Self {
            rho,
            delta,
            epsilon: zcdp_to_dp(rho, delta)?,
        })
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and > 0, got {v}")))
    }
}

/// Per-coordinate variance for a machine's `n_participations`-th release
/// under an untrusted server: `4 S^2 (1 + ln T) N / rho^2`.
pub fn calibrate_untrusted(s: f64, rounds: usize, rho: f64, n_participations: usize) -> Result<f64> {
    check_positive("S", s)?;
    check_positive("rho", rho)?;
    if rounds == 0 || n_participations == 0 {
        return Err(invalid("rounds and participation count must be >= 1"));
    }
    Ok(4.0 * s * s * (1.0 + (rounds as f64).ln()) * n_participations as f64 / (rho * rho))
}

/// Per-round variance of the server-side noise with a trusted server:
/// `4 S^2 T / (rho^2 m^2)`.
pub fn calibrate_trusted(s: f64, rounds: usize, rho: f64, m: usize) -> Result<f64> {
    check_positive("S", s)?;
    check_positive("rho", rho)?;
    if rounds == 0 || m == 0 {
        return Err(invalid("rounds and participants per round must be >= 1"));
    }
    let m = m as f64;
    Ok(4.0 * s * s * rounds as f64 / (rho * rho * m * m))
}

/// Spent level `2 S sqrt(sum 1 / sigma^2)` of a sequence of Gaussian releases.
pub fn account_machine(s: f64, variances: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for &v in variances {
        check_positive("variance", v)?;
        sum += 1.0 / v;
    }
    Ok(2.0 * s * sum.sqrt())
}

/// `min(rho D m / (2 S T sqrt(2 M d (1 + ln T))), 1 / (8 L T))`.
/// Ties resolve to the privacy branch.
pub fn step_size_untrusted(
    c: &ObjectiveConstants,
    rounds: usize,
    m: usize,
    machines: usize,
    dim: usize,
    rho: f64,
) -> f64 {
    let t = rounds as f64;
    let privacy = rho * c.d * m as f64
        / (2.0 * c.s * t * (2.0 * machines as f64 * dim as f64 * (1.0 + t.ln())).sqrt());
    let smooth = 1.0 / (8.0 * c.l * t);
    if privacy <= smooth {
        privacy
    } else {
        smooth
    }
}

/// `min(rho D m / (2 S T sqrt(d)), 1 / (4 L T))`.
/// Ties resolve to the privacy branch.
pub fn step_size_trusted(c: &ObjectiveConstants, rounds: usize, m: usize, dim: usize, rho: f64) -> f64 {
    let t = rounds as f64;
    let privacy = rho * c.d * m as f64 / (2.0 * c.s * t * (dim as f64).sqrt());
    let smooth = 1.0 / (4.0 * c.l * t);
    if privacy <= smooth {
        privacy
    } else {
        smooth
    }
}

/// Running per-account sums of `1 / sigma^2`; spent level is
/// `sensitivity * sqrt(sum)`.
///
/// A release with no noise at all makes the account infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    sensitivity: f64,
    inverse_variance: Vec<f64>,
    releases: Vec<usize>,
}

impl BudgetLedger {
    /// `sensitivity` is the l2 distance between neighbouring releases
    /// (`2S` per machine under an untrusted server).
    pub fn new(sensitivity: f64, accounts: usize) -> Self {
        Self {
            sensitivity,
            inverse_variance: vec![0.0; accounts],
            releases: vec![0; accounts],
        }
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn accounts(&self) -> usize {
        self.inverse_variance.len()
    }

    pub fn record(&mut self, account: usize, variance: f64) {
        self.inverse_variance[account] += if variance > 0.0 {
            1.0 / variance
        } else {
            f64::INFINITY
        };
        self.releases[account] += 1;
    }

    /// Records a release computed from data that no other release of this
    /// account touches; such releases compose in parallel.
    pub fn record_disjoint(&mut self, account: usize, variance: f64) {
        let inv = if variance > 0.0 {
            1.0 / variance
        } else {
            f64::INFINITY
        };
        self.inverse_variance[account] = self.inverse_variance[account].max(inv);
        self.releases[account] += 1;
    }

    pub fn releases(&self, account: usize) -> usize {
        self.releases[account]
    }

    pub fn spent(&self, account: usize) -> f64 {
        self.sensitivity * self.inverse_variance[account].sqrt()
    }

    pub fn max_spent(&self) -> f64 {
        (0..self.accounts()).map(|a| self.spent(a)).fold(0.0, f64::max)
    }

    /// Largest `epsilon` at `delta` over all accounts.
    pub fn max_epsilon(&self, delta: f64) -> Result<f64> {
        let rho = self.max_spent();
        if rho.is_infinite() {
            return Ok(f64::INFINITY);
        }
        zcdp_to_dp(rho, delta)
    }
}
