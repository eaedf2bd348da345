//! Closed-form bounds on soft backups, each checkable against realized values.

use crate::error::{param, Result};

/// Range of every Q-value visited by Q-iteration started inside `[r_min, r_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueBounds {
    pub q_min: f64,
    pub q_max: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub gamma: f64,
}

impl ValueBounds {
    pub fn contains(&self, x: f64, slack: f64) -> bool {
        x >= self.q_min - slack && x <= self.q_max + slack
    }
}

/// The ingredients and result of the per-state gap sandwich.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapBounds {
    pub lower: f64,
    pub upper: f64,
    pub delta_hat: f64,
    pub m: usize,
    pub tau: f64,
    pub q_max: f64,
}

impl GapBounds {
    pub fn new(delta_hat: f64, m: usize, tau: f64, q_max: f64) -> Result<Self> {
        Ok(GapBounds {
            lower: gap_lower_bound(delta_hat, m, tau)?,
            upper: gap_upper_bound(m, tau, q_max)?,
            delta_hat,
            m,
            tau,
            q_max,
        })
    }

    pub fn contains(&self, gap: f64, slack: f64) -> bool {
        gap >= self.lower - slack && gap <= self.upper + slack
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(param(format!("discount not in (0,1): {gamma}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(param(format!("inverse temperature must be >= 0, got {tau}")));
    }
    Ok(())
}

fn check_m(m: usize) -> Result<()> {
    if m < 2 {
        return Err(param(format!("gap bounds need m >= 2 actions, got {m}")));
    }
    Ok(())
}

/// `(r_min / (1 - gamma), r_max / (1 - gamma))`.
pub fn q_value_bounds(r_min: f64, r_max: f64, gamma: f64) -> Result<ValueBounds> {
    check_gamma(gamma)?;
    if !(r_min <= r_max) {
        return Err(param(format!("r_min {r_min} exceeds r_max {r_max}")));
    }
    Ok(ValueBounds {
        q_min: r_min / (1.0 - gamma),
        q_max: r_max / (1.0 - gamma),
        r_min,
        r_max,
        gamma,
    })
}

/// Largest possible spread between two actions' values, `2 r_max / (1 - gamma)`,
/// for rewards with `r_max >= -r_min >= 0`.
pub fn pairwise_gap_bound(r_max: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(r_max >= 0.0) {
        return Err(param(format!("r_max must be >= 0, got {r_max}")));
    }
    Ok(2.0 * r_max / (1.0 - gamma))
}

/// `delta_hat / (m * exp(tau * delta_hat))`.
pub fn gap_lower_bound(delta_hat: f64, m: usize, tau: f64) -> Result<f64> {
    if !(delta_hat > 0.0) {
        return Err(param(format!("lower bound requires delta_hat > 0, got {delta_hat}")));
    }
    check_m(m)?;
    check_tau(tau)?;
    Ok(delta_hat / (m as f64 * (tau * delta_hat).exp()))
}

/// `(m - 1) * max(1 / (tau + 2), 2 q_max / (1 + exp(tau)))`.
pub fn gap_upper_bound(m: usize, tau: f64, q_max: f64) -> Result<f64> {
    check_m(m)?;
    check_tau(tau)?;
    if !(q_max >= 0.0) {
        return Err(param(format!("q_max must be >= 0, got {q_max}")));
    }
    let harmonic = 1.0 / (tau + 2.0);
    let exponential = 2.0 * q_max / (1.0 + tau.exp());
    Ok((m - 1) as f64 * harmonic.max(exponential))
}

/// Limit lower bound on softmax Q-iteration for one `(s,a)`:
/// `q_star - gamma (m - 1) / (1 - gamma) * max(1/(tau+2), 2 q_max/(1+exp(tau)))`.
pub fn performance_lower_bound(q_star_value: f64, gamma: f64, m: usize, tau: f64, q_max: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let per_step = gap_upper_bound(m, tau, q_max)?;
    Ok(q_star_value - gamma / (1.0 - gamma) * per_step)
}

/// `sum_{j=1..k} gamma^j * zeta = zeta * gamma (1 - gamma^k) / (1 - gamma)`.
pub fn zeta_accumulation_bound(k: usize, gamma: f64, zeta: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !(zeta >= 0.0) {
        return Err(param(format!("zeta must be >= 0, got {zeta}")));
    }
    Ok(zeta * geometric_factor(k, gamma))
}

fn geometric_factor(k: usize, gamma: f64) -> f64 {
    let k = i32::try_from(k).unwrap_or(i32::MAX);
    gamma * (1.0 - gamma.powi(k)) / (1.0 - gamma)
}

/// `gamma (1 - gamma^k) / (1 - gamma) * exp(-tau * d_min) * sum(d)` over the
/// strictly positive per-action shortfalls `d` of one row, `d_min` being the
/// smallest of them. Zero when every shortfall is zero.
pub fn exponential_rate_bound(k: usize, gamma: f64, tau: f64, deltas: &[f64]) -> Result<f64> {
    check_gamma(gamma)?;
    check_tau(tau)?;
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0)) {
        return Err(param(format!("shortfalls must be >= 0, got {d}")));
    }
    let positive = deltas.iter().copied().filter(|&d| d > 0.0);
    let Some(d_min) = positive.clone().reduce(f64::min) else {
        return Ok(0.0);
    };
    let total: f64 = positive.sum();
    Ok(geometric_factor(k, gamma) * (-tau * d_min).exp() * total)
}

/// Per-action shortfalls `max(row) - row[i]`, sorted ascending.
pub fn sorted_shortfalls(row: &[f64]) -> Vec<f64> {
    let top = crate::ops::max_value(row);
    let mut d: Vec<f64> = row.iter().map(|x| top - x).collect();
    d.sort_by(f64::total_cmp);
    d
}
