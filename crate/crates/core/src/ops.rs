//! Soft-maximum row kernels and the Bellman backups built on them.
//!
//! Every kernel shifts by the row maximum before exponentiating, so inverse
//! temperatures up to ~1e6 can stand in for "infinity" without overflow.

use serde::{Deserialize, Serialize};

use crate::error::{dims, param, Result};
use crate::mdp::{QTable, TabularMDP};

/// Which aggregate of the next-state action values a backup uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OperatorSpec {
    Max,
    Mean,
    /// Softmax-weighted average with inverse temperature `tau >= 0`.
    Softmax {
        tau: f64,
    },
    /// Mellowmax with `omega > 0`.
    Mellowmax {
        omega: f64,
    },
}

impl OperatorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            OperatorSpec::Softmax { tau } => check_tau(tau),
            OperatorSpec::Mellowmax { omega } => check_omega(omega),
            _ => Ok(()),
        }
    }

    /// Short name used in CSV output (`max`, `mean`, `softmax`, `mellowmax`).
    pub fn name(&self) -> &'static str {
        match self {
            OperatorSpec::Max => "max",
            OperatorSpec::Mean => "mean",
            OperatorSpec::Softmax { .. } => "softmax",
            OperatorSpec::Mellowmax { .. } => "mellowmax",
        }
    }

    pub fn parameter(&self) -> Option<f64> {
        match *self {
            OperatorSpec::Softmax { tau } => Some(tau),
            OperatorSpec::Mellowmax { omega } => Some(omega),
            _ => None,
        }
    }

    /// Aggregate one row. Parameters are assumed validated.
    pub fn value(&self, row: &[f64]) -> f64 {
        match *self {
            OperatorSpec::Max => max_value(row),
            OperatorSpec::Mean => mean_value(row),
            OperatorSpec::Softmax { tau } => softmax_value_unchecked(row, tau),
            OperatorSpec::Mellowmax { omega } => mellowmax_value_unchecked(row, omega),
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(param(format!("inverse temperature must be >= 0, got {tau}")));
    }
    Ok(())
}

fn check_omega(omega: f64) -> Result<()> {
    if omega.is_nan() || omega <= 0.0 {
        return Err(param(format!("mellowmax omega must be > 0, got {omega}")));
    }
    Ok(())
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.is_empty() {
        return Err(param("empty action-value row"));
    }
    if let Some(x) = row.iter().find(|x| !x.is_finite()) {
        return Err(param(format!("non-finite action value {x}")));
    }
    Ok(())
}

pub fn max_value(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn min_value(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn mean_value(row: &[f64]) -> f64 {
    crate::stats::mean(row)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Largest pairwise spread within a row, `max - min`.
pub fn delta_hat(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    max_value(row) - min_value(row)
}

/// Softmax probabilities `exp(tau*x_i) / sum_j exp(tau*x_j)`.
///
/// `tau == 0` yields exactly uniform weights.
pub fn softmax_weights(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    check_row(row)?;
    Ok(softmax_weights_unchecked(row, tau))
}

pub(crate) fn softmax_weights_unchecked(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.len();
    if tau == 0.0 {
        return vec![1.0 / m as f64; m];
    }
    let top = max_value(row);
    let mut w: Vec<f64> = row.iter().map(|&x| (tau * (x - top)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

/// The softmax-weighted value `f_tau(x)^T x`.
pub fn softmax_value(row: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_row(row)?;
    Ok(softmax_value_unchecked(row, tau))
}

// Evaluated as `max - gap` so the result never exceeds the row maximum.
pub(crate) fn softmax_value_unchecked(row: &[f64], tau: f64) -> f64 {
    max_value(row) - gap_unchecked(row, tau)
}

/// `max(row) - softmax_value(row, tau)`, always `>= 0`.
///
/// Computed as the weighted sum of shortfalls `sum_i w_i (max - x_i)`, which
/// is the same quantity without the cancellation of a direct subtraction.
pub fn gap(row: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_row(row)?;
    Ok(gap_unchecked(row, tau))
}

pub(crate) fn gap_unchecked(row: &[f64], tau: f64) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let top = max_value(row);
    let (mut num, mut den) = (0.0, 0.0);
    for &x in row {
        let short = top - x;
        let w = if tau == 0.0 { 1.0 } else { (-tau * short).exp() };
        num += w * short;
        den += w;
    }
    num / den
}

/// Mellowmax `log((1/m) sum_i exp(omega x_i)) / omega`.
pub fn mellowmax_value(row: &[f64], omega: f64) -> Result<f64> {
    check_omega(omega)?;
    check_row(row)?;
    Ok(mellowmax_value_unchecked(row, omega))
}

pub(crate) fn mellowmax_value_unchecked(row: &[f64], omega: f64) -> f64 {
    let m = row.len() as f64;
    let top = max_value(row);
    // every expm1 term is in (-1, 0], so the log argument stays in (0, 1]
    let s: f64 = row.iter().map(|&x| (omega * (x - top)).exp_m1()).sum::<f64>() / m;
    top + s.ln_1p() / omega
}

/// One Bellman backup:
/// `Q'(s,a) = R(s,a) + gamma * sum_s' P(s'|s,a) * V(Q(s',.))`.
pub fn backup(mdp: &TabularMDP, op: &OperatorSpec, q: &QTable) -> Result<QTable> {
    op.validate()?;
    if q.shape() != mdp.shape() {
        return Err(dims(mdp.shape(), q.shape()));
    }
    Ok(backup_unchecked(mdp, op, q))
}

pub(crate) fn backup_unchecked(mdp: &TabularMDP, op: &OperatorSpec, q: &QTable) -> QTable {
    let v: Vec<f64> = q.rows().map(|row| op.value(row)).collect();
    backup_with_values(mdp, &v)
}

/// Backup with a precomputed next-state value vector.
pub(crate) fn backup_with_values(mdp: &TabularMDP, v: &[f64]) -> QTable {
    let (ns, na) = mdp.shape();
    let gamma = mdp.discount();
    let mut out = QTable::zeros(ns, na);
    for s in 0..ns {
        for a in 0..na {
            let expect: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, vn)| p * vn).sum();
            out.set(s, a, mdp.reward(s, a) + gamma * expect);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // exp(1) / (exp(1) + 1), evaluated independently as 1 / (1 + exp(-1))
    const SIG1: f64 = 0.731_058_578_630_004_9;

    #[test]
    fn weights_examples() {
        assert_eq!(softmax_weights(&[1.0, 0.0], 0.0).unwrap(), vec![0.5, 0.5]);
        let w = softmax_weights(&[1.0, 0.0], 1.0).unwrap();
        assert!((w[0] - 0.73106).abs() < 1e-5);
        assert!((w[1] - 0.26894).abs() < 1e-5);
        let w = softmax_weights(&[1000.0, 0.0], 10.0).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[1] >= 0.0 && w[1] < 1e-300);
        assert!(softmax_weights(&[1.0], -0.1).is_err());
    }

    #[test]
    fn value_examples() {
        assert_eq!(softmax_value(&[1.0, 0.0], 0.0).unwrap(), 0.5);
        assert!((softmax_value(&[1.0, 0.0], 1.0).unwrap() - SIG1).abs() < 1e-12);
        assert_eq!(softmax_value(&[3.5; 4], 7.0).unwrap(), 3.5);
    }

    #[test]
    fn mellowmax_examples() {
        let expected = ((1f64.exp() + 1.0) / 2.0).ln();
        assert!((mellowmax_value(&[1.0, 0.0], 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.62011).abs() < 1e-5);
        assert_eq!(mellowmax_value(&[-2.0; 3], 4.0).unwrap(), -2.0);
        let v = mellowmax_value(&[1.0, 0.0], 100.0).unwrap();
        assert!(1.0 - v <= 2f64.ln() / 100.0 + 1e-15);
        assert!((1.0 - v) < 1e-2);
        assert!(mellowmax_value(&[1.0], 0.0).is_err());
    }

    #[test]
    fn max_and_spread_examples() {
        assert_eq!(max_value(&[1.0, 0.0]), 1.0);
        assert_eq!(max_value(&[-3.0]), -3.0);
        assert_eq!(max_value(&[2.0, 2.0, 1.0]), 2.0);
        assert_eq!(delta_hat(&[1.0, 0.0]), 1.0);
        assert_eq!(delta_hat(&[0.3; 5]), 0.0);
        assert_eq!(delta_hat(&[3.0, -2.0, 1.0]), 5.0);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[0.0, 5.0, 3.0]), 1);
    }

    #[test]
    fn gap_examples() {
        assert!((gap(&[1.0, 0.0], 1.0).unwrap() - (1.0 - SIG1)).abs() < 1e-12);
        assert_eq!(gap(&[2.0, 2.0, 2.0], 3.0).unwrap(), 0.0);
        let row = [0.4, -1.3, 2.2, 0.9];
        let g = gap(&row, 1e6).unwrap();
        assert!(g <= 1e-6 * delta_hat(&row));
    }

    #[test]
    fn single_action_rows() {
        for op in [
            OperatorSpec::Max,
            OperatorSpec::Mean,
            OperatorSpec::Softmax { tau: 3.0 },
            OperatorSpec::Mellowmax { omega: 3.0 },
        ] {
            assert_eq!(op.value(&[-4.25]), -4.25);
        }
        assert_eq!(gap(&[7.0], 2.0).unwrap(), 0.0);
        assert_eq!(delta_hat(&[7.0]), 0.0);
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0..50.0f64, 1..12)
    }

    proptest! {
        #[test]
        fn softmax_between_mean_and_max(row in row_strategy(), tau in 0.0..1e3f64) {
            let v = softmax_value(&row, tau).unwrap();
            let scale = 1.0 + max_value(&row).abs();
            prop_assert!(v <= max_value(&row));
            prop_assert!(v >= mean_value(&row) - 1e-12 * scale);
        }

        #[test]
        fn softmax_monotone_in_tau(row in row_strategy(), a in 0.0..50.0f64, b in 0.0..50.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let scale = 1.0 + max_value(&row).abs();
            prop_assert!(softmax_value(&row, lo).unwrap() <= softmax_value(&row, hi).unwrap() + 1e-12 * scale);
        }

        #[test]
        fn mellowmax_sandwich(row in row_strategy(), omega in 1e-3..1e3f64) {
            let v = mellowmax_value(&row, omega).unwrap();
            let top = max_value(&row);
            let scale = 1.0 + top.abs();
            prop_assert!(v <= top);
            prop_assert!(v >= mean_value(&row) - 1e-9 * scale);
            prop_assert!(top - v <= (row.len() as f64).ln() / omega + 1e-12 * scale);
        }

        #[test]
        fn softmax_shift_invariant(row in row_strategy(), tau in 0.0..20.0f64, c in -100.0..100.0f64) {
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            let w1 = softmax_weights(&row, tau).unwrap();
            let w2 = softmax_weights(&shifted, tau).unwrap();
            for (x, y) in w1.iter().zip(&w2) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let v1 = softmax_value(&row, tau).unwrap();
            let v2 = softmax_value(&shifted, tau).unwrap();
            prop_assert!((v1 + c - v2).abs() < 1e-9);
        }

        #[test]
        fn weights_sum_to_one(row in row_strategy(), tau in 0.0..1e6f64) {
            let w = softmax_weights(&row, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
