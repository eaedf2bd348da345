//! Monte-Carlo study of max-style estimators under additive zero-mean noise.
//!
//! Each trial holds one noisy action-value row `Q_t(a) = V* + eps_a` around a
//! common baseline `V*`. An estimator's error for the trial is its estimate
//! minus the baseline, so the single max estimator's error is `max_a eps_a`.

use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::bounds::{gap_lower_bound, gap_upper_bound};
use crate::error::{param, Result};
use crate::ops::{
    argmax, delta_hat, gap_unchecked, max_value, mellowmax_value_unchecked, softmax_value_unchecked,
    softmax_weights_unchecked,
};
use crate::seed;
use crate::stats::mean_sd;

pub const ESTIMATOR_CSV_HEADER: &str = "estimator,param,m,n_trials,mean_error,sd_error,violations";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDistribution {
    StandardNormal,
    /// Uniform on `[-half_width, half_width]`.
    Uniform {
        half_width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub distribution: NoiseDistribution,
    /// Number of actions.
    pub m: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// The common true value `V*` shared by all actions.
    #[serde(default)]
    pub baseline: f64,
}

impl NoiseSpec {
    pub fn standard_normal(m: usize, n_trials: usize, seed: u64) -> Self {
        NoiseSpec {
            distribution: NoiseDistribution::StandardNormal,
            m,
            n_trials,
            seed,
            baseline: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(param("need at least one action"));
        }
        if self.n_trials == 0 {
            return Err(param("n_trials must be >= 1"));
        }
        if !self.baseline.is_finite() {
            return Err(param("baseline must be finite"));
        }
        if let NoiseDistribution::Uniform { half_width } = self.distribution {
            if !(half_width > 0.0 && half_width.is_finite()) {
                return Err(param(format!("uniform half-width must be > 0, got {half_width}")));
            }
        }
        Ok(())
    }
}

/// `n_trials x m` noisy value rows around a common baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMatrix {
    n_trials: usize,
    m: usize,
    baseline: f64,
    values: Vec<f64>,
}

impl TrialMatrix {
    /// Builds a matrix from explicit value rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, baseline: f64) -> Result<Self> {
        let n_trials = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n_trials == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(param("trial rows must be nonempty and of equal length"));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(param("trial values must be finite"));
        }
        Ok(TrialMatrix {
            n_trials,
            m,
            baseline,
            values,
        })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        self.values.chunks(self.m)
    }

    /// The same noise around baseline `self.baseline + c`.
    pub fn shifted(&self, c: f64) -> TrialMatrix {
        TrialMatrix {
            baseline: self.baseline + c,
            values: self.values.iter().map(|v| v + c).collect(),
            ..*self
        }
    }

    /// The noise terms `Q_t(a) - V*` of one trial.
    pub fn noise(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|v| v - self.baseline).collect()
    }
}

/// Draws the noise matrix. Trial `i` uses its own generator stream, so the
/// result does not depend on evaluation order.
pub fn sample_errors(spec: &NoiseSpec) -> Result<TrialMatrix> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.n_trials * spec.m);
    let uniform = match spec.distribution {
        NoiseDistribution::Uniform { half_width } => {
            Some(Uniform::new_inclusive(-half_width, half_width).map_err(|e| param(e.to_string()))?)
        }
        NoiseDistribution::StandardNormal => None,
    };
    for i in 0..spec.n_trials {
        let mut rng = seed::stream_rng(spec.seed, i as u64);
        for _ in 0..spec.m {
            let eps: f64 = match &uniform {
                Some(u) => u.sample(&mut rng),
                None => StandardNormal.sample(&mut rng),
            };
            values.push(spec.baseline + eps);
        }
    }
    Ok(TrialMatrix {
        n_trials: spec.n_trials,
        m: spec.m,
        baseline: spec.baseline,
        values,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(param(format!("inverse temperature must be >= 0, got {tau}")));
    }
    Ok(())
}

fn check_paired(a: &TrialMatrix, b: &TrialMatrix) -> Result<()> {
    if (a.n_trials, a.m) != (b.n_trials, b.m) {
        return Err(param(format!(
            "paired samples differ in shape: {}x{} vs {}x{}",
            a.n_trials, a.m, b.n_trials, b.m
        )));
    }
    Ok(())
}

/// Per-trial `max_a Q_t(a) - V*`.
pub fn overestimation_max(trials: &TrialMatrix) -> Vec<f64> {
    trials.rows().map(|r| max_value(r) - trials.baseline).collect()
}

/// Per-trial softmax-weighted value minus `V*`.
pub fn overestimation_softmax(trials: &TrialMatrix, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(trials
        .rows()
        .map(|r| softmax_value_unchecked(r, tau) - trials.baseline)
        .collect())
}

/// Per-trial mellowmax value minus `V*`.
pub fn overestimation_mellowmax(trials: &TrialMatrix, omega: f64) -> Result<Vec<f64>> {
    if omega.is_nan() || omega <= 0.0 {
        return Err(param(format!("mellowmax omega must be > 0, got {omega}")));
    }
    Ok(trials
        .rows()
        .map(|r| mellowmax_value_unchecked(r, omega) - trials.baseline)
        .collect())
}

/// Double estimator: select with `a`, evaluate with `b`.
pub fn overestimation_double_max(a: &TrialMatrix, b: &TrialMatrix) -> Result<Vec<f64>> {
    check_paired(a, b)?;
    Ok(a.rows()
        .zip(b.rows())
        .map(|(ra, rb)| rb[argmax(ra)] - b.baseline)
        .collect())
}

/// Softmax weights computed on `a`, applied to the values of `b`.
pub fn overestimation_double_softmax(a: &TrialMatrix, b: &TrialMatrix, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    check_paired(a, b)?;
    Ok(a.rows()
        .zip(b.rows())
        .map(|(ra, rb)| {
            let w = softmax_weights_unchecked(ra, tau);
            w.iter().zip(rb).map(|(w, v)| w * (v - b.baseline)).sum()
        })
        .collect())
}

/// How the bounded value range in the reduction upper bound is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QRange {
    /// Largest `|eps_a|` of each trial (for unbounded noise).
    PerTrialMaxAbs,
    /// A fixed bound, e.g. the half-width of uniform noise.
    Fixed(f64),
}

/// Per-trial reduction `max error - softmax error` checked against the gap
/// sandwich, plus the pointwise ordering of the two errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OverestimationReport {
    pub tau: f64,
    pub m: usize,
    pub max_errors: Vec<f64>,
    pub softmax_errors: Vec<f64>,
    pub reductions: Vec<f64>,
    /// `(lower, upper)` per trial; `None` where the row has zero spread.
    pub reduction_bounds: Vec<Option<(f64, f64)>>,
    /// Trials where the softmax error exceeded the max error.
    pub ordering_violations: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    /// Zero-spread trials, excluded from the sandwich and required to have
    /// zero reduction (counted in `lower_violations` otherwise).
    pub degenerate_trials: usize,
    pub first_violation: Option<usize>,
}

impl OverestimationReport {
    pub fn violations(&self) -> usize {
        self.ordering_violations + self.lower_violations + self.upper_violations
    }

    pub fn max_summary(&self) -> (f64, f64) {
        mean_sd(&self.max_errors)
    }

    pub fn softmax_summary(&self) -> (f64, f64) {
        mean_sd(&self.softmax_errors)
    }
}

const BOUND_SLACK: f64 = 1e-12;

pub fn reduction_bounds_check(trials: &TrialMatrix, tau: f64, q_range: QRange) -> Result<OverestimationReport> {
    check_tau(tau)?;
    if let QRange::Fixed(q) = q_range {
        if !(q >= 0.0) {
            return Err(param(format!("q range must be >= 0, got {q}")));
        }
    }
    let max_errors = overestimation_max(trials);
    let softmax_errors = overestimation_softmax(trials, tau)?;
    let m = trials.m();
    let mut report = OverestimationReport {
        tau,
        m,
        reductions: Vec::with_capacity(trials.n_trials()),
        reduction_bounds: Vec::with_capacity(trials.n_trials()),
        max_errors,
        softmax_errors,
        ordering_violations: 0,
        lower_violations: 0,
        upper_violations: 0,
        degenerate_trials: 0,
        first_violation: None,
    };
    for (i, row) in trials.rows().enumerate() {
        let reduction = gap_unchecked(row, tau);
        let mut bad = report.softmax_errors[i] > report.max_errors[i];
        if bad {
            report.ordering_violations += 1;
        }
        let spread = delta_hat(row);
        if spread > 0.0 && m >= 2 {
            let q_max = match q_range {
                QRange::Fixed(q) => q,
                QRange::PerTrialMaxAbs => row.iter().map(|v| (v - trials.baseline()).abs()).fold(0.0, f64::max),
            };
            let lower = gap_lower_bound(spread, m, tau)?;
            let upper = gap_upper_bound(m, tau, q_max)?;
            if reduction < lower - BOUND_SLACK {
                report.lower_violations += 1;
                bad = true;
            }
            if reduction > upper + BOUND_SLACK {
                report.upper_violations += 1;
                bad = true;
            }
            report.reduction_bounds.push(Some((lower, upper)));
        } else {
            report.degenerate_trials += 1;
            if reduction != 0.0 {
                report.lower_violations += 1;
                bad = true;
            }
            report.reduction_bounds.push(None);
        }
        if bad && report.first_violation.is_none() {
            report.first_violation = Some(i);
        }
        report.reductions.push(reduction);
    }
    Ok(report)
}

/// Softmax error as a function of `tau` across a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub tau_grid: Vec<f64>,
    pub mean_curve: Vec<f64>,
    pub sd_curve: Vec<f64>,
    pub violations: usize,
    /// `(trial, grid index)` of the first decrease.
    pub first_witness: Option<(usize, usize)>,
}

const MONOTONE_SLACK: f64 = 1e-12;

/// Checks per trial that the softmax error never decreases along `tau_grid`.
pub fn monotonicity_sweep(trials: &TrialMatrix, tau_grid: &[f64]) -> Result<MonotonicityReport> {
    if tau_grid.is_empty() {
        return Err(param("tau grid is empty"));
    }
    for t in tau_grid {
        check_tau(*t)?;
    }
    if tau_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(param("tau grid must be ascending"));
    }
    let curves: Vec<Vec<f64>> = tau_grid
        .iter()
        .map(|&t| overestimation_softmax(trials, t))
        .collect::<Result<_>>()?;
    let mut violations = 0;
    let mut first_witness = None;
    for (g, pair) in curves.windows(2).enumerate() {
        for (i, (prev, next)) in pair[0].iter().zip(&pair[1]).enumerate() {
            if *next < prev - MONOTONE_SLACK {
                violations += 1;
                let w = (i, g + 1);
                first_witness = Some(first_witness.map_or(w, |f: (usize, usize)| f.min(w)));
            }
        }
    }
    let (mean_curve, sd_curve) = curves.iter().map(|c| mean_sd(c)).unzip();
    Ok(MonotonicityReport {
        tau_grid: tau_grid.to_vec(),
        mean_curve,
        sd_curve,
        violations,
        first_witness,
    })
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Default parameter grid shared by softmax and mellowmax: 100 points on `[0.01, 100]`.
pub fn default_param_grid() -> Vec<f64> {
    linear_grid(0.01, 100.0, 100)
}

/// One grid point of the softmax-versus-mellowmax comparison; each field is
/// `(mean, sd)` over trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Figure7Point {
    pub m: usize,
    pub param: f64,
    /// `max - softmax value`.
    pub approx_softmax: (f64, f64),
    /// `max - mellowmax value`.
    pub approx_mellowmax: (f64, f64),
    pub over_softmax: (f64, f64),
    pub over_mellowmax: (f64, f64),
}

pub const FIGURE7_CSV_HEADER: &str = "m,param,approx_softmax_mean,approx_softmax_sd,approx_mellowmax_mean,\
approx_mellowmax_sd,over_softmax_mean,over_softmax_sd,over_mellowmax_mean,over_mellowmax_sd";

impl Figure7Point {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.m,
            self.param,
            self.approx_softmax.0,
            self.approx_softmax.1,
            self.approx_mellowmax.0,
            self.approx_mellowmax.1,
            self.over_softmax.0,
            self.over_softmax.1,
            self.over_mellowmax.0,
            self.over_mellowmax.1
        )
    }
}

/// Trials for one action count of the sweep; the seed is derived from the
/// base spec's seed and `m`, so every parameter value sees the same noise.
pub fn figure7_trials(spec: &NoiseSpec, m: usize) -> Result<TrialMatrix> {
    let spec = NoiseSpec {
        m,
        seed: seed::derive_seed(spec.seed, &format!("figure7/m={m}")),
        ..*spec
    };
    sample_errors(&spec)
}

/// Evaluates one `(m, param)` cell on pre-drawn trials.
pub fn figure7_point(trials: &TrialMatrix, param_value: f64) -> Result<Figure7Point> {
    check_tau(param_value)?;
    let maxes = overestimation_max(trials);
    let soft = overestimation_softmax(trials, param_value)?;
    let mellow = overestimation_mellowmax(trials, param_value)?;
    let approx = |v: &[f64]| -> Vec<f64> { maxes.iter().zip(v).map(|(mx, x)| mx - x).collect() };
    Ok(Figure7Point {
        m: trials.m(),
        param: param_value,
        approx_softmax: mean_sd(&approx(&soft)),
        approx_mellowmax: mean_sd(&approx(&mellow)),
        over_softmax: mean_sd(&soft),
        over_mellowmax: mean_sd(&mellow),
    })
}

/// Approximation and overestimation error of softmax and mellowmax for each
/// action count and each parameter value (used as both `tau` and `omega`).
pub fn figure7_sweep(m_values: &[usize], param_grid: &[f64], spec: &NoiseSpec) -> Result<Vec<Figure7Point>> {
    if param_grid.iter().any(|&p| !(p > 0.0)) {
        return Err(param("parameter grid must be strictly positive"));
    }
    let mut out = Vec::with_capacity(m_values.len() * param_grid.len());
    for &m in m_values {
        let trials = figure7_trials(spec, m)?;
        for &p in param_grid {
            out.push(figure7_point(&trials, p)?);
        }
    }
    Ok(out)
}

/// One output row of the estimator comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub param: Option<f64>,
    pub m: usize,
    pub n_trials: usize,
    pub mean_error: f64,
    pub sd_error: f64,
    pub violations: usize,
}

impl EstimatorSummary {
    pub fn new(estimator: &str, param: Option<f64>, errors: &[f64], m: usize, violations: usize) -> Self {
        let (mean_error, sd_error) = mean_sd(errors);
        EstimatorSummary {
            estimator: estimator.to_string(),
            param,
            m,
            n_trials: errors.len(),
            mean_error,
            sd_error,
            violations,
        }
    }

    pub fn csv_row(&self) -> String {
        let p = self.param.map(|p| p.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.estimator, p, self.m, self.n_trials, self.mean_error, self.sd_error, self.violations
        )
    }
}

pub fn estimator_csv(rows: &[EstimatorSummary]) -> String {
    let mut out = String::from(ESTIMATOR_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// The single/double, max/softmax estimator comparison at one `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorComparison {
    pub tau: f64,
    pub softmax: EstimatorSummary,
    pub double_softmax: EstimatorSummary,
    pub report: OverestimationReport,
}

/// Runs the softmax and double-softmax estimators at `tau` on a shared
/// sample pair. The softmax row's `violations` counts ordering and
/// sandwich failures.
pub fn compare_at(a: &TrialMatrix, b: &TrialMatrix, tau: f64, q_range: QRange) -> Result<EstimatorComparison> {
    let report = reduction_bounds_check(a, tau, q_range)?;
    let double = overestimation_double_softmax(a, b, tau)?;
    Ok(EstimatorComparison {
        tau,
        softmax: EstimatorSummary::new("softmax", Some(tau), &report.softmax_errors, a.m(), report.violations()),
        double_softmax: EstimatorSummary::new("double_softmax", Some(tau), &double, a.m(), 0),
        report,
    })
}

/// The two sample matrices of the estimator comparison: `a` drives
/// selection (and all single estimators), `b` is the independent
/// evaluation sample of the double estimators.
pub fn paired_samples(spec: &NoiseSpec) -> Result<(TrialMatrix, TrialMatrix)> {
    let a = sample_errors(&NoiseSpec {
        seed: seed::derive_seed(spec.seed, "estimators/a"),
        ..*spec
    })?;
    let b = sample_errors(&NoiseSpec {
        seed: seed::derive_seed(spec.seed, "estimators/b"),
        ..*spec
    })?;
    Ok((a, b))
}
