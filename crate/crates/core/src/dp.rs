//! Q-iteration with trace recording, side-by-side max/softmax verification,
//! and an empirical expansion probe for soft backups.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::bounds::{
    exponential_rate_bound, pairwise_gap_bound, q_value_bounds, sorted_shortfalls, zeta_accumulation_bound, ValueBounds,
};
use crate::error::{dims, param, Error, Result};
use crate::mdp::{QTable, TabularMDP};
use crate::ops::{backup_unchecked, delta_hat, max_value, OperatorSpec};
use crate::seed;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

/// Iterations over which oscillation is measured when the cap is hit.
const OSCILLATION_WINDOW: usize = 100;

pub const TRACE_CSV_HEADER: &str = "k,step_sup,dist_qstar,max_gap,zeta_running,delta_hat_running,q_min,q_max";

/// One row of an [`IterationTrace`], describing the iterate `Q_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    /// `||Q_k - Q_{k-1}||_inf`; absent for `k = 0`.
    pub step_sup: Option<f64>,
    pub dist_qstar: Option<f64>,
    /// `max_s [max_a Q_k(s,a) - V_op(Q_k(s,.))]`.
    pub max_gap: f64,
    /// Running maximum of `max_gap` over `Q_0..=Q_k`.
    pub zeta_running: f64,
    /// Running maximum of the per-state action spread over `Q_0..=Q_k`.
    pub delta_hat_running: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Termination {
    Converged {
        iterations: usize,
    },
    /// The cap was reached. `oscillation_amplitude` is the largest per-entry
    /// range over the final iterations, i.e. bounded non-convergence.
    IterationCap {
        iterations: usize,
        last_step: f64,
        oscillation_amplitude: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

impl IterationTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace always holds Q_0")
    }

    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::Converged { .. })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e},{:e}",
                r.k,
                opt(r.step_sup),
                opt(r.dist_qstar),
                r.max_gap,
                r.zeta_running,
                r.delta_hat_running,
                r.q_min,
                r.q_max
            );
        }
        out
    }

    /// Counts records whose `[q_min, q_max]` leaves `bounds` (plus `slack`).
    pub fn envelope_violations(&self, bounds: &ValueBounds, slack: f64) -> usize {
        self.records
            .iter()
            .filter(|r| !bounds.contains(r.q_min, slack) || !bounds.contains(r.q_max, slack))
            .count()
    }
}

fn row_stats(q: &QTable, op: &OperatorSpec) -> (f64, f64) {
    let mut gap = 0.0f64;
    let mut spread = 0.0f64;
    for row in q.rows() {
        gap = gap.max(max_value(row) - op.value(row));
        spread = spread.max(delta_hat(row));
    }
    (gap, spread)
}

fn check_inputs(mdp: &TabularMDP, op: &OperatorSpec, q0: &QTable, tol: f64) -> Result<()> {
    op.validate()?;
    if q0.shape() != mdp.shape() {
        return Err(dims(mdp.shape(), q0.shape()));
    }
    if !(tol > 0.0) {
        return Err(param(format!("tol must be > 0, got {tol}")));
    }
    Ok(())
}

/// Applies `op`'s backup from `q0` until the sup-norm step falls below `tol`
/// or `max_iters` backups were made. Hitting the cap is reported in the
/// trace, not as an error.
pub fn q_iteration(
    mdp: &TabularMDP,
    op: OperatorSpec,
    q0: &QTable,
    tol: f64,
    max_iters: usize,
) -> Result<(QTable, IterationTrace)> {
    q_iteration_with_reference(mdp, op, q0, tol, max_iters, None)
}

/// [`q_iteration`] that also records the distance to a reference table (usually `Q*`).
pub fn q_iteration_with_reference(
    mdp: &TabularMDP,
    op: OperatorSpec,
    q0: &QTable,
    tol: f64,
    max_iters: usize,
    q_star: Option<&QTable>,
) -> Result<(QTable, IterationTrace)> {
    check_inputs(mdp, &op, q0, tol)?;
    if let Some(r) = q_star {
        if r.shape() != mdp.shape() {
            return Err(dims(mdp.shape(), r.shape()));
        }
    }
    let (gap0, spread0) = row_stats(q0, &op);
    let mut records = vec![TraceRecord {
        k: 0,
        step_sup: None,
        dist_qstar: q_star.map(|r| q0.sup_distance(r)),
        max_gap: gap0,
        zeta_running: gap0,
        delta_hat_running: spread0,
        q_min: q0.min(),
        q_max: q0.max(),
    }];

    let window_start = max_iters.saturating_sub(OSCILLATION_WINDOW) + 1;
    let mut lo = q0.clone();
    let mut hi = q0.clone();
    let mut q = q0.clone();
    let mut termination = None;
    for k in 1..=max_iters {
        let next = backup_unchecked(mdp, &op, &q);
        let step = next.sup_distance(&q);
        let (g, spread) = row_stats(&next, &op);
        let prev = records.last().unwrap();
        records.push(TraceRecord {
            k,
            step_sup: Some(step),
            dist_qstar: q_star.map(|r| next.sup_distance(r)),
            max_gap: g,
            zeta_running: prev.zeta_running.max(g),
            delta_hat_running: prev.delta_hat_running.max(spread),
            q_min: next.min(),
            q_max: next.max(),
        });
        q = next;
        if step < tol {
            termination = Some(Termination::Converged { iterations: k });
            break;
        }
        if k == window_start {
            lo = q.clone();
            hi = q.clone();
        } else if k > window_start {
            lo = QTable::from_fn(q.shape().0, q.shape().1, |s, a| lo.get(s, a).min(q.get(s, a)));
            hi = QTable::from_fn(q.shape().0, q.shape().1, |s, a| hi.get(s, a).max(q.get(s, a)));
        }
    }
    let termination = termination.unwrap_or_else(|| Termination::IterationCap {
        iterations: max_iters,
        last_step: records.last().and_then(|r| r.step_sup).unwrap_or(0.0),
        oscillation_amplitude: hi.sup_distance(&lo),
    });
    Ok((q, IterationTrace { records, termination }))
}

/// `Q*` by max-backup iteration from zero.
pub fn solve_optimal(mdp: &TabularMDP, tol: f64) -> Result<QTable> {
    let (ns, na) = mdp.shape();
    let (q, trace) = q_iteration(mdp, OperatorSpec::Max, &QTable::zeros(ns, na), tol, DEFAULT_MAX_ITERS)?;
    match trace.termination {
        Termination::Converged { .. } => Ok(q),
        Termination::IterationCap {
            iterations, last_step, ..
        } => Err(Error::NonConvergence {
            iterations,
            last_step,
            last: Box::new(q),
        }),
    }
}

/// Location of a failed check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Witness {
    pub s: usize,
    pub a: usize,
    pub j: usize,
    pub value: f64,
    pub bound: f64,
}

/// A named check: how many times it was evaluated, how many failed, and the first failure.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckTally {
    pub checked: usize,
    pub violations: usize,
    pub first: Option<Witness>,
}

impl CheckTally {
    fn record(&mut self, ok: bool, w: impl FnOnce() -> Witness) {
        self.checked += 1;
        if !ok {
            self.violations += 1;
            if self.first.is_none() {
                self.first = Some(w());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Outcome of [`verify_theorem1`].
#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub tau: f64,
    pub k: usize,
    /// `T^j Q0 >= T_soft^j Q0` entrywise.
    pub domination: CheckTally,
    /// `T^j Q0 - T_soft^j Q0 <= sum_{i<=j} gamma^i zeta_j` entrywise.
    pub zeta_bound: CheckTally,
    /// Whether the exponential-rate bound of the worst-gap state covers the
    /// realized sup difference. Recorded, not required.
    pub rate_bound: CheckTally,
    /// Every visited entry of both sequences inside `[R_min, R_max] / (1 - gamma)`.
    /// Only evaluated when `Q0` starts inside `[R_min, R_max]`.
    pub value_envelope: CheckTally,
    /// Every visited per-state spread within `2 R / (1 - gamma)`,
    /// `R = max(R_max, -R_min)`. Same precondition as `value_envelope`.
    pub spread_envelope: CheckTally,
    /// `||T^j Q0 - T_soft^j Q0||_inf` for `j = 1..=k`.
    pub sup_difference: Vec<f64>,
    /// Running zeta after the last step (a lower estimate of the true supremum).
    pub zeta: f64,
}

impl Theorem1Report {
    /// Domination, zeta bound and both envelopes all held.
    pub fn passed(&self) -> bool {
        self.domination.passed()
            && self.zeta_bound.passed()
            && self.value_envelope.passed()
            && self.spread_envelope.passed()
    }
}

/// Relative rounding slack for exact-in-theory inequalities.
const ROUNDING: f64 = 1e-12;
const ENVELOPE_SLACK: f64 = 1e-9;

/// Runs `T^j Q0` and `T_soft^j Q0` side by side for `j = 1..=k` and checks
/// the ordering, the zeta-accumulation bound and the value envelopes at
/// every step.
pub fn verify_theorem1(mdp: &TabularMDP, tau: f64, q0: &QTable, k: usize) -> Result<Theorem1Report> {
    let soft = OperatorSpec::Softmax { tau };
    check_inputs(mdp, &soft, q0, 1.0)?;
    if k == 0 {
        return Err(param("k must be >= 1"));
    }
    let gamma = mdp.discount();
    let (r_min, r_max) = (mdp.r_min(), mdp.r_max());
    let bounds = q_value_bounds(r_min, r_max, gamma)?;
    let spread_limit = pairwise_gap_bound(r_max.max(-r_min).max(0.0), gamma)?;
    let check_envelopes = q0.values().iter().all(|&x| x >= r_min && x <= r_max);

    let mut report = Theorem1Report {
        tau,
        k,
        domination: CheckTally::default(),
        zeta_bound: CheckTally::default(),
        rate_bound: CheckTally::default(),
        value_envelope: CheckTally::default(),
        spread_envelope: CheckTally::default(),
        sup_difference: Vec::with_capacity(k),
        zeta: 0.0,
    };
    let (ns, na) = mdp.shape();
    let mut hard = q0.clone();
    let mut softq = q0.clone();
    let mut zeta = 0.0f64;
    for j in 1..=k {
        // zeta over the softmax iterates Q_soft^0..=Q_soft^{j-1}
        let (mut worst_state, mut worst_gap) = (0, f64::NEG_INFINITY);
        for (s, row) in softq.rows().enumerate() {
            let g = max_value(row) - soft.value(row);
            if g > worst_gap {
                worst_gap = g;
                worst_state = s;
            }
        }
        zeta = zeta.max(worst_gap);
        let shortfalls = sorted_shortfalls(softq.row(worst_state));

        hard = backup_unchecked(mdp, &OperatorSpec::Max, &hard);
        softq = backup_unchecked(mdp, &soft, &softq);

        let zeta_bound = zeta_accumulation_bound(j, gamma, zeta)?;
        let scale = 1.0 + hard.max().abs().max(hard.min().abs());
        let mut sup = 0.0f64;
        for s in 0..ns {
            for a in 0..na {
                let diff = hard.get(s, a) - softq.get(s, a);
                sup = sup.max(diff.abs());
                report.domination.record(diff >= -ROUNDING * scale, || Witness {
                    s,
                    a,
                    j,
                    value: diff,
                    bound: 0.0,
                });
                report
                    .zeta_bound
                    .record(diff <= zeta_bound + ROUNDING * scale, || Witness {
                        s,
                        a,
                        j,
                        value: diff,
                        bound: zeta_bound,
                    });
            }
        }
        report.sup_difference.push(sup);
        let rate = exponential_rate_bound(j, gamma, tau, &shortfalls)?;
        report.rate_bound.record(sup <= rate + ROUNDING * scale, || Witness {
            s: worst_state,
            a: 0,
            j,
            value: sup,
            bound: rate,
        });

        if check_envelopes {
            for table in [&hard, &softq] {
                for s in 0..ns {
                    let row = table.row(s);
                    for (a, &x) in row.iter().enumerate() {
                        report
                            .value_envelope
                            .record(bounds.contains(x, ENVELOPE_SLACK), || Witness {
                                s,
                                a,
                                j,
                                value: x,
                                bound: if x > bounds.q_max { bounds.q_max } else { bounds.q_min },
                            });
                    }
                    let d = delta_hat(row);
                    report
                        .spread_envelope
                        .record(d <= spread_limit + ENVELOPE_SLACK, || Witness {
                            s,
                            a: 0,
                            j,
                            value: d,
                            bound: spread_limit,
                        });
                }
            }
        }
    }
    report.zeta = zeta;
    Ok(report)
}

/// Outcome of [`contraction_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub op: OperatorSpec,
    pub gamma: f64,
    pub n_trials: usize,
    pub max_ratio: f64,
    /// The pair `(Q1, Q2)` attaining `max_ratio`.
    pub witness: Option<(QTable, QTable)>,
    pub exceeding_gamma: usize,
    pub exceeding_one: usize,
}

/// Samples pairs `(Q1, Q2)` and measures `||T Q1 - T Q2|| / ||Q1 - Q2||` for
/// the softmax backup with inverse temperature `tau`.
pub fn contraction_probe(
    mdp: &TabularMDP,
    tau: f64,
    n_trials: usize,
    perturbation_scale: f64,
    seed: u64,
) -> Result<ProbeReport> {
    contraction_probe_with(mdp, OperatorSpec::Softmax { tau }, n_trials, perturbation_scale, seed)
}

/// [`contraction_probe`] for any operator. Each trial draws a base table
/// uniformly from the value envelope and perturbs it twice by independent
/// uniform noise of half-width `perturbation_scale`.
pub fn contraction_probe_with(
    mdp: &TabularMDP,
    op: OperatorSpec,
    n_trials: usize,
    perturbation_scale: f64,
    seed: u64,
) -> Result<ProbeReport> {
    op.validate()?;
    if n_trials == 0 {
        return Err(param("n_trials must be >= 1"));
    }
    if !(perturbation_scale > 0.0 && perturbation_scale.is_finite()) {
        return Err(param(format!(
            "perturbation scale must be > 0, got {perturbation_scale}"
        )));
    }
    let gamma = mdp.discount();
    let b = q_value_bounds(mdp.r_min(), mdp.r_max(), gamma)?;
    let (lo, hi) = if b.q_max > b.q_min {
        (b.q_min, b.q_max)
    } else {
        (b.q_min - 1.0, b.q_max + 1.0)
    };
    let (ns, na) = mdp.shape();
    let mut rng = seed::rng(seed);
    let mut report = ProbeReport {
        op,
        gamma,
        n_trials,
        max_ratio: 0.0,
        witness: None,
        exceeding_gamma: 0,
        exceeding_one: 0,
    };
    for _ in 0..n_trials {
        let base = QTable::from_fn(ns, na, |_, _| rng.random_range(lo..=hi));
        let q1 = base.map(|x| x + perturbation_scale * rng.random_range(-1.0..=1.0));
        let q2 = base.map(|x| x + perturbation_scale * rng.random_range(-1.0..=1.0));
        let dist = q1.sup_distance(&q2);
        if dist == 0.0 {
            continue;
        }
        let ratio = backup_unchecked(mdp, &op, &q1).sup_distance(&backup_unchecked(mdp, &op, &q2)) / dist;
        if ratio > gamma {
            report.exceeding_gamma += 1;
        }
        if ratio > 1.0 {
            report.exceeding_one += 1;
        }
        if ratio > report.max_ratio {
            report.max_ratio = ratio;
            report.witness = Some((q1, q2));
        }
    }
    Ok(report)
}

/// A two-state, two-action MDP in which every move returns to state 0 with
/// a discount close to one, so any expansion of the next-state aggregate at
/// state 0 shows up directly in the backup.
pub fn expansion_test_mdp() -> TabularMDP {
    TabularMDP::new(
        vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        ],
        vec![vec![0.0, 1.0], vec![0.5, 0.0]],
        0.99,
    )
    .expect("fixed MDP is valid")
}
