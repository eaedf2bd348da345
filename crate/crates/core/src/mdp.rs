//! Finite MDPs, action-value tables, policies and exact policy evaluation.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{dims, param, Error, Result};
use crate::ops::{argmax, softmax_weights_unchecked};
use crate::seed;

const ROW_SUM_TOL: f64 = 1e-12;

/// A state-action value table `Q[s][a]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::constant(n_states, n_actions, 0.0)
    }

    pub fn constant(n_states: usize, n_actions: usize, c: f64) -> Self {
        QTable {
            n_states,
            n_actions,
            values: vec![c; n_states * n_actions],
        }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        QTable {
            n_states,
            n_actions,
            values,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(param("Q table needs at least one state and one action"));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n_actions) {
            return Err(dims((n_states, n_actions), (n_states, bad.len())));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(param("Q table entries must be finite"));
        }
        Ok(QTable {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn rows(&self) -> std::slice::Chunks<'_, f64> {
        self.values.chunks(self.n_actions)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `||self - other||_inf`. Shapes must match.
    pub fn sup_distance(&self, other: &QTable) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> QTable {
        QTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Entrywise `self - other`.
    pub fn sub(&self, other: &QTable) -> QTable {
        debug_assert_eq!(self.shape(), other.shape());
        QTable {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }
}

/// A stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(param("policy needs at least one state and one action"));
        }
        for (s, r) in rows.iter().enumerate() {
            if r.len() != n_actions {
                return Err(dims((n_states, n_actions), (n_states, r.len())));
            }
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(param(format!("policy row {s} has an entry outside [0,1]")));
            }
            let total: f64 = r.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(param(format!("policy row {s} sums to {total}")));
            }
        }
        Ok(Policy {
            n_states,
            n_actions,
            probs: rows.into_iter().flatten().collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

/// Point mass on the argmax of each row (lowest index wins ties).
pub fn greedy_policy(q: &QTable) -> Policy {
    let (ns, na) = q.shape();
    let mut probs = vec![0.0; ns * na];
    for (s, row) in q.rows().enumerate() {
        probs[s * na + argmax(row)] = 1.0;
    }
    Policy {
        n_states: ns,
        n_actions: na,
        probs,
    }
}

pub fn softmax_policy(q: &QTable, tau: f64) -> Result<Policy> {
    if tau.is_nan() || tau < 0.0 {
        return Err(param(format!("inverse temperature must be >= 0, got {tau}")));
    }
    let (ns, na) = q.shape();
    let probs = q.rows().flat_map(|row| softmax_weights_unchecked(row, tau)).collect();
    Ok(Policy {
        n_states: ns,
        n_actions: na,
        probs,
    })
}

/// A finite MDP with expected rewards.
///
/// Besides `(S, A, P, R, gamma)` it carries the environment metadata used by
/// the sampling layer: reward noise, start state and terminal states.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// `P[s][a][s']` at `(s * n_actions + a) * n_states + s'`.
    transition: Vec<f64>,
    /// `R[s][a]` at `s * n_actions + a`.
    reward: Vec<f64>,
    discount: f64,
    reward_noise_sd: f64,
    start_state: usize,
    terminal: Vec<bool>,
}

impl TabularMDP {
    /// Builds and validates an MDP from nested tables.
    pub fn new(transition: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        let mdp = Self::new_unchecked(transition, reward, discount)?;
        let report = validate_mdp(&mdp);
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(report))
        }
    }

    /// Checks only that the tables are rectangular; probabilities and the
    /// discount are left for [`validate_mdp`].
    pub fn new_unchecked(transition: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, discount: f64) -> Result<Self> {
        let n_states = transition.len();
        let n_actions = transition.first().map_or(0, Vec::len);
        if n_states == 0 || n_actions == 0 {
            return Err(param("MDP needs at least one state and one action"));
        }
        if reward.len() != n_states || reward.iter().any(|r| r.len() != n_actions) {
            return Err(param("reward table shape does not match transitions"));
        }
        let mut flat = Vec::with_capacity(n_states * n_actions * n_states);
        for per_state in &transition {
            if per_state.len() != n_actions {
                return Err(param("ragged transition table"));
            }
            for row in per_state {
                if row.len() != n_states {
                    return Err(param("transition row length must equal n_states"));
                }
                flat.extend_from_slice(row);
            }
        }
        Ok(Self::from_flat(
            n_states,
            n_actions,
            flat,
            reward.into_iter().flatten().collect(),
            discount,
        ))
    }

    fn from_flat(n_states: usize, n_actions: usize, transition: Vec<f64>, reward: Vec<f64>, discount: f64) -> Self {
        TabularMDP {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            reward_noise_sd: 0.0,
            start_state: 0,
            terminal: vec![false; n_states],
        }
    }

    pub fn with_reward_noise(mut self, sd: f64) -> Result<Self> {
        if !(sd.is_finite() && sd >= 0.0) {
            return Err(param(format!("reward noise sd must be finite and >= 0, got {sd}")));
        }
        self.reward_noise_sd = sd;
        Ok(self)
    }

    pub fn with_start_state(mut self, s: usize) -> Result<Self> {
        if s >= self.n_states {
            return Err(param(format!("start state {s} out of range")));
        }
        self.start_state = s;
        Ok(self)
    }

    pub fn with_terminal(mut self, terminal: Vec<bool>) -> Result<Self> {
        if terminal.len() != self.n_states {
            return Err(param("terminal mask length must equal n_states"));
        }
        self.terminal = terminal;
        Ok(self)
    }

    /// Same MDP with every reward multiplied by `c`.
    pub fn scale_rewards(&self, c: f64) -> TabularMDP {
        let mut out = self.clone();
        out.reward.iter_mut().for_each(|r| *r *= c);
        out
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_states, self.n_actions)
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn reward_noise_sd(&self) -> f64 {
        self.reward_noise_sd
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn r_min(&self) -> f64 {
        self.reward.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn r_max(&self) -> f64 {
        self.reward.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Serializes to the JSON MDP document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MdpDocument::from(self)).expect("MDP document serializes")
    }

    /// Parses and validates a JSON MDP document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.into_mdp()
    }
}

/// On-disk MDP layout. Rewards are row-major `R[s][a]`; transitions list the
/// nonzero `(s, a, s', p)` entries and everything omitted is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rewards: Vec<f64>,
    pub transitions: Vec<(usize, usize, usize, f64)>,
}

impl From<&TabularMDP> for MdpDocument {
    fn from(m: &TabularMDP) -> Self {
        let mut transitions = Vec::new();
        for s in 0..m.n_states {
            for a in 0..m.n_actions {
                for (next, &p) in m.transition_row(s, a).iter().enumerate() {
                    if p != 0.0 {
                        transitions.push((s, a, next, p));
                    }
                }
            }
        }
        MdpDocument {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.discount,
            rewards: m.reward.clone(),
            transitions,
        }
    }
}

impl MdpDocument {
    pub fn into_mdp(self) -> Result<TabularMDP> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(param("n_states and n_actions must be positive"));
        }
        if self.rewards.len() != ns * na {
            return Err(param(format!(
                "rewards has {} entries, expected n_states*n_actions = {}",
                self.rewards.len(),
                ns * na
            )));
        }
        let mut transition = vec![0.0; ns * na * ns];
        for &(s, a, next, p) in &self.transitions {
            if s >= ns || a >= na || next >= ns {
                return Err(param(format!("transition entry ({s},{a},{next}) out of range")));
            }
            transition[(s * na + a) * ns + next] += p;
        }
        let mdp = TabularMDP::from_flat(ns, na, transition, self.rewards, self.gamma);
        let report = validate_mdp(&mdp);
        if report.is_valid() {
            Ok(mdp)
        } else {
            Err(Error::InvalidMdp(report))
        }
    }
}

/// Outcome of [`validate_mdp`]: empty when the MDP is well formed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "valid");
        }
        write!(f, "{}", self.issues.join("; "))
    }
}

/// Lists every violated invariant instead of stopping at the first.
pub fn validate_mdp(mdp: &TabularMDP) -> ValidationReport {
    let mut issues = Vec::new();
    if !(mdp.discount > 0.0 && mdp.discount < 1.0) {
        issues.push(format!("discount not in (0,1): {}", mdp.discount));
    }
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = mdp.transition_row(s, a);
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                issues.push(format!("row ({s},{a}) has entry {p} outside [0,1]"));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL || total.is_nan() {
                issues.push(format!("row ({s},{a}) sums to {total}"));
            }
            let r = mdp.reward(s, a);
            if !r.is_finite() {
                issues.push(format!("reward ({s},{a}) is not finite: {r}"));
            }
        }
    }
    ValidationReport { issues }
}

/// Garnet-style random MDP: each `(s,a)` reaches `branching` distinct
/// successors with Dirichlet(1,...,1) probabilities; rewards are uniform on
/// `[lo, hi]`.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    branching: usize,
    reward_range: (f64, f64),
    discount: f64,
    seed: u64,
) -> Result<TabularMDP> {
    let (lo, hi) = reward_range;
    if n_states == 0 || n_actions == 0 {
        return Err(param("n_states and n_actions must be positive"));
    }
    if branching == 0 || branching > n_states {
        return Err(param(format!("branching must be in 1..={n_states}, got {branching}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(param(format!("invalid reward range ({lo}, {hi})")));
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(param(format!("discount not in (0,1): {discount}")));
    }
    let mut rng = seed::rng(seed);
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for sa in 0..n_states * n_actions {
        let succ = sample(&mut rng, n_states, branching);
        let weights: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        for (next, w) in succ.iter().zip(&weights) {
            transition[sa * n_states + next] = w / total;
        }
    }
    let reward = (0..n_states * n_actions)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
        .collect();
    Ok(TabularMDP::from_flat(n_states, n_actions, transition, reward, discount))
}

/// Parameters for [`gridworld`]. Cells are indexed `y * width + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    /// Probability of slipping to one of the two perpendicular moves.
    pub noise: f64,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub goal_cells: Vec<usize>,
    pub reward_noise_sd: f64,
    pub discount: f64,
    #[serde(default)]
    pub start: usize,
}

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

/// Four-action grid (up, right, down, left). The intended move happens with
/// probability `1 - noise`, otherwise one of the two perpendicular moves is
/// taken uniformly. Moving into a wall leaves the agent in place. Goal cells
/// are absorbing with zero reward; entering one pays `goal_reward` on top of
/// `step_reward`, folded into the expected reward `R(s,a)`.
pub fn gridworld(spec: &GridworldSpec) -> Result<TabularMDP> {
    let GridworldSpec {
        width,
        height,
        noise,
        step_reward,
        goal_reward,
        ref goal_cells,
        reward_noise_sd,
        discount,
        start,
    } = *spec;
    if width == 0 || height == 0 {
        return Err(param("grid width and height must be >= 1"));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(param(format!("slip noise must be in [0,1), got {noise}")));
    }
    let n = width * height;
    if let Some(g) = goal_cells.iter().find(|&&g| g >= n) {
        return Err(param(format!("goal cell {g} outside a {width}x{height} grid")));
    }
    if start >= n {
        return Err(param(format!("start cell {start} outside the grid")));
    }
    let mut terminal = vec![false; n];
    goal_cells.iter().for_each(|&g| terminal[g] = true);

    let step = |cell: usize, dir: usize| -> usize {
        let (x, y) = (cell % width, cell / width);
        match dir {
            UP if y > 0 => cell - width,
            RIGHT if x + 1 < width => cell + 1,
            DOWN if y + 1 < height => cell + width,
            LEFT if x > 0 => cell - 1,
            _ => cell,
        }
    };

    let na = 4;
    let mut transition = vec![0.0; n * na * n];
    let mut reward = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * n..(s * na + a + 1) * n];
            if terminal[s] {
                row[s] = 1.0;
                continue;
            }
            row[step(s, a)] += 1.0 - noise;
            if noise > 0.0 {
                row[step(s, (a + 1) % 4)] += noise / 2.0;
                row[step(s, (a + 3) % 4)] += noise / 2.0;
            }
            let p_goal: f64 = goal_cells.iter().map(|&g| row[g]).sum();
            reward[s * na + a] = step_reward + goal_reward * p_goal;
        }
    }
    let mdp = TabularMDP::from_flat(n, na, transition, reward, discount)
        .with_reward_noise(reward_noise_sd)?
        .with_start_state(start)?
        .with_terminal(terminal)?;
    let report = validate_mdp(&mdp);
    if !report.is_valid() {
        return Err(Error::InvalidMdp(report));
    }
    Ok(mdp)
}

/// Result of [`policy_evaluation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub q: QTable,
    pub iterations: usize,
}

/// Iterates `Q(s,a) = R(s,a) + gamma * sum_s' P(s'|s,a) sum_a' pi(s',a') Q(s',a')`
/// from zero until the sup-norm step drops below `tol`.
pub fn policy_evaluation(mdp: &TabularMDP, policy: &Policy, tol: f64, max_iters: usize) -> Result<Evaluation> {
    if policy.shape() != mdp.shape() {
        return Err(dims(mdp.shape(), policy.shape()));
    }
    if !(tol > 0.0) {
        return Err(param(format!("tol must be > 0, got {tol}")));
    }
    let (ns, na) = mdp.shape();
    let mut q = QTable::zeros(ns, na);
    let mut last_step = f64::INFINITY;
    for it in 1..=max_iters {
        let v: Vec<f64> = (0..ns)
            .map(|s| q.row(s).iter().zip(policy.row(s)).map(|(x, p)| x * p).sum())
            .collect();
        let next = crate::ops::backup_with_values(mdp, &v);
        last_step = next.sup_distance(&q);
        q = next;
        if last_step < tol {
            return Ok(Evaluation { q, iterations: it });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iters,
        last_step,
        last: Box::new(q),
    })
}
