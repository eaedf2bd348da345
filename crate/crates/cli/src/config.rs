//! Experiment configuration: a TOML file whose every section is optional.
//! Unknown keys are rejected so a misspelled grid never silently falls
//! back to a default.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use softmax_bellman::mdp::{random_mdp, GridworldSpec, MdpDocument, TabularMDP};
use softmax_bellman::seed;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::Subcommand)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Q-iteration with each operator; traces and final tables.
    Solve,
    /// Realized softmax gap against its lower and upper bounds on random rows.
    SweepBounds,
    /// Max, softmax and double estimators under additive noise.
    Overestimate,
    /// Softmax versus mellowmax approximation and overestimation error.
    Figure7,
    /// Online Q-learning with each bootstrap target.
    Qlearn,
    /// Empirical Lipschitz ratio of each backup.
    ProbeContraction,
    /// Max and softmax iterates side by side, with the accumulation bound and rate fit.
    #[command(name = "verify-theorem1")]
    #[serde(rename = "verify-theorem1")]
    VerifyTheorem1,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::SweepBounds => "sweep-bounds",
            ExperimentKind::Overestimate => "overestimate",
            ExperimentKind::Figure7 => "figure7",
            ExperimentKind::Qlearn => "qlearn",
            ExperimentKind::ProbeContraction => "probe-contraction",
            ExperimentKind::VerifyTheorem1 => "verify-theorem1",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Checks whose failure makes the run exit nonzero.
    #[serde(default)]
    pub assert: Vec<String>,
    pub mdp: Option<MdpSource>,
    pub operators: Option<OperatorGrid>,
    /// Trials per cell (rows, noise draws or probe pairs, by experiment).
    pub trials: Option<usize>,
    /// Independent repetitions (learning runs).
    pub runs: Option<usize>,
    /// Number of actions for the noise experiments.
    pub actions: Option<Vec<usize>>,
    pub noise: Option<NoiseSection>,
    pub iteration: Option<IterationSection>,
    pub learning: Option<LearningSection>,
    /// Iterations for the side-by-side verification.
    pub k: Option<usize>,
    /// Inverse temperatures of the exponential-rate fit.
    pub rate_taus: Option<Vec<f64>>,
    /// Grid for the per-trial monotonicity check.
    pub monotone_grid: Option<GridSpec>,
    /// Half-width of the perturbations in the contraction probe.
    pub perturbation: Option<f64>,
    /// Bound on `|Q|` for the random rows of the gap sweep.
    pub q_max: Option<f64>,
}

/// Exactly one of the four fields must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSource {
    pub file: Option<PathBuf>,
    pub random: Option<RandomMdpSection>,
    pub gridworld: Option<GridworldSpec>,
    pub inline: Option<MdpDocument>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeRange {
    Fixed(usize),
    Between([usize; 2]),
}

impl SizeRange {
    fn bounds(self) -> (usize, usize) {
        match self {
            SizeRange::Fixed(n) => (n, n),
            SizeRange::Between([lo, hi]) => (lo, hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdpSection {
    pub n_states: SizeRange,
    pub n_actions: SizeRange,
    /// Successors per state-action pair, capped at the state count.
    #[serde(default = "default_branching")]
    pub branching: usize,
    #[serde(default = "default_reward_range")]
    pub reward_range: [f64; 2],
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_branching() -> usize {
    3
}

fn default_reward_range() -> [f64; 2] {
    [-1.0, 1.0]
}

fn default_gamma() -> f64 {
    0.9
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorGrid {
    #[serde(default)]
    pub max: bool,
    #[serde(default)]
    pub mean: bool,
    #[serde(default)]
    pub softmax: Vec<f64>,
    #[serde(default)]
    pub mellowmax: Vec<f64>,
    #[serde(default)]
    pub double_max: bool,
    #[serde(default)]
    pub double_softmax: Vec<f64>,
}

impl OperatorGrid {
    pub fn is_empty(&self) -> bool {
        !self.max
            && !self.mean
            && !self.double_max
            && self.softmax.is_empty()
            && self.mellowmax.is_empty()
            && self.double_softmax.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// `normal` or `uniform`.
    pub distribution: NoiseKind,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn default_half_width() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Normal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSection {
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    pub episodes: Option<usize>,
    pub epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        // relative MDP files are resolved against the config's directory
        if let Some(file) = config.mdp.as_mut().and_then(|m| m.file.as_mut()) {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        Ok(config)
    }

    /// Canonical TOML of the effective configuration, hashed into the manifest.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Structural checks that do not depend on the experiment.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if let Some(k) = self.experiment {
            if k != kind {
                return Err(CliError::Config(format!(
                    "config declares experiment `{k}` but `{kind}` was requested"
                )));
            }
        }
        if let Some(src) = &self.mdp {
            let n = [
                src.file.is_some(),
                src.random.is_some(),
                src.gridworld.is_some(),
                src.inline.is_some(),
            ]
            .iter()
            .filter(|&&x| x)
            .count();
            if n != 1 {
                return Err(CliError::Config(format!(
                    "[mdp] needs exactly one of file, random, gridworld, inline (found {n})"
                )));
            }
            if let Some(r) = &src.random {
                let (lo_s, hi_s) = r.n_states.bounds();
                let (lo_a, hi_a) = r.n_actions.bounds();
                if lo_s == 0 || lo_a == 0 || lo_s > hi_s || lo_a > hi_a {
                    return Err(CliError::Config("mdp.random sizes must be positive ranges".into()));
                }
                if r.count == 0 || r.branching == 0 {
                    return Err(CliError::Config("mdp.random count and branching must be >= 1".into()));
                }
            }
        }
        if self.operators.as_ref().is_some_and(OperatorGrid::is_empty) {
            return Err(CliError::Config("[operators] selects no operator".into()));
        }
        let nonempty = [
            ("actions", self.actions.as_ref().map(Vec::len)),
            ("rate_taus", self.rate_taus.as_ref().map(Vec::len)),
        ];
        for (name, len) in nonempty {
            if len == Some(0) {
                return Err(CliError::Config(format!("`{name}` must not be empty")));
            }
        }
        for (name, v) in [("trials", self.trials), ("runs", self.runs), ("k", self.k)] {
            if v == Some(0) {
                return Err(CliError::Config(format!("`{name}` must be >= 1")));
            }
        }
        Ok(())
    }
}

impl MdpSource {
    pub fn random(section: RandomMdpSection) -> Self {
        MdpSource {
            random: Some(section),
            ..Default::default()
        }
    }

    pub fn gridworld(spec: GridworldSpec) -> Self {
        MdpSource {
            gridworld: Some(spec),
            ..Default::default()
        }
    }

    /// Builds the MDP list; random MDP `i` uses the seed derived from
    /// `master` and the label `mdp/i`.
    pub fn build(&self, master: u64) -> Result<Vec<TabularMDP>> {
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            return Ok(vec![TabularMDP::from_json(&text)?]);
        }
        if let Some(doc) = &self.inline {
            return Ok(vec![doc.clone().into_mdp()?]);
        }
        if let Some(spec) = &self.gridworld {
            return Ok(vec![softmax_bellman::mdp::gridworld(spec)?]);
        }
        let r = self.random.as_ref().expect("validated source");
        (0..r.count)
            .map(|i| {
                let s = seed::derive_seed(master, &format!("mdp/{i}"));
                let mut rng = seed::rng(seed::derive_seed(s, "size"));
                let (lo_s, hi_s) = r.n_states.bounds();
                let (lo_a, hi_a) = r.n_actions.bounds();
                let ns = rng.random_range(lo_s..=hi_s);
                let na = rng.random_range(lo_a..=hi_a);
                let m = random_mdp(
                    ns,
                    na,
                    r.branching.min(ns),
                    (r.reward_range[0], r.reward_range[1]),
                    r.gamma,
                    s,
                )?;
                Ok(m)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate(ExperimentKind::Solve).unwrap();
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = ExperimentConfig::parse("seed = 1\n[operators]\nsoftmx = [1.0]\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("softmx"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn exactly_one_mdp_source() {
        let two =
            ExperimentConfig::parse("[mdp]\nfile = \"x.json\"\n[mdp.random]\nn_states = 3\nn_actions = 2\n").unwrap();
        assert!(two.validate(ExperimentKind::Solve).is_err());
        let none = ExperimentConfig::parse("[mdp]\n").unwrap();
        assert!(none.validate(ExperimentKind::Solve).is_err());
    }

    #[test]
    fn experiment_mismatch() {
        let c = ExperimentConfig::parse("experiment = \"figure7\"").unwrap();
        assert!(c.validate(ExperimentKind::Figure7).is_ok());
        assert!(c.validate(ExperimentKind::Qlearn).is_err());
    }

    #[test]
    fn empty_lists_rejected() {
        for text in [
            "actions = []",
            "rate_taus = []",
            "trials = 0",
            "[operators]\nmax = false",
        ] {
            let c = ExperimentConfig::parse(text).unwrap();
            assert!(c.validate(ExperimentKind::Solve).is_err(), "{text}");
        }
    }

    #[test]
    fn inline_mdp_and_ranges() {
        let c = ExperimentConfig::parse(
            "[mdp.inline]\nn_states = 1\nn_actions = 1\ngamma = 0.5\nrewards = [1.0]\ntransitions = [[0, 0, 0, 1.0]]\n",
        )
        .unwrap();
        c.validate(ExperimentKind::Solve).unwrap();
        let mdps = c.mdp.unwrap().build(0).unwrap();
        assert_eq!(mdps[0].shape(), (1, 1));

        let c = ExperimentConfig::parse("[mdp.random]\nn_states = [2, 10]\nn_actions = [2, 5]\ncount = 20\n").unwrap();
        let mdps = c.mdp.unwrap().build(42).unwrap();
        assert_eq!(mdps.len(), 20);
        assert!(mdps
            .iter()
            .all(|m| (2..=10).contains(&m.n_states()) && (2..=5).contains(&m.n_actions())));
    }

    #[test]
    fn canonical_round_trip() {
        let c = ExperimentConfig::parse("seed = 3\ntrials = 10\n[operators]\nsoftmax = [1.0, 2.5]\n").unwrap();
        assert_eq!(ExperimentConfig::parse(&c.canonical()).unwrap(), c);
    }
}
