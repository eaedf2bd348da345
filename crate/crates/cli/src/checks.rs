use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub passed: usize,
    pub failed: usize,
}

impl Tally {
    pub fn total(&self) -> usize {
        self.passed + self.failed
    }

    /// Fraction of evaluations that passed; 1 when nothing was checked.
    pub fn pass_rate(&self) -> f64 {
        if self.total() == 0 {
            1.0
        } else {
            self.passed as f64 / self.total() as f64
        }
    }
}

/// Named pass/fail counters, kept sorted so the manifest is stable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checks {
    tallies: BTreeMap<String, Tally>,
}

impl Checks {
    pub fn record(&mut self, name: &str, ok: bool) {
        let t = self.tallies.entry(name.to_string()).or_default();
        if ok {
            t.passed += 1;
        } else {
            t.failed += 1;
        }
    }

    pub fn add(&mut self, name: &str, checked: usize, violations: usize) {
        let t = self.tallies.entry(name.to_string()).or_default();
        t.passed += checked.saturating_sub(violations);
        t.failed += violations;
    }

    pub fn get(&self, name: &str) -> Option<Tally> {
        self.tallies.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Tally)> {
        self.tallies.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Names that match `pattern` exactly, or start with it when it ends in `*`.
    pub fn matching<'a>(&'a self, pattern: &'a str) -> impl Iterator<Item = (&'a str, Tally)> + 'a {
        self.iter().filter(move |(name, _)| match pattern.strip_suffix('*') {
            Some(prefix) => name.starts_with(prefix),
            None => *name == pattern,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, t) in self.iter() {
            let _ = writeln!(out, "check {name}: passed={} failed={}", t.passed, t.failed);
        }
        out
    }
}
