//! Structured results of verification suites.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    /// `lhs <= rhs` with an explicit constant; `ratio = lhs / rhs`.
    Bound,
    /// `lhs` equals `rhs` up to a relative tolerance.
    Identity,
    /// A fitted constant; passes when finite (and stable, where refined).
    Fitted,
    /// Recorded for inspection, never fails the run.
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub anchor: String,
    pub kind: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub pass: bool,
}

fn safe_ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs == 0.0 {
        if lhs == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        lhs / rhs
    }
}

impl Check {
    /// Passes when `lhs / rhs <= 1 + tol`.
    pub fn bound(name: &str, anchor: &str, lhs: f64, rhs: f64, tol: f64) -> Self {
        let ratio = safe_ratio(lhs, rhs);
        Self {
            name: name.into(),
            anchor: anchor.into(),
            kind: CheckKind::Bound,
            lhs,
            rhs,
            ratio,
            pass: ratio.is_finite() && ratio <= 1.0 + tol,
        }
    }

    /// Passes when `|lhs - rhs| <= tol * max(|rhs|, floor)`; `ratio` is the
    /// achieved relative deviation over `tol`.
    pub fn identity(name: &str, anchor: &str, lhs: f64, rhs: f64, tol: f64) -> Self {
        let scale = rhs.abs().max(f64::MIN_POSITIVE);
        let dev = (lhs - rhs).abs() / scale;
        Self {
            name: name.into(),
            anchor: anchor.into(),
            kind: CheckKind::Identity,
            lhs,
            rhs,
            ratio: dev / tol,
            pass: lhs.is_finite() && dev <= tol,
        }
    }

    /// A fitted constant `lhs`; `rhs` carries a comparison value (the
    /// refined fit, or a ceiling) and `ratio = lhs / rhs`.
    pub fn fitted(name: &str, anchor: &str, lhs: f64, rhs: f64, pass: bool) -> Self {
        Self {
            name: name.into(),
            anchor: anchor.into(),
            kind: CheckKind::Fitted,
            lhs,
            rhs,
            ratio: safe_ratio(lhs, rhs),
            pass: pass && lhs.is_finite(),
        }
    }

    pub fn diagnostic(name: &str, anchor: &str, lhs: f64, rhs: f64) -> Self {
        Self {
            name: name.into(),
            anchor: anchor.into(),
            kind: CheckKind::Diagnostic,
            lhs,
            rhs,
            ratio: safe_ratio(lhs, rhs),
            pass: true,
        }
    }

    /// A pass/fail check where `lhs` and `rhs` are informative only.
    pub fn flag(name: &str, anchor: &str, lhs: f64, rhs: f64, pass: bool) -> Self {
        Self {
            name: name.into(),
            anchor: anchor.into(),
            kind: CheckKind::Bound,
            lhs,
            rhs,
            ratio: safe_ratio(lhs, rhs),
            pass,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Report {
    pub suite: String,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn new(suite: &str) -> Self {
        Self {
            suite: suite.into(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn extend(&mut self, other: Report) {
        self.checks.extend(other.checks);
        self.notes.extend(other.notes);
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}
