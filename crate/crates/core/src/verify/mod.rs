//! Self-checks grouped into suites: reference-implementation comparisons,
//! finite-difference gradient checks and invariants.

mod grad;
pub mod oracle;
mod props;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::gradcheck::{GradReport, ZERO_GRAD_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Grad,
    Oracle,
    Props,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Grad => "grad",
            Suite::Oracle => "oracle",
            Suite::Props => "props",
        }
    }

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

impl std::str::FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::All, Suite::Grad, Suite::Oracle, Suite::Props]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}")))
    }
}

/// Outcome of one check: a short summary on success, the reason on failure.
pub type Outcome = std::result::Result<String, String>;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    #[serde(serialize_with = "as_secs")]
    pub elapsed: Duration,
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

type CheckFn = fn() -> Outcome;

fn registry() -> Vec<(Suite, &'static str, CheckFn)> {
    let mut v: Vec<(Suite, &'static str, CheckFn)> = Vec::new();
    v.extend(props::ORACLE.iter().map(|(n, f)| (Suite::Oracle, *n, *f)));
    v.extend(grad::CHECKS.iter().map(|(n, f)| (Suite::Grad, *n, *f)));
    v.extend(props::PROPS.iter().map(|(n, f)| (Suite::Props, *n, *f)));
    v
}

/// Names of the checks a suite runs.
pub fn check_names(suite: Suite) -> Vec<&'static str> {
    registry()
        .into_iter()
        .filter(|(s, _, _)| suite.includes(*s))
        .map(|(_, n, _)| n)
        .collect()
}

/// Runs one named check.
pub fn run_check(name: &str) -> Option<Check> {
    registry()
        .into_iter()
        .find(|(_, n, _)| *n == name)
        .map(|(s, n, f)| execute(s, n, f))
}

/// Runs every check of a suite in a fixed order. A panicking check counts as
/// a failure.
pub fn run(suite: Suite) -> Vec<Check> {
    registry()
        .into_iter()
        .filter(|(s, _, _)| suite.includes(*s))
        .map(|(s, n, f)| execute(s, n, f))
        .collect()
}

fn execute(suite: Suite, name: &'static str, f: CheckFn) -> Check {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        suite,
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Fixed-width table, one line per check.
pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<6}  {:<7}  {:<width$}  {:>8}  detail\n", "result", "suite", "name", "seconds");
    for c in checks {
        out.push_str(&format!(
            "{:<6}  {:<7}  {:<width$}  {:>8.3}  {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.suite.name(),
            c.name,
            c.elapsed.as_secs_f64(),
            c.detail
        ));
    }
    out
}

/// Relative-error tolerance of the gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

pub(crate) fn judge(reports: &[GradReport]) -> Outcome {
    if reports.is_empty() {
        return Err("no gradients compared".into());
    }
    let failing: Vec<&GradReport> = reports.iter().filter(|r| !r.passes(GRAD_TOL)).collect();
    if !failing.is_empty() {
        return Err(failing
            .iter()
            .map(|r| format!("{}: rel err {:.2e}", r.name, r.rel_err))
            .collect::<Vec<_>>()
            .join("; "));
    }
    let zero = |r: &&GradReport| r.analytic_norm.max(r.numeric_norm) < ZERO_GRAD_FLOOR;
    let n_zero = reports.iter().filter(zero).count();
    let worst = reports
        .iter()
        .filter(|r| !zero(r))
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
    let mut msg = match worst {
        Some(w) => format!("{} tensors, worst rel err {:.2e} ({})", reports.len(), w.rel_err, w.name),
        None => format!("{} tensors", reports.len()),
    };
    if n_zero > 0 {
        msg.push_str(&format!(", {n_zero} with zero gradient"));
    }
    Ok(msg)
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
