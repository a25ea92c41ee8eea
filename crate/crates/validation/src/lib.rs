//! Pinned tolerances and bookkeeping for the `acceptance` test target.
//!
//! The target lives in its own package so that `cargo test --workspace` runs it after every
//! other package's tests.

use std::fmt;
use std::time::Duration;

/// |Σβ − 1| bound, over 10,000 windows at d = 16, T = 20.
pub const BETA_SUM_TOL: f64 = 1e-9;
pub const BETA_WINDOWS: usize = 10_000;
/// Maximum relative error of analytic vs central-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Number of separable instances on which CDS must match exhaustive search.
pub const SEPARABLE_INSTANCES: usize = 20;
/// CDS must be no worse than random search in at least this many of [`CDS_VS_RANDOM_SCENARIOS`].
pub const CDS_VS_RANDOM_SCENARIOS: usize = 100;
pub const CDS_VS_RANDOM_MIN_WINS: usize = 90;
/// Relative tolerance on the calibration anchor.
pub const CALIBRATION_REL_TOL: f64 = 0.05;
pub const ABLATION_SEEDS: usize = 20;
pub const EXIT1_USAGE_MIN: f64 = 0.70;
pub const LOW_COMPLEXITY: f64 = 0.3;
pub const ACCURACY_MIN: f64 = 0.90;
/// Allowed accuracy gain from T = 20 to T = 40 (one point).
pub const SATURATION_TOL: f64 = 0.01;

pub const RUNTIME_BETA: Duration = Duration::from_secs(5);
pub const RUNTIME_GRAD: Duration = Duration::from_secs(30);
pub const RUNTIME_SEPARABLE: Duration = Duration::from_secs(10);
pub const RUNTIME_CDS_VS_RANDOM: Duration = Duration::from_secs(120);
pub const RUNTIME_CALIBRATION: Duration = Duration::from_secs(1);
pub const RUNTIME_ABLATION: Duration = Duration::from_secs(300);
pub const RUNTIME_TRAINING: Duration = Duration::from_secs(600);

/// Outcome of one numbered criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {}: {} — {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Sub-checks of one criterion; it passes only if all of them do.
#[derive(Debug, Default)]
pub struct Checks {
    items: Vec<(String, bool)>,
}

impl Checks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, what: impl Into<String>, ok: bool) -> &mut Self {
        self.items.push((what.into(), ok));
        self
    }

    pub fn passed(&self) -> bool {
        self.items.iter().all(|(_, ok)| *ok)
    }

    /// `what ok; what FAILED; …`
    pub fn summary(&self) -> String {
        self.items
            .iter()
            .map(|(w, ok)| format!("{w} {}", if *ok { "ok" } else { "FAILED" }))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn failures(&self) -> impl Iterator<Item = &str> {
        self.items.iter().filter(|(_, ok)| !ok).map(|(w, _)| w.as_str())
    }
}
