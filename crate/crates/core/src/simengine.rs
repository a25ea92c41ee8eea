//! Trace-driven simulation: exit decisions per window, governor schedules per exit,
//! energy/latency/accuracy accounting, and the policy comparison tables.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::devmodel::{calibrate, reference_anchors, CostTable, DeviceProfile};
use crate::error::{Error, Result};
use crate::exitnet::{window_features, ExitDecision, ExitNetModel, ExitPoint};
use crate::profiler::{
    cds_search, evaluate_schedule, random_search, Objective, ProfileCache, Schedule, ScheduleEval, SearchConfig,
    DEFAULT_BUDGET_SLACK,
};
use crate::scalar::Scalar;
use crate::tracegen::{window_complexity, FrameTrace};

/// Which sub-systems a simulation runs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Policy {
    /// Early exit plus CDS schedules.
    E4,
    /// CDS schedule for the full network, no early exit.
    DvfsOnly,
    /// Early exit at maximum frequencies.
    EarlyExitOnly,
    /// Full network at maximum frequencies.
    BaselineMax,
    /// Full network at minimum frequencies.
    BaselineMin,
    /// Early exit plus random-search schedules with the CDS evaluation budget.
    E4R,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::E4,
        Policy::DvfsOnly,
        Policy::EarlyExitOnly,
        Policy::BaselineMax,
        Policy::BaselineMin,
        Policy::E4R,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::E4 => "E4",
            Policy::DvfsOnly => "DVFS_ONLY",
            Policy::EarlyExitOnly => "EARLYEXIT_ONLY",
            Policy::BaselineMax => "BASELINE_MAX",
            Policy::BaselineMin => "BASELINE_MIN",
            Policy::E4R => "E4_R",
        }
    }

    pub fn uses_early_exit(&self) -> bool {
        matches!(self, Policy::E4 | Policy::EarlyExitOnly | Policy::E4R)
    }

    pub fn uses_search(&self) -> bool {
        matches!(self, Policy::E4 | Policy::DvfsOnly | Policy::E4R)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == norm || (norm == "E4R" && *p == Policy::E4R))
            .ok_or_else(|| {
                let names: Vec<&str> = Policy::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown policy '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// A policy together with the knobs it runs under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorPolicy {
    pub policy: Policy,
    pub search: SearchConfig,
    /// Overrides the model's gate threshold when set.
    pub gate_threshold: Option<f64>,
}

impl GovernorPolicy {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            search: SearchConfig::default(),
            gate_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub window: usize,
    pub complexity: f64,
    pub exit: ExitPoint,
    pub layers: usize,
    pub energy_j: f64,
    pub latency_ms: f64,
    /// `None` when no model was supplied.
    pub correct: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub layers: usize,
    pub schedule: Schedule<f64>,
    pub energy_j: f64,
    pub latency_ms: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub device: String,
    pub cost_table: String,
    pub seed: u64,
    pub windows: usize,
    pub total_energy_j: f64,
    pub total_latency_ms: f64,
    /// Total energy over total busy time.
    pub mean_power_w: f64,
    pub mean_latency_ms: f64,
    pub mean_energy_j: f64,
    pub mean_layers: f64,
    /// Counts per exit `1..=E`, then FULL.
    pub exit_histogram: Vec<usize>,
    pub accuracy: Option<f64>,
    /// Schedule evaluations spent by the profiler.
    pub evaluation_count: usize,
    /// Memoized schedule per executed layer count.
    pub schedules: Vec<ScheduleRecord>,
    pub records: Vec<WindowRecord>,
}

impl SimReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-window records as delimited text.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("window,complexity,exit,layers,energy_j,latency_ms,correct\n");
        for r in &self.records {
            let correct = r.correct.map_or(String::new(), |c| u8::from(c).to_string());
            let _ = writeln!(
                out,
                "{},{:.6},{},{},{:.9e},{:.9e},{}",
                r.window, r.complexity, r.exit, r.layers, r.energy_j, r.latency_ms, correct
            );
        }
        out
    }
}

/// Number of executed layers for an exit decision.
fn layers_for<S: Scalar>(table: &CostTable<S>, exit: ExitPoint) -> Result<usize> {
    table.layers_for_exit(exit.index())
}

/// Runs `policy` over every complete window of `trace`.
///
/// Window features use `seed` as the noise seed and the profiler search is seeded from it,
/// so identical inputs give bit-identical reports. Under a budgeted objective with no explicit
/// budget, every exit shares one deadline: the full network's all-max latency plus the default
/// slack.
pub fn simulate<S: Scalar>(
    trace: &FrameTrace,
    profile: &DeviceProfile<S>,
    table: &CostTable<S>,
    model: Option<&ExitNetModel<S>>,
    policy: &GovernorPolicy,
    seed: u64,
) -> Result<SimReport> {
    trace.validate()?;
    profile.validate()?;
    table.validate()?;
    policy.search.validate()?;
    if policy.policy.uses_early_exit() && model.is_none() {
        return Err(Error::Config(format!("policy {} needs an exit model", policy.policy)));
    }
    let num_exits = table.num_exits();
    if let Some(m) = model {
        if m.num_exits() != num_exits {
            return Err(Error::Config(format!(
                "model has {} exits but cost table {} has {}",
                m.num_exits(),
                table.name,
                num_exits
            )));
        }
    }
    let model = match (model, policy.gate_threshold) {
        (Some(m), Some(th)) => Some(m.clone().with_threshold(th)?),
        (m, _) => m.cloned(),
    };

    // Exit decisions and correctness are independent per window.
    let windows: Vec<_> = trace.windows().collect();
    let decisions: Vec<(ExitPoint, Option<bool>)> = windows
        .par_iter()
        .map(|w| -> Result<(ExitPoint, Option<bool>)> {
            let Some(m) = model.as_ref() else {
                return Ok((ExitPoint::Full, None));
            };
            let phis: Vec<Vec<S>> = window_features(w, m.config(), seed);
            let fwd = m.forward_window(&phis)?;
            let decision = if policy.policy.uses_early_exit() {
                fwd.decision(S::lit(m.config().gate_threshold))
            } else {
                ExitDecision {
                    exit: ExitPoint::Full,
                    fired_at_frame: None,
                    gate_probability: 0.0,
                }
            };
            let correct = m.predict(&fwd, &decision) == w[0].label;
            Ok((decision.exit, Some(correct)))
        })
        .collect::<Result<_>>()?;

    // One per-window deadline for every exit: the full network at max clocks plus slack.
    let mut search = policy.search.clone();
    if search.objective == Objective::EnergyWithBudget && search.latency_budget.is_none() {
        let full = evaluate_schedule(&Schedule::uniform(profile.max_pair(), table.depth()), table, profile)?;
        search.latency_budget = Some(full.latency_ms.as_f64() * DEFAULT_BUDGET_SLACK);
    }
    let policy = &GovernorPolicy {
        search,
        ..policy.clone()
    };

    let cache = ProfileCache::new();
    let mut memo: BTreeMap<usize, (Schedule<S>, ScheduleEval<S>, usize)> = BTreeMap::new();
    let mut records = Vec::with_capacity(windows.len());
    let mut histogram = vec![0; num_exits + 1];
    for (i, (w, (exit, correct))) in windows.iter().zip(decisions).enumerate() {
        let layers = layers_for(table, exit)?;
        let (_, eval, _) = match memo.entry(layers) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(v) => v.insert(schedule_for(policy, layers, table, profile, &cache, seed)?),
        };
        match exit {
            ExitPoint::Exit(e) => histogram[e - 1] += 1,
            ExitPoint::Full => histogram[num_exits] += 1,
        }
        records.push(WindowRecord {
            window: i,
            complexity: window_complexity(w),
            exit,
            layers,
            energy_j: eval.energy_j.as_f64(),
            latency_ms: eval.latency_ms.as_f64(),
            correct,
        });
    }

    let n = records.len();
    let total_energy: f64 = records.iter().map(|r| r.energy_j).sum();
    let total_latency: f64 = records.iter().map(|r| r.latency_ms).sum();
    let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    let accuracy = if model.is_some() && n > 0 {
        Some(records.iter().filter(|r| r.correct == Some(true)).count() as f64 / n as f64)
    } else {
        None
    };
    Ok(SimReport {
        policy: policy.policy,
        device: profile.name.clone(),
        cost_table: table.name.clone(),
        seed,
        windows: n,
        total_energy_j: total_energy,
        total_latency_ms: total_latency,
        mean_power_w: if total_latency > 0.0 {
            total_energy / (total_latency / 1000.0)
        } else {
            0.0
        },
        mean_latency_ms: mean(total_latency),
        mean_energy_j: mean(total_energy),
        mean_layers: mean(records.iter().map(|r| r.layers as f64).sum()),
        exit_histogram: histogram,
        accuracy,
        evaluation_count: memo.values().map(|m| m.2).sum(),
        schedules: memo
            .into_iter()
            .map(|(layers, (s, e, evals))| ScheduleRecord {
                layers,
                schedule: Schedule {
                    pairs: s.pairs.iter().map(|p| crate::devmodel::FrequencyPair::from_f64(p.cpu.as_f64(), p.gpu.as_f64())).collect(),
                },
                energy_j: e.energy_j.as_f64(),
                latency_ms: e.latency_ms.as_f64(),
                evaluations: evals,
            })
            .collect(),
        records,
    })
}

fn schedule_for<S: Scalar>(
    policy: &GovernorPolicy,
    layers: usize,
    table: &CostTable<S>,
    profile: &DeviceProfile<S>,
    cache: &ProfileCache<S>,
    seed: u64,
) -> Result<(Schedule<S>, ScheduleEval<S>, usize)> {
    let search = SearchConfig {
        seed: seed ^ (layers as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        ..policy.search.clone()
    };
    let fixed = |pair| -> Result<_> {
        let s = Schedule::uniform(pair, layers);
        let e = evaluate_schedule(&s, table, profile)?;
        Ok((s, e, 0))
    };
    match policy.policy {
        Policy::BaselineMax | Policy::EarlyExitOnly => fixed(profile.max_pair()),
        Policy::BaselineMin => fixed(profile.min_pair()),
        Policy::E4 | Policy::DvfsOnly => {
            let out = cds_search(layers, table, profile, &search, cache)?;
            Ok((out.schedule, out.eval, out.evaluations))
        }
        Policy::E4R => {
            let budget = search.cds_evaluations(layers).max(1);
            let out = random_search(layers, table, profile, budget, &search, cache)?;
            Ok((out.schedule, out.eval, out.evaluations))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    /// Display label, e.g. the ablation row name.
    pub label: String,
    pub latency_ms: f64,
    pub power_w: f64,
    pub energy_j: f64,
    pub accuracy: Option<f64>,
    /// Baseline latency over this row's latency.
    pub speedup: f64,
    /// `1 - energy / baseline energy`.
    pub energy_saving: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, policy: Policy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,policy,latency_ms,power_w,energy_j,accuracy,speedup,energy_saving\n");
        for r in &self.rows {
            let acc = r.accuracy.map_or(String::new(), |a| format!("{a:.6}"));
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.9e},{},{:.6},{:.6}",
                r.label, r.policy, r.latency_ms, r.power_w, r.energy_j, acc, r.speedup, r.energy_saving
            );
        }
        out
    }
}

/// Speedup and energy saving of each report against the `BASELINE_MAX` report.
///
/// Latency and energy are per-window means, power is the mean busy power.
pub fn compare(reports: &[SimReport]) -> Result<ComparisonTable> {
    let labelled: Vec<(String, &SimReport)> = reports.iter().map(|r| (r.policy.name().to_string(), r)).collect();
    compare_labelled(&labelled)
}

fn compare_labelled(reports: &[(String, &SimReport)]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::domain("comparison needs at least one report"));
    }
    let base = reports
        .iter()
        .find(|(_, r)| r.policy == Policy::BaselineMax)
        .ok_or_else(|| Error::Config("comparison needs a BASELINE_MAX report".into()))?
        .1;
    let rows = reports
        .iter()
        .map(|(label, r)| ComparisonRow {
            policy: r.policy,
            label: label.clone(),
            latency_ms: r.mean_latency_ms,
            power_w: r.mean_power_w,
            energy_j: r.mean_energy_j,
            accuracy: r.accuracy,
            speedup: base.mean_latency_ms / r.mean_latency_ms,
            energy_saving: 1.0 - r.mean_energy_j / base.mean_energy_j,
        })
        .collect();
    Ok(ComparisonTable { rows })
}

/// Ablation row labels, in output order, with the policy each runs.
pub const ABLATION_ROWS: [(&str, Policy); 4] = [
    ("neither", Policy::BaselineMax),
    ("dvfs-only", Policy::DvfsOnly),
    ("early-exit-only", Policy::EarlyExitOnly),
    ("both", Policy::E4),
];

/// The four-way ablation of DVFS and early exit on one trace and seed.
pub fn ablation<S: Scalar>(
    trace: &FrameTrace,
    profile: &DeviceProfile<S>,
    table: &CostTable<S>,
    model: &ExitNetModel<S>,
    search: &SearchConfig,
    seed: u64,
) -> Result<(ComparisonTable, Vec<SimReport>)> {
    let reports = ABLATION_ROWS
        .iter()
        .map(|(_, p)| {
            let gp = GovernorPolicy {
                search: search.clone(),
                ..GovernorPolicy::new(*p)
            };
            simulate(trace, profile, table, Some(model), &gp, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let labelled: Vec<(String, &SimReport)> = ABLATION_ROWS
        .iter()
        .zip(&reports)
        .map(|((l, _), r)| (l.to_string(), r))
        .collect();
    let table = compare_labelled(&labelled)?;
    Ok((table, reports))
}

/// Device profile and cost table calibrated to the shipped anchors of `device`.
///
/// Devices without anchors get their builtin profile and the uncalibrated table.
pub fn calibrated_scenario<S: Scalar>(device: &str, table: &CostTable<S>) -> Result<(DeviceProfile<S>, CostTable<S>)> {
    let template = DeviceProfile::builtin(device)?;
    let anchors = reference_anchors(device);
    if anchors.is_empty() {
        return Ok((template, table.clone()));
    }
    let cal = calibrate(&template, &anchors, table)?;
    Ok((cal.profile, cal.cost_table))
}
