//! Per-layer frequency schedule search: coordinate descent (CDS), random search and an
//! exhaustive oracle, all sharing one evaluation cache.
//!
//! Schedules are handled internally as flat grid indices (`cpu_index * gpu_levels + gpu_index`),
//! which makes cache keys exact and tie-breaks integer-valued: on a uniform grid a lower index
//! sum is a lower frequency sum.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::devmodel::{unchecked_energy, unchecked_latency, CostTable, DeviceProfile, FrequencyPair};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default latency budget relative to the all-max-frequency schedule.
pub const DEFAULT_BUDGET_SLACK: f64 = 1.15;

/// Largest instance `brute_force` will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// One frequency pair per executed layer, layer 1 first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Schedule<S: Scalar> {
    pub pairs: Vec<FrequencyPair<S>>,
}

impl<S: Scalar> Schedule<S> {
    pub fn uniform(pair: FrequencyPair<S>, layers: usize) -> Self {
        Self {
            pairs: vec![pair; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of frequency changes between consecutive layers.
    pub fn switches(&self) -> usize {
        self.pairs.windows(2).filter(|w| w[0] != w[1]).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_index,cpu_freq,gpu_freq\n");
        for (i, p) in self.pairs.iter().enumerate() {
            let _ = writeln!(out, "{},{:.3},{:.3}", i + 1, p.cpu.as_f64(), p.gpu.as_f64());
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(err(n + 1, format!("expected 3 columns, found {}", cols.len())));
            }
            let idx: usize = cols[0].parse().map_err(|e| err(n + 1, format!("layer_index: {e}")))?;
            if idx != pairs.len() + 1 {
                return Err(err(n + 1, format!("layer_index {idx} out of order")));
            }
            let f = |s: &str, what: &str| -> Result<f64> { s.parse().map_err(|e| err(n + 1, format!("{what}: {e}"))) };
            pairs.push(FrequencyPair::from_f64(f(cols[1], "cpu_freq")?, f(cols[2], "gpu_freq")?));
        }
        Ok(Self { pairs })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ScheduleEval<S: Scalar> {
    pub energy_j: S,
    pub latency_ms: S,
}

impl<S: Scalar> ScheduleEval<S> {
    pub fn meets(&self, budget: Option<S>) -> bool {
        budget.is_none_or(|b| self.latency_ms <= b)
    }
}

/// Memoized schedule evaluations keyed by grid indices; safe to share across threads.
///
/// Entries are written once: evaluation is pure, so a concurrent duplicate insert carries
/// identical numbers and the first write is kept.
#[derive(Debug, Default)]
pub struct ProfileCache<S: Scalar> {
    entries: Mutex<HashMap<Vec<u32>, ScheduleEval<S>>>,
    misses: AtomicUsize,
}

impl<S: Scalar> ProfileCache<S> {
    pub fn new() -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total evaluations performed through this cache.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn get_or_insert_with(&self, key: &[u32], eval: impl FnOnce() -> ScheduleEval<S>) -> ScheduleEval<S> {
        if let Some(v) = self.entries.lock().expect("cache lock").get(key) {
            return *v;
        }
        let v = eval();
        let mut map = self.entries.lock().expect("cache lock");
        *map.entry(key.to_vec()).or_insert_with(|| {
            self.misses.fetch_add(1, Ordering::Relaxed);
            v
        })
    }

    /// Audit dump: `schedule_hash,layers,energy_j,latency_ms`, sorted by hash.
    pub fn dump_csv(&self) -> String {
        let map = self.entries.lock().expect("cache lock");
        let mut rows: Vec<(String, usize, ScheduleEval<S>)> = map
            .iter()
            .map(|(k, v)| {
                let mut h = Sha256::new();
                for idx in k {
                    h.update(idx.to_le_bytes());
                }
                let hex: String = h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
                (hex, k.len(), *v)
            })
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = String::from("schedule_hash,layers,energy_j,latency_ms\n");
        for (h, n, v) in rows {
            let _ = writeln!(out, "{h},{n},{:.9e},{:.9e}", v.energy_j.as_f64(), v.latency_ms.as_f64());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Minimize energy alone.
    Energy,
    /// Minimize energy among schedules within the latency budget.
    #[default]
    EnergyWithBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub rounds: usize,
    pub candidates: usize,
    /// Hard latency cap in ms; defaults to the all-max latency times [`DEFAULT_BUDGET_SLACK`].
    pub latency_budget: Option<f64>,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rounds: 3,
            candidates: 8,
            latency_budget: None,
            seed: 0,
            objective: Objective::EnergyWithBudget,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.candidates == 0 {
            return Err(Error::Config("rounds and candidates must be >= 1".into()));
        }
        if let Some(b) = self.latency_budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("latency budget must be > 0, got {b}")));
            }
        }
        Ok(())
    }

    /// Evaluation budget that matches one CDS run over `layers` layers.
    pub fn cds_evaluations(&self, layers: usize) -> usize {
        self.rounds * layers * self.candidates
    }

    /// Budget actually enforced for a search over the first `layers` layers.
    pub fn effective_budget<S: Scalar>(
        &self,
        profile: &DeviceProfile<S>,
        table: &CostTable<S>,
        layers: usize,
    ) -> Result<Option<S>> {
        match self.objective {
            Objective::Energy => Ok(None),
            Objective::EnergyWithBudget => {
                let max = Schedule::uniform(profile.max_pair(), layers);
                let base = evaluate_schedule(&max, table, profile)?.latency_ms;
                Ok(Some(match self.latency_budget {
                    Some(b) => S::lit(b),
                    None => base * S::lit(DEFAULT_BUDGET_SLACK),
                }))
            }
        }
    }
}

/// What a search returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct SearchOutcome<S: Scalar> {
    pub schedule: Schedule<S>,
    pub eval: ScheduleEval<S>,
    /// Distinct schedules this search evaluated (cache hits from earlier searches included).
    pub evaluations: usize,
    /// Best feasible energy after each coordinate update (CDS) or sample (random search),
    /// starting once a feasible schedule has been seen.
    pub trajectory: Vec<S>,
    pub latency_budget: Option<S>,
}

fn check_layers<S: Scalar>(table: &CostTable<S>, layers: usize) -> Result<()> {
    if layers > table.depth() {
        return Err(Error::domain(format!(
            "schedule covers {layers} layers but {} has {}",
            table.name,
            table.depth()
        )));
    }
    Ok(())
}

/// Energy and latency of running layers `1..=len` under `schedule`, charging the governor's
/// switch overhead (latency only) for every change between consecutive layers.
pub fn evaluate_schedule<S: Scalar>(
    schedule: &Schedule<S>,
    table: &CostTable<S>,
    profile: &DeviceProfile<S>,
) -> Result<ScheduleEval<S>> {
    check_layers(table, schedule.len())?;
    for p in &schedule.pairs {
        profile.check(p)?;
    }
    Ok(eval_pairs(&schedule.pairs, table, profile))
}

fn eval_pairs<S: Scalar>(pairs: &[FrequencyPair<S>], table: &CostTable<S>, profile: &DeviceProfile<S>) -> ScheduleEval<S> {
    let mut energy = S::zero();
    let mut latency = S::zero();
    for (cost, fp) in table.layers.iter().zip(pairs) {
        energy += unchecked_energy(profile, cost, fp);
        latency += unchecked_latency(cost, fp);
    }
    let switches = pairs.windows(2).filter(|w| w[0] != w[1]).count();
    latency += profile.switch_overhead * S::lit(switches as f64);
    ScheduleEval {
        energy_j: energy,
        latency_ms: latency,
    }
}

/// Shared plumbing of the searches: grid decoding, cached evaluation, ordering.
struct Searcher<'a, S: Scalar> {
    table: &'a CostTable<S>,
    profile: &'a DeviceProfile<S>,
    cache: &'a ProfileCache<S>,
    budget: Option<S>,
    layers: usize,
    visited: HashSet<Vec<u32>>,
}

impl<'a, S: Scalar> Searcher<'a, S> {
    fn decode(&self, key: &[u32]) -> Vec<FrequencyPair<S>> {
        key.iter().map(|&i| self.profile.pair_at_flat(i as usize)).collect()
    }

    fn eval(&mut self, key: &[u32]) -> ScheduleEval<S> {
        if !self.visited.contains(key) {
            self.visited.insert(key.to_vec());
        }
        self.cache
            .get_or_insert_with(key, || eval_pairs(&self.decode(key), self.table, self.profile))
    }

    /// Total order used for commits and final selection: feasible before infeasible, then
    /// lower energy (feasible) or lower latency (infeasible), then lower frequency sum, then
    /// lexicographic grid order.
    fn better(&self, a: (&[u32], &ScheduleEval<S>), b: (&[u32], &ScheduleEval<S>)) -> bool {
        let (fa, fb) = (a.1.meets(self.budget), b.1.meets(self.budget));
        if fa != fb {
            return fa;
        }
        let (ka, kb) = if fa {
            (a.1.energy_j, b.1.energy_j)
        } else {
            (a.1.latency_ms, b.1.latency_ms)
        };
        if ka != kb {
            return ka < kb;
        }
        let g = self.profile.gpu_levels() as u32;
        let sum = |k: &[u32]| k.iter().map(|&i| (i / g + i % g) as u64).sum::<u64>();
        let (sa, sb) = (sum(a.0), sum(b.0));
        if sa != sb {
            return sa < sb;
        }
        a.0 < b.0
    }

    /// Best feasible schedule among everything this search evaluated.
    fn best_visited(&self) -> Option<(Vec<u32>, ScheduleEval<S>)> {
        let map = self.cache.entries.lock().expect("cache lock");
        let mut best: Option<(&Vec<u32>, ScheduleEval<S>)> = None;
        for key in &self.visited {
            let ev = map[key];
            if !ev.meets(self.budget) {
                continue;
            }
            if best.as_ref().is_none_or(|(bk, be)| self.better((key, &ev), (bk, be))) {
                best = Some((key, ev));
            }
        }
        best.map(|(k, e)| (k.clone(), e))
    }

    fn finish(mut self, trajectory: Vec<S>) -> SearchOutcome<S> {
        let (key, eval) = match self.best_visited() {
            Some(b) => b,
            None => {
                // Nothing feasible was visited; the all-max schedule is feasible by precondition.
                let g = self.profile.grid_size() as u32;
                let key = vec![g - 1; self.layers];
                let eval = self.eval(&key);
                (key, eval)
            }
        };
        SearchOutcome {
            schedule: Schedule {
                pairs: self.decode(&key),
            },
            eval,
            evaluations: self.visited.len(),
            trajectory,
            latency_budget: self.budget,
        }
    }
}

/// Validates inputs and the budget. Errors with the tightest layer when even the all-max
/// schedule exceeds the budget.
fn prepare<'a, S: Scalar>(
    layers: usize,
    table: &'a CostTable<S>,
    profile: &'a DeviceProfile<S>,
    config: &SearchConfig,
    cache: &'a ProfileCache<S>,
) -> Result<Searcher<'a, S>> {
    config.validate()?;
    profile.validate()?;
    check_layers(table, layers)?;
    let budget = config.effective_budget(profile, table, layers)?;
    if let Some(b) = budget {
        let max = profile.max_pair();
        let min_latency = eval_pairs(&vec![max; layers], table, profile).latency_ms;
        if min_latency > b {
            let tightest = table.layers[..layers]
                .iter()
                .enumerate()
                .max_by(|x, y| {
                    unchecked_latency(x.1, &max)
                        .as_f64()
                        .total_cmp(&unchecked_latency(y.1, &max).as_f64())
                })
                .map_or(0, |(i, _)| i + 1);
            return Err(Error::Infeasible {
                budget_ms: b.as_f64(),
                min_latency_ms: min_latency.as_f64(),
                tightest_layer: tightest,
            });
        }
    }
    Ok(Searcher {
        table,
        profile,
        cache,
        budget,
        layers,
        visited: HashSet::new(),
    })
}

/// Candidate grid indices for one coordinate: the current value, both grid extremes
/// (when `n ≥ 3`), the neighbours' values while room remains, then uniform draws without
/// replacement; returned in ascending order.
fn coordinate_candidates(current: u32, neighbors: &[u32], grid: u32, n: usize, rng: &mut impl Rng) -> Vec<u32> {
    let n = n.min(grid as usize);
    let mut set = vec![current];
    if n >= 3 {
        for extreme in [0, grid - 1] {
            if !set.contains(&extreme) {
                set.push(extreme);
            }
        }
    }
    for &v in neighbors {
        if set.len() < n && !set.contains(&v) {
            set.push(v);
        }
    }
    if set.len() < n {
        for i in sample(rng, grid as usize, grid as usize).into_iter() {
            let i = i as u32;
            if !set.contains(&i) {
                set.push(i);
                if set.len() == n {
                    break;
                }
            }
        }
    }
    set.truncate(n.max(1));
    set.sort_unstable();
    set
}

/// Coordinate descent over layers `1..=layers`.
///
/// Starts from the grid midpoint everywhere, or from all-max when the midpoint misses the
/// budget. Each round sweeps the layers in order; for each layer, `candidates` grid pairs are
/// evaluated with the other layers held fixed and the best is committed (feasible first, then
/// lower energy; if none is feasible, the lowest latency). Candidates always include the
/// current value, the grid extremes and the adjacent layers' values, so a frequency change can
/// spread along the network without paying a new switch at every step. Returns the best
/// feasible schedule seen. Distinct evaluations never exceed `rounds · layers · candidates + 1`.
pub fn cds_search<S: Scalar>(
    layers: usize,
    table: &CostTable<S>,
    profile: &DeviceProfile<S>,
    config: &SearchConfig,
    cache: &ProfileCache<S>,
) -> Result<SearchOutcome<S>> {
    let mut s = prepare(layers, table, profile, config, cache)?;
    let grid = profile.grid_size() as u32;
    let mid = profile.flat_index(&profile.mid_pair())? as u32;
    let mut current = vec![mid; layers];
    let mut init = s.eval(&current);
    if !init.meets(s.budget) {
        // A switch costs more latency than one layer can win back, so an infeasible start
        // cannot be repaired coordinate-wise; restart from the all-max schedule instead.
        current = vec![grid - 1; layers];
        init = s.eval(&current);
    }
    let mut best = (current.clone(), init);
    let mut trajectory = Vec::new();
    if init.meets(s.budget) {
        trajectory.push(init.energy_j);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _round in 0..config.rounds {
        for layer in 0..layers {
            let neighbors: Vec<u32> = [layer.checked_sub(1), Some(layer + 1)]
                .into_iter()
                .flatten()
                .filter_map(|i| current.get(i).copied())
                .collect();
            let cands = coordinate_candidates(current[layer], &neighbors, grid, config.candidates, &mut rng);
            let mut pick: Option<(Vec<u32>, ScheduleEval<S>)> = None;
            for c in cands {
                let mut trial = current.clone();
                trial[layer] = c;
                let ev = s.eval(&trial);
                if pick.as_ref().is_none_or(|(pk, pe)| s.better((&trial, &ev), (pk, pe))) {
                    pick = Some((trial, ev));
                }
            }
            let (next, ev) = pick.expect("at least one candidate");
            if s.better((&next, &ev), (&best.0, &best.1)) {
                best = (next.clone(), ev);
            }
            current = next;
            if best.1.meets(s.budget) {
                trajectory.push(best.1.energy_j);
            }
        }
    }
    Ok(s.finish(trajectory))
}

/// Samples whole schedules uniformly from the grid until `evaluations` distinct schedules
/// have been evaluated (or the space is exhausted) and returns the best feasible one.
pub fn random_search<S: Scalar>(
    layers: usize,
    table: &CostTable<S>,
    profile: &DeviceProfile<S>,
    evaluations: usize,
    config: &SearchConfig,
    cache: &ProfileCache<S>,
) -> Result<SearchOutcome<S>> {
    if evaluations == 0 {
        return Err(Error::domain("random search needs an evaluation budget >= 1"));
    }
    let mut s = prepare(layers, table, profile, config, cache)?;
    let grid = profile.grid_size() as u32;
    let space = (grid as u128).saturating_pow(layers as u32);
    let target = (evaluations as u128).min(space) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trajectory = Vec::with_capacity(target);
    let mut best: Option<(Vec<u32>, ScheduleEval<S>)> = None;
    let mut key = vec![0u32; layers];
    while s.visited.len() < target {
        for k in key.iter_mut() {
            *k = rng.random_range(0..grid);
        }
        let before = s.visited.len();
        let ev = s.eval(&key);
        if s.visited.len() == before {
            continue;
        }
        if best.as_ref().is_none_or(|(bk, be)| s.better((&key, &ev), (bk, be))) {
            best = Some((key.clone(), ev));
        }
        if let Some((_, be)) = best.as_ref().filter(|b| b.1.meets(s.budget)) {
            trajectory.push(be.energy_j);
        }
    }
    Ok(s.finish(trajectory))
}

/// Exact minimum-energy schedule under the budget by enumeration.
///
/// Ties go to the lower frequency sum, then lexicographic grid order. Refuses instances with
/// more than [`BRUTE_FORCE_LIMIT`] schedules.
pub fn brute_force<S: Scalar>(
    layers: usize,
    table: &CostTable<S>,
    profile: &DeviceProfile<S>,
    latency_budget: Option<S>,
) -> Result<SearchOutcome<S>> {
    profile.validate()?;
    check_layers(table, layers)?;
    let grid = profile.grid_size() as u32;
    let space = (grid as u128).checked_pow(layers as u32).unwrap_or(u128::MAX);
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(space, BRUTE_FORCE_LIMIT));
    }
    let config = SearchConfig {
        latency_budget: latency_budget.map(|b| b.as_f64()),
        objective: if latency_budget.is_some() {
            Objective::EnergyWithBudget
        } else {
            Objective::Energy
        },
        ..SearchConfig::default()
    };
    let cache = ProfileCache::new();
    let mut s = prepare(layers, table, profile, &config, &cache)?;
    s.budget = latency_budget;
    let mut key = vec![0u32; layers];
    let mut best: Option<(Vec<u32>, ScheduleEval<S>)> = None;
    let mut count = 0;
    loop {
        let ev = eval_pairs(&s.decode(&key), table, profile);
        count += 1;
        if ev.meets(s.budget) && best.as_ref().is_none_or(|(bk, be)| s.better((&key, &ev), (bk, be))) {
            best = Some((key.clone(), ev));
        }
        // Odometer increment, last layer fastest.
        let mut i = layers;
        loop {
            if i == 0 {
                let (key, eval) = best.expect("all-max schedule is feasible");
                return Ok(SearchOutcome {
                    schedule: Schedule { pairs: s.decode(&key) },
                    eval,
                    evaluations: count,
                    trajectory: vec![eval.energy_j],
                    latency_budget,
                });
            }
            i -= 1;
            key[i] += 1;
            if key[i] < grid {
                break;
            }
            key[i] = 0;
        }
    }
}
