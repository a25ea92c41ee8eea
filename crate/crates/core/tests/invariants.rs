use std::path::Path;

use proptest::prelude::*;

use exitdvfs::devmodel::{device_power, layer_energy, layer_latency, CostTable, DeviceProfile, FreqRange, LayerCost};
use exitdvfs::exitnet::{exit_for_frame, ExitNetConfig, ExitNetModel, ExitPoint};
use exitdvfs::profiler::{
    cds_search, evaluate_schedule, Objective, ProfileCache, Schedule, SearchConfig,
};
use exitdvfs::simengine::{simulate, GovernorPolicy, Policy};
use exitdvfs::tracegen::{generate_trace, ComplexityDistribution, FrameTrace, TraceGenConfig};
use exitdvfs::FrequencyPair;

fn xavier() -> DeviceProfile<f64> {
    DeviceProfile::builtin("jetson-xavier-nx").unwrap()
}

fn small_profile(overhead: f64) -> DeviceProfile<f64> {
    DeviceProfile {
        name: "small".into(),
        cpu_range: FreqRange::new(0.3, 0.8),
        gpu_range: FreqRange::new(0.2, 0.6),
        grid_step: 0.1,
        static_power: 1.5,
        cpu_power_coeff: 3.0,
        gpu_power_coeff: 6.0,
        switch_overhead: overhead,
        power_cap: 1e6,
    }
}

fn table_from(works: &[(f64, f64)]) -> CostTable<f64> {
    let n = works.len();
    CostTable {
        name: "prop".into(),
        layers: works
            .iter()
            .enumerate()
            .map(|(i, &(c, g))| LayerCost {
                layer_index: i + 1,
                cpu_work: c,
                gpu_work: g,
            })
            .collect(),
        exit_layers: vec![n],
    }
}

fn works(max_layers: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..3.0f64, 0.01..3.0f64), 1..=max_layers)
}

/// A schedule on `profile`'s grid of the given length, as flat grid indices.
fn schedule_on(profile: &DeviceProfile<f64>, flats: &[usize]) -> Schedule<f64> {
    let g = profile.grid_size();
    Schedule {
        pairs: flats.iter().map(|&f| profile.pair_at_flat(f % g)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn attention_weights_sum_to_one(seed in 0u64..1000, t in 1usize..12, scale in 0.01..20.0f64) {
        let cfg = ExitNetConfig { feature_dim: 6, window_length: t, gate_hidden: vec![4], attention_hidden: vec![4], seed, ..ExitNetConfig::default() };
        let model = ExitNetModel::<f64>::new(cfg).unwrap();
        let phis: Vec<Vec<f64>> = (0..t)
            .map(|i| (0..6).map(|j| scale * (((seed as usize + i * 7 + j * 13) % 17) as f64 - 8.0)).collect())
            .collect();
        let z = model.accumulate_sequence(&phis).unwrap();
        let (_, beta) = model.attention_scores(&z).unwrap();
        prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(beta.iter().all(|&b| (0.0..=1.0).contains(&b)));
    }

    #[test]
    fn exit_map_is_monotone_and_covers_all_exits(t_len in 1usize..60, e in 1usize..8) {
        let exits: Vec<usize> = (1..=t_len).map(|t| exit_for_frame(t, t_len, e)).collect();
        prop_assert!(exits.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(exits.iter().all(|&x| (1..=e).contains(&x)));
        prop_assert_eq!(*exits.last().unwrap(), e);
    }

    #[test]
    fn power_is_monotone_and_capped(ci in 0usize..19, gi in 0usize..11) {
        let p = xavier();
        let (ci, gi) = (ci.min(p.cpu_levels() - 1), gi.min(p.gpu_levels() - 1));
        let here = device_power(&p, &p.pair_at(ci, gi)).unwrap();
        prop_assert!(here <= p.power_cap);
        if ci + 1 < p.cpu_levels() {
            prop_assert!(device_power(&p, &p.pair_at(ci + 1, gi)).unwrap() >= here);
        }
        if gi + 1 < p.gpu_levels() {
            prop_assert!(device_power(&p, &p.pair_at(ci, gi + 1)).unwrap() >= here);
        }
    }

    #[test]
    fn schedule_energy_is_sum_of_layer_energies(w in works(8), flats in prop::collection::vec(0usize..1000, 8)) {
        let profile = small_profile(0.7);
        let table = table_from(&w);
        let sched = schedule_on(&profile, &flats[..w.len()]);
        let eval = evaluate_schedule(&sched, &table, &profile).unwrap();
        let mut energy = 0.0;
        let mut latency = 0.0;
        for (l, fp) in table.layers.iter().zip(&sched.pairs) {
            energy += layer_energy(&profile, l, fp).unwrap();
            latency += layer_latency(&profile, l, fp).unwrap();
        }
        latency += 0.7 * sched.switches() as f64;
        prop_assert!((eval.energy_j - energy).abs() <= 1e-12 * energy.max(1.0));
        prop_assert!((eval.latency_ms - latency).abs() <= 1e-12 * latency.max(1.0));
    }

    #[test]
    fn schedule_csv_round_trips(flats in prop::collection::vec(0usize..1000, 1..20)) {
        let profile = xavier();
        let sched = schedule_on(&profile, &flats);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        sched.save_csv(&path).unwrap();
        let back = Schedule::<f64>::load_csv(&path).unwrap();
        prop_assert_eq!(back.len(), sched.len());
        for (a, b) in back.pairs.iter().zip(&sched.pairs) {
            prop_assert!((a.cpu - b.cpu).abs() < 1e-9 && (a.gpu - b.gpu).abs() < 1e-9);
            prop_assert!(profile.check(a).is_ok());
        }
    }

    #[test]
    fn trace_text_round_trips(windows in 0usize..20, t in 1usize..10, k in 1usize..6, seed in 0u64..500) {
        let trace = generate_trace(&TraceGenConfig { num_windows: windows, num_classes: k, window_length: t, complexity: ComplexityDistribution::bimodal(0.4, 0.2, 0.8), seed }).unwrap();
        let back = FrameTrace::from_text(&trace.to_text(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, trace);
    }

    #[test]
    fn cost_table_csv_round_trips(w in works(12)) {
        let table = table_from(&w);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        table.save_csv(&path).unwrap();
        let back = CostTable::<f64>::load_csv(&path).unwrap();
        prop_assert_eq!(back.exit_layers, table.exit_layers);
        for (a, b) in back.layers.iter().zip(&table.layers) {
            prop_assert_eq!(a.layer_index, b.layer_index);
            prop_assert!((a.cpu_work - b.cpu_work).abs() <= 1e-12 * b.cpu_work.max(1.0));
            prop_assert!((a.gpu_work - b.gpu_work).abs() <= 1e-12 * b.gpu_work.max(1.0));
        }
    }

    #[test]
    fn cds_respects_budget_and_eval_bound(w in works(6), seed in 0u64..1000, slack in 1.0..2.0f64) {
        let profile = small_profile(0.2);
        let table = table_from(&w);
        let n = w.len();
        let all_max = evaluate_schedule(&Schedule::uniform(profile.max_pair(), n), &table, &profile).unwrap();
        let budget = all_max.latency_ms * slack;
        let cfg = SearchConfig { seed, latency_budget: Some(budget), objective: Objective::EnergyWithBudget, ..SearchConfig::default() };
        let out = cds_search(n, &table, &profile, &cfg, &ProfileCache::new()).unwrap();
        prop_assert!(out.eval.latency_ms <= budget);
        prop_assert!(out.eval.energy_j <= all_max.energy_j);
        prop_assert!(out.evaluations <= cfg.cds_evaluations(n) + 1);
        let again = evaluate_schedule(&out.schedule, &table, &profile).unwrap();
        prop_assert_eq!(again, out.eval);
    }

    #[test]
    fn shared_cache_does_not_change_results(w in works(5), seed in 0u64..1000) {
        let profile = small_profile(0.3);
        let table = table_from(&w);
        let n = w.len();
        let cfg = SearchConfig { seed, objective: Objective::Energy, ..SearchConfig::default() };
        let shared = ProfileCache::new();
        let warm = cds_search(n, &table, &profile, &SearchConfig { seed: seed + 1, ..cfg.clone() }, &shared).unwrap();
        let with_shared = cds_search(n, &table, &profile, &cfg, &shared).unwrap();
        let fresh = cds_search(n, &table, &profile, &cfg, &ProfileCache::new()).unwrap();
        prop_assert_eq!(&with_shared.schedule, &fresh.schedule);
        prop_assert_eq!(with_shared.eval, fresh.eval);
        prop_assert!(shared.len() >= warm.evaluations.max(fresh.evaluations));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn report_totals_are_conserved(seed in 0u64..200, windows in 1usize..30, policy_idx in 0usize..6) {
        let policy = Policy::ALL[policy_idx];
        let trace = generate_trace(&TraceGenConfig { num_windows: windows, window_length: 8, seed, ..TraceGenConfig::default() }).unwrap();
        let table = CostTable::<f64>::efficientnet_b0();
        let profile = xavier();
        let model = ExitNetModel::<f64>::new(ExitNetConfig { feature_dim: 8, window_length: 8, gate_hidden: vec![8], attention_hidden: vec![8], seed, ..ExitNetConfig::default() }).unwrap();
        let gp = GovernorPolicy { search: SearchConfig { rounds: 1, candidates: 4, ..SearchConfig::default() }, ..GovernorPolicy::new(policy) };
        let r = simulate(&trace, &profile, &table, Some(&model), &gp, seed).unwrap();
        let energy: f64 = r.records.iter().map(|w| w.energy_j).sum();
        prop_assert!((r.total_energy_j - energy).abs() <= 1e-9 * energy);
        prop_assert_eq!(r.exit_histogram.iter().sum::<usize>(), windows);
        prop_assert_eq!(r.records.len(), windows);
        for rec in &r.records {
            prop_assert!(rec.layers >= 1 && rec.layers <= table.depth());
            if let ExitPoint::Exit(e) = rec.exit {
                prop_assert_eq!(rec.layers, table.exit_layers[e - 1]);
            }
        }
        if !policy.uses_early_exit() {
            prop_assert_eq!(r.exit_histogram[table.num_exits()], windows);
        }
        let back = exitdvfs::simengine::SimReport::from_json(&r.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
    }
}

#[test]
fn uniform_schedule_matches_network_latency() {
    let profile = xavier();
    let table = CostTable::<f64>::efficientnet_b0();
    for fp in [profile.max_pair(), profile.min_pair(), FrequencyPair::new(1.0, 0.5)] {
        let eval = evaluate_schedule(&Schedule::uniform(fp, 16), &table, &profile).unwrap();
        let direct = exitdvfs::devmodel::network_latency(&profile, &table, 16, &fp).unwrap();
        assert!((eval.latency_ms - direct).abs() < 1e-12);
    }
}
