use super::*;
use crate::tracegen::{generate_trace, ComplexityDistribution, Frame, TraceGenConfig};

fn toy_config() -> ExitNetConfig {
    ExitNetConfig {
        feature_dim: 8,
        num_exits: 2,
        window_length: 4,
        num_classes: 4,
        gate_hidden: vec![6, 4],
        attention_hidden: vec![6],
        seed: 3,
        ..ExitNetConfig::default()
    }
}

fn random_phis(d: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn exit_map_covers_every_exit_in_order() {
    let exits: Vec<usize> = (1..=20).map(|t| exit_for_frame(t, 20, 5)).collect();
    assert_eq!(exits[0], 1);
    assert_eq!(exits[3], 1);
    assert_eq!(exits[4], 2);
    assert_eq!(exits[19], 5);
    assert!(exits.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(exit_for_frame(1, 4, 2), 1);
    assert_eq!(exit_for_frame(3, 4, 2), 2);
}

#[test]
fn zero_model_outputs() {
    let m = ExitNetModel::<f64>::zeros(toy_config()).unwrap();
    let state = m.accumulate(&AggregatorState::zeros(8), &[1.0; 8]).unwrap();
    assert!(state.output().iter().all(|&v| v == 0.0));
    assert_eq!(m.gate_forward(&[0.3; 8], &[0.1; 8], 0.2, 1).unwrap(), 0.5);
    assert!(m.classify(&[0.7; 8], 2).unwrap().iter().all(|&v| v == 0.0));

    let (tau, beta) = m.attention_scores(&[vec![0.5; 8], vec![0.1; 8], vec![-0.2; 8]]).unwrap();
    assert_eq!(tau, vec![0.0; 3]);
    for b in beta {
        assert!((b - 1.0 / 3.0).abs() < 1e-15);
    }

    let batch = vec![(random_phis(8, 4, 1), 2)];
    let loss = m.loss_total(&batch).unwrap();
    let ln4 = 4f64.ln();
    assert!((loss.cls - ln4).abs() < 1e-12);
    assert!((loss.gate - 2f64.ln()).abs() < 1e-12);
    assert!((loss.att - ln4).abs() < 1e-12);
    assert_eq!(loss.total, loss.cls + loss.gate + loss.att);
}

#[test]
fn index_and_shape_errors() {
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    assert!(m.classify(&[0.0; 8], 0).is_err());
    assert!(m.classify(&[0.0; 8], 3).is_err());
    assert!(m.gate_forward(&[0.0; 8], &[0.0; 8], 0.5, 3).is_err());
    assert!(m.classify(&[0.0; 7], 1).is_err());
    assert!(m.accumulate(&AggregatorState::zeros(8), &[0.0; 9]).is_err());
    assert!(m.attention_scores(&[]).is_err());
    assert!(m.loss_total(&[]).is_err());
    assert!(m.forward_window(&[]).is_err());
}

#[test]
fn config_validation() {
    let mut c = toy_config();
    c.gate_threshold = 0.0;
    assert!(c.validate().is_err());
    c.gate_threshold = 1.0;
    assert!(c.validate().is_ok());
    c.feature_dim = 7;
    assert!(c.validate().is_err());
    c.feature_dim = 8;
    c.num_exits = 0;
    assert!(c.validate().is_err());
}

#[test]
fn single_frame_attention_is_one() {
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    let (_, beta) = m.attention_scores(&[vec![0.4; 8]]).unwrap();
    assert_eq!(beta, vec![1.0]);
}

#[test]
fn attention_closed_form_softmax() {
    let beta = crate::scalar::softmax(&[2f64.ln(), 0.0]);
    assert!((beta[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((beta[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn large_bias_saturates_gate() {
    let mut m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    *m.gate_output_bias_mut(2).unwrap() = 1e3;
    let p = m.gate_forward(&[0.2; 8], &[-0.1; 8], 0.3, 2).unwrap();
    assert!((1.0 - p).abs() < 1e-6);
}

#[test]
fn decision_fires_at_first_reaching_frame() {
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    let mut fwd = m.forward_window(&random_phis(8, 4, 9)).unwrap();
    fwd.gate_probs = vec![0.1, 0.49, 0.9, 0.95];
    let d = fwd.decision(0.5);
    assert_eq!(d.fired_at_frame, Some(3));
    assert_eq!(d.exit, ExitPoint::Exit(2));

    fwd.gate_probs = vec![0.5, 0.2, 0.2, 0.2];
    let d = fwd.decision(0.5);
    assert_eq!(d.fired_at_frame, Some(1), "ties at the threshold fire");
    assert_eq!(d.exit, ExitPoint::Exit(1));

    fwd.gate_probs = vec![0.1; 4];
    let d = fwd.decision(0.5);
    assert_eq!(d.exit, ExitPoint::Full);
    assert_eq!(d.fired_at_frame, None);
    assert_eq!(ExitPoint::Full.to_string(), "FULL");
}

#[test]
fn saturated_gates_exit_first_frame() {
    let mut m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    for e in 1..=2 {
        *m.gate_output_bias_mut(e).unwrap() = 50.0;
    }
    let d = m.earliest_exit(&random_phis(8, 4, 2)).unwrap();
    assert_eq!(d.fired_at_frame, Some(1));
    for e in 1..=2 {
        *m.gate_output_bias_mut(e).unwrap() = -50.0;
    }
    assert_eq!(m.earliest_exit(&random_phis(8, 4, 2)).unwrap().exit, ExitPoint::Full);
}

#[test]
fn aggregator_is_order_sensitive() {
    let mut differ = 0;
    for seed in 0..100 {
        let m = ExitNetModel::<f64>::new(ExitNetConfig { seed, ..toy_config() }).unwrap();
        let ab = random_phis(8, 2, 1000 + seed);
        let ba = vec![ab[1].clone(), ab[0].clone()];
        let z_ab = m.accumulate_sequence(&ab).unwrap();
        let z_ba = m.accumulate_sequence(&ba).unwrap();
        if z_ab.last() != z_ba.last() {
            differ += 1;
        }
    }
    assert!(differ >= 99, "{differ}");
}

#[test]
fn seeded_init_is_reproducible() {
    let a = ExitNetModel::<f64>::new(toy_config()).unwrap();
    let b = ExitNetModel::<f64>::new(toy_config()).unwrap();
    assert_eq!(a.params(), b.params());
    let c = ExitNetModel::<f64>::new(ExitNetConfig { seed: 4, ..toy_config() }).unwrap();
    assert_ne!(a.params(), c.params());
    let phis = random_phis(8, 4, 5);
    assert_eq!(a.accumulate_sequence(&phis).unwrap(), b.accumulate_sequence(&phis).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    m.save(&path).unwrap();
    assert_eq!(ExitNetModel::<f64>::load(&path).unwrap(), m);

    let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":9");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(ExitNetModel::<f64>::load(&path), Err(Error::Config(_))));
}

#[test]
fn from_params_checks_length_and_finiteness() {
    let n = ExitNetModel::<f64>::new(toy_config()).unwrap().num_params();
    assert!(ExitNetModel::<f64>::from_params(toy_config(), vec![0.0; n - 1]).is_err());
    let mut p = vec![0.0; n];
    p[0] = f64::NAN;
    assert!(ExitNetModel::<f64>::from_params(toy_config(), p).is_err());
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    let sample = (random_phis(8, 4, 11), 1);
    let rep = grad_check(&m, &sample, 1e-5).unwrap();
    assert!(rep.coords_checked >= 200);
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn raw_label_gradient_matches_too() {
    let cfg = ExitNetConfig {
        gate_target: GateTarget::RawLabel,
        ..toy_config()
    };
    let m = ExitNetModel::<f64>::new(cfg).unwrap();
    let rep = grad_check(&m, &(random_phis(8, 4, 12), 2), 1e-5).unwrap();
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn head_gradient_is_exact() {
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    let z = random_phis(8, 1, 13).remove(0);
    let rep = grad_check_heads(&m, &z, 1, 1e-5).unwrap();
    assert!(rep.max_rel_error <= 1e-8, "{rep:?}");
}

#[test]
fn grad_check_rejects_bad_epsilon() {
    let m = ExitNetModel::<f64>::new(toy_config()).unwrap();
    let sample = (random_phis(8, 4, 1), 0);
    assert!(grad_check(&m, &sample, 0.0).is_err());
    assert!(grad_check(&m, &sample, f64::NAN).is_err());
    assert!(grad_check_heads(&m, &sample.0[0], 0, -1.0).is_err());
}

#[test]
fn f32_model_runs() {
    let m = ExitNetModel::<f32>::new(toy_config()).unwrap();
    let phis: Vec<Vec<f32>> = random_phis(8, 4, 3)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect();
    let (loss, grad) = m.loss_and_grad(&phis, 1).unwrap();
    assert!(loss.total.is_finite() && loss.total > 0.0);
    assert_eq!(grad.len(), m.num_params());
}

#[test]
fn synthetic_features_layout() {
    let cfg = ExitNetConfig {
        feature_dim: 8,
        ..ExitNetConfig::default()
    };
    let protos = class_prototypes(4, 4, cfg.feature_seed);
    let frame = Frame {
        frame_id: 17,
        complexity: 0.0,
        label: 2,
    };
    let phi: Vec<f64> = synth_features(&frame, &cfg, 5);
    assert_eq!(&phi[..4], &protos[2][..]);
    assert!(phi[4..].iter().all(|&v| v == 0.0));
    assert_eq!(phi, synth_features::<f64>(&frame, &cfg, 5));

    let noisy = Frame { complexity: 0.6, ..frame };
    let a: Vec<f64> = synth_features(&noisy, &cfg, 5);
    let b: Vec<f64> = synth_features(&noisy, &cfg, 6);
    assert_ne!(a, b);
    assert!(a[4..].iter().all(|&v| v == 0.6));
}

/// Least-squares one-vs-rest probe: solve `(XᵀX + λI) W = XᵀY` by Gaussian elimination.
fn fit_probe(x: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let n = x[0].len() + 1;
    let mut a = vec![vec![0.0; n + k]; n];
    for (row, &y) in x.iter().zip(labels) {
        let mut r = row.clone();
        r.push(1.0);
        for i in 0..n {
            for j in 0..n {
                a[i][j] += r[i] * r[j];
            }
            a[i][n + y] += r[i];
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1e-6;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                let pivot_row = a[col].clone();
                for (v, p) in a[r].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    (0..k).map(|c| (0..n).map(|i| a[i][n + c] / a[i][i]).collect()).collect()
}

#[test]
fn linear_probe_recovers_low_complexity_labels() {
    let cfg = ExitNetConfig {
        feature_dim: 16,
        ..ExitNetConfig::default()
    };
    let trace = generate_trace(&TraceGenConfig {
        num_windows: 400,
        num_classes: 4,
        window_length: 20,
        complexity: ComplexityDistribution::Uniform,
        seed: 21,
    })
    .unwrap();
    let frames: Vec<&Frame> = trace.frames.iter().filter(|f| f.complexity < 0.2).take(2000).collect();
    assert!(frames.len() >= 1000);
    let (train_f, test_f) = frames.split_at(1000);
    let feats = |fs: &[&Frame]| -> Vec<Vec<f64>> { fs.iter().map(|f| synth_features(f, &cfg, 1)).collect() };
    let w = fit_probe(&feats(train_f), &train_f.iter().map(|f| f.label).collect::<Vec<_>>(), 4);
    let test = if test_f.is_empty() { train_f } else { test_f };
    let correct = feats(test)
        .iter()
        .zip(test)
        .filter(|(x, f)| {
            let scores: Vec<f64> = w
                .iter()
                .map(|wc| x.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>() + wc[x.len()])
                .collect();
            argmax(&scores) == f.label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn zero_epochs_returns_initialization() {
    let trace = generate_trace(&TraceGenConfig {
        num_windows: 8,
        num_classes: 4,
        window_length: 4,
        complexity: ComplexityDistribution::Uniform,
        seed: 1,
    })
    .unwrap();
    let cfg = ExitNetConfig { epochs: 0, ..toy_config() };
    let out = train::<f64>(&trace, &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.model, ExitNetModel::new(cfg).unwrap());
}

#[test]
fn short_training_is_deterministic_and_reduces_loss() {
    let trace = generate_trace(&TraceGenConfig {
        num_windows: 64,
        num_classes: 4,
        window_length: 4,
        complexity: ComplexityDistribution::Uniform,
        seed: 2,
    })
    .unwrap();
    let cfg = ExitNetConfig {
        epochs: 15,
        learning_rate: 3e-3,
        batch_size: 16,
        ..toy_config()
    };
    let a = train::<f64>(&trace, &cfg).unwrap();
    let b = train::<f64>(&trace, &cfg).unwrap();
    assert_eq!(a.model.params(), b.model.params());
    let first = a.history.first().unwrap().loss.total;
    let last = a.history.last().unwrap().loss.total;
    assert!(last < first, "{first} -> {last}");

    let eval = evaluate(&a.model, &trace, 99).unwrap();
    assert_eq!(eval.exit_histogram.iter().sum::<usize>(), 64);
    assert_eq!(eval.windows.len(), 64);
}
