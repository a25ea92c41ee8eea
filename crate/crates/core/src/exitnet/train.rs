//! Adam training on synthetic traces and seeded evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::forward::{backward, LossBreakdown};
use super::{exit_for_frame, window_features, ExitDecision, ExitNetConfig, ExitNetModel, ExitPoint};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tracegen::{window_complexity, FrameTrace};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub model: ExitNetModel<S>,
    /// Mean training loss per epoch.
    pub history: Vec<EpochStats>,
}

struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    step: i32,
    lr: S,
}

impl<S: Scalar> Adam<S> {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
            lr: S::lit(lr),
        }
    }

    fn update(&mut self, params: &mut [S], grad: &[S]) {
        self.step += 1;
        let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
        let c1 = S::one() - b1.powi(self.step);
        let c2 = S::one() - b2.powi(self.step);
        let eps = S::lit(ADAM_EPS);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Trains a fresh model on every complete window of `trace`.
///
/// The trace's window length and class count override the config's. Per-window gradients
/// are computed in parallel and reduced in window order, so the result is bit-identical
/// for a fixed seed regardless of thread count.
pub fn train<S: Scalar>(trace: &FrameTrace, config: &ExitNetConfig) -> Result<TrainOutcome<S>> {
    trace.validate()?;
    if trace.is_empty() {
        return Err(Error::domain("training trace has no complete window"));
    }
    let config = ExitNetConfig {
        window_length: trace.window_length,
        num_classes: trace.num_classes,
        ..config.clone()
    };
    let mut model = ExitNetModel::<S>::new(config.clone())?;
    let data: Vec<(Vec<Vec<S>>, usize)> = trace
        .windows()
        .map(|w| (window_features(w, &config, config.seed), w[0].label))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = Adam::new(model.num_params(), config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::<f64>::zero();
        for batch in order.chunks(config.batch_size) {
            let per_window: Vec<(LossBreakdown<S>, Vec<S>)> = batch
                .par_iter()
                .map(|&i| {
                    let (phis, y) = &data[i];
                    let fwd = super::forward::forward(&model, phis);
                    let mut grad = vec![S::zero(); model.num_params()];
                    let loss = backward(&model, &fwd, *y, None, &mut grad);
                    (loss, grad)
                })
                .collect();
            let inv = S::one() / S::lit(batch.len() as f64);
            let mut grad = vec![S::zero(); model.num_params()];
            for (loss, g) in &per_window {
                for (acc, &v) in grad.iter_mut().zip(g) {
                    *acc += v * inv;
                }
                epoch_loss.add(&LossBreakdown {
                    cls: loss.cls.as_f64(),
                    gate: loss.gate.as_f64(),
                    att: loss.att.as_f64(),
                    total: loss.total.as_f64(),
                });
            }
            let batch_total: f64 = per_window.iter().map(|(l, _)| l.total.as_f64()).sum();
            if !batch_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_total / batch.len() as f64,
                });
            }
            adam.update(model.params_mut(), &grad);
            step += 1;
        }
        history.push(EpochStats {
            epoch,
            loss: epoch_loss.scaled(1.0 / data.len() as f64),
        });
    }
    Ok(TrainOutcome { model, history })
}

/// Outcome of one evaluated window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowEval {
    pub label: usize,
    pub complexity: f64,
    pub decision: ExitDecision,
    pub predicted: usize,
    /// Whether each exit's classifier, read at the last frame it serves, is correct.
    pub exit_correct: Vec<bool>,
    pub gate_probs: Vec<f64>,
}

impl WindowEval {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalStats {
    pub accuracy: f64,
    /// Counts per exit `1..=E`, then FULL.
    pub exit_histogram: Vec<usize>,
    pub windows: Vec<WindowEval>,
}

impl EvalStats {
    /// Fraction of windows matching `filter` that left at exit 1.
    pub fn exit_usage(&self, exit: usize, filter: impl Fn(&WindowEval) -> bool) -> f64 {
        let sel: Vec<&WindowEval> = self.windows.iter().filter(|w| filter(w)).collect();
        if sel.is_empty() {
            return 0.0;
        }
        sel.iter().filter(|w| w.decision.exit == ExitPoint::Exit(exit)).count() as f64 / sel.len() as f64
    }

    /// Accuracy of classifier `exit` (1-based) over windows matching `filter`.
    pub fn exit_accuracy(&self, exit: usize, filter: impl Fn(&WindowEval) -> bool) -> f64 {
        let sel: Vec<&WindowEval> = self.windows.iter().filter(|w| filter(w)).collect();
        if sel.is_empty() {
            return 0.0;
        }
        sel.iter().filter(|w| w.exit_correct[exit - 1]).count() as f64 / sel.len() as f64
    }

    /// Mean gate probability over every frame of the windows matching `filter`.
    pub fn mean_gate_probability(&self, filter: impl Fn(&WindowEval) -> bool) -> f64 {
        let probs: Vec<f64> = self
            .windows
            .iter()
            .filter(|w| filter(w))
            .flat_map(|w| w.gate_probs.iter().copied())
            .collect();
        if probs.is_empty() {
            return 0.0;
        }
        probs.iter().sum::<f64>() / probs.len() as f64
    }
}

/// Runs early-exit inference over every window of `trace` with features drawn from `noise_seed`.
pub fn evaluate<S: Scalar>(model: &ExitNetModel<S>, trace: &FrameTrace, noise_seed: u64) -> Result<EvalStats> {
    trace.validate()?;
    let cfg = model.config();
    let e = cfg.num_exits;
    let threshold = S::lit(cfg.gate_threshold);
    let windows: Vec<WindowEval> = trace
        .windows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|w| {
            let phis: Vec<Vec<S>> = window_features(w, cfg, noise_seed);
            let fwd = model.forward_window(&phis)?;
            let decision = fwd.decision(threshold);
            let predicted = model.predict(&fwd, &decision);
            let label = w[0].label;
            let t_len = phis.len();
            let exit_correct = (1..=e)
                .map(|exit| {
                    let last = (1..=t_len).rev().find(|&t| exit_for_frame(t, t_len, e) == exit);
                    match last {
                        Some(t) => argmax(&fwd.logits[t - 1]) == label,
                        // Exit serves no frame in a window shorter than E: read it on z_T.
                        None => model
                            .classify(fwd.z.last().expect("non-empty"), exit)
                            .map(|l| argmax(&l) == label)
                            .unwrap_or(false),
                    }
                })
                .collect();
            Ok(WindowEval {
                label,
                complexity: window_complexity(w),
                decision,
                predicted,
                exit_correct,
                gate_probs: fwd.gate_probs.iter().map(|p| p.as_f64()).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mut exit_histogram = vec![0; e + 1];
    for w in &windows {
        match w.decision.exit {
            ExitPoint::Exit(i) => exit_histogram[i - 1] += 1,
            ExitPoint::Full => exit_histogram[e] += 1,
        }
    }
    let accuracy = if windows.is_empty() {
        0.0
    } else {
        windows.iter().filter(|w| w.correct()).count() as f64 / windows.len() as f64
    };
    Ok(EvalStats {
        accuracy,
        exit_histogram,
        windows,
    })
}
