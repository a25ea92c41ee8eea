//! Early-exit numeric core.
//!
//! Per-frame features are folded by a two-layer LSTM into accumulated features `z_t`.
//! An attention score `τ_t = (W1 z_{t-1}) · tanh(W2 z_t)` is softmax-normalised over the
//! window into `β`. Each of the `E` exits owns a gate MLP over `[z_{t-1}, z_t, β_t]` and a
//! linear classifier over `z_t`; frame `t` is served by exit `⌈E·t/T⌉`. An auxiliary head
//! classifies the β-weighted window feature so the attention weights receive a training
//! signal of their own.

mod features;
mod forward;
mod gradcheck;
pub(crate) mod layers;
mod train;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, softmax, Scalar};
use layers::{DenseSpec, LstmSpec, MlpSpec};

pub use features::{class_prototypes, synth_features, window_features};
pub use forward::{LossBreakdown, WindowForward};
pub use gradcheck::{grad_check, grad_check_heads, GradCheckReport};
pub use train::{evaluate, train, EpochStats, EvalStats, TrainOutcome, WindowEval};

/// Version tag written into checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

/// What the gate's binary cross-entropy is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateTarget {
    /// 1 when the classifier serving that frame predicts the window label.
    #[default]
    ExitSafe,
    /// The class label itself read as a binary target (`y != 0`).
    RawLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitNetConfig {
    pub feature_dim: usize,
    pub num_exits: usize,
    pub window_length: usize,
    pub num_classes: usize,
    pub gate_hidden: Vec<usize>,
    /// Hidden widths of the auxiliary attention classifier.
    pub attention_hidden: Vec<usize>,
    pub gate_threshold: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Per-dimension noise of synthetic features at complexity 1.
    pub feature_noise: f64,
    /// Seed of the class prototypes shared by every synthetic feature draw.
    #[serde(default)]
    pub feature_seed: u64,
    #[serde(default)]
    pub gate_target: GateTarget,
}

impl Default for ExitNetConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            num_exits: 5,
            window_length: 20,
            num_classes: 4,
            gate_hidden: vec![64, 32],
            attention_hidden: vec![64, 32],
            gate_threshold: 0.5,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            feature_noise: 1.5,
            feature_seed: 0,
            gate_target: GateTarget::ExitSafe,
        }
    }
}

impl ExitNetConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("feature_dim", self.feature_dim),
            ("num_exits", self.num_exits),
            ("window_length", self.window_length),
            ("num_classes", self.num_classes),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.feature_dim.is_multiple_of(2) {
            return Err(Error::Config("feature_dim must be even".into()));
        }
        if self.gate_hidden.iter().chain(&self.attention_hidden).any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "gate_threshold {} outside (0, 1]",
                self.gate_threshold
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(Error::Config("feature_noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exit that serves frame `t` (1-based) of a `window_length`-frame window: `⌈E·t/T⌉`.
pub fn exit_for_frame(t: usize, window_length: usize, num_exits: usize) -> usize {
    let e = (num_exits * t).div_ceil(window_length.max(1));
    e.clamp(1, num_exits)
}

/// Where a window left the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitPoint {
    /// 1-based exit index.
    Exit(usize),
    /// No gate fired; the whole network ran.
    Full,
}

impl ExitPoint {
    pub fn index(&self) -> Option<usize> {
        match self {
            ExitPoint::Exit(e) => Some(*e),
            ExitPoint::Full => None,
        }
    }
}

impl std::fmt::Display for ExitPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExitPoint::Exit(e) => write!(f, "{e}"),
            ExitPoint::Full => f.write_str("FULL"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exit: ExitPoint,
    /// 1-based frame at which the gate fired; `None` iff `exit` is `Full`.
    pub fired_at_frame: Option<usize>,
    /// Probability of the firing gate, or of the last frame's gate when none fired.
    pub gate_probability: f64,
}

/// Offsets of every parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub lstm: [LstmSpec; 2],
    /// `W1` then `W2`, each `d × d`.
    pub attention_off: usize,
    pub gates: Vec<MlpSpec>,
    pub heads: Vec<DenseSpec>,
    pub aux: MlpSpec,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ExitNetConfig) -> Self {
        let d = cfg.feature_dim;
        let mut off = 0;
        let l1 = LstmSpec { off, n_in: d, n_h: d };
        off += l1.len();
        let l2 = LstmSpec { off, n_in: d, n_h: d };
        off += l2.len();
        let attention_off = off;
        off += 2 * d * d;
        let gates = (0..cfg.num_exits)
            .map(|_| MlpSpec::new(&mut off, 2 * d + 1, &cfg.gate_hidden, 1))
            .collect();
        let heads = (0..cfg.num_exits)
            .map(|_| {
                let spec = DenseSpec {
                    off,
                    n_in: d,
                    n_out: cfg.num_classes,
                };
                off += spec.len();
                spec
            })
            .collect();
        let aux = MlpSpec::new(&mut off, d, &cfg.attention_hidden, cfg.num_classes);
        Self {
            lstm: [l1, l2],
            attention_off,
            gates,
            heads,
            aux,
            total: off,
        }
    }

    pub fn w1(&self, d: usize) -> std::ops::Range<usize> {
        self.attention_off..self.attention_off + d * d
    }

    pub fn w2(&self, d: usize) -> std::ops::Range<usize> {
        self.attention_off + d * d..self.attention_off + 2 * d * d
    }
}

/// Recurrent state of the two-layer aggregator after some frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState<S> {
    pub h1: Vec<S>,
    pub c1: Vec<S>,
    pub h2: Vec<S>,
    pub c2: Vec<S>,
}

impl<S: Scalar> AggregatorState<S> {
    pub fn zeros(d: usize) -> Self {
        Self {
            h1: vec![S::zero(); d],
            c1: vec![S::zero(); d],
            h2: vec![S::zero(); d],
            c2: vec![S::zero(); d],
        }
    }

    /// The accumulated feature `z_t`.
    pub fn output(&self) -> &[S] {
        &self.h2
    }
}

/// Aggregator, attention, gates, classifiers and auxiliary head over one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitNetModel<S: Scalar> {
    config: ExitNetConfig,
    layout: Layout,
    params: Vec<S>,
}

impl<S: Scalar> ExitNetModel<S> {
    /// Seeded initialization, uniform in `±1/√fan_in` per tensor.
    pub fn new(config: ExitNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![S::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for l in &layout.lstm {
            l.init(&mut params, &mut rng);
        }
        let d = config.feature_dim;
        layers::uniform_fill(&mut params[layout.attention_off..layout.attention_off + 2 * d * d], d, &mut rng);
        for g in &layout.gates {
            g.init(&mut params, &mut rng);
        }
        for h in &layout.heads {
            h.init(&mut params, &mut rng);
        }
        layout.aux.init(&mut params, &mut rng);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// All parameters set to zero.
    pub fn zeros(config: ExitNetConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        m.params.iter_mut().for_each(|p| *p = S::zero());
        Ok(m)
    }

    pub fn from_params(config: ExitNetConfig, params: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::domain(format!(
                "parameter count {} does not match the {} required by the config",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::domain("parameters must be finite"));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ExitNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_exits(&self) -> usize {
        self.config.num_exits
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same model with another gate threshold.
    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.config.gate_threshold = threshold;
        self.config.validate()?;
        Ok(self)
    }

    /// Mutable view of the final bias of gate `exit` (1-based).
    pub fn gate_output_bias_mut(&mut self, exit: usize) -> Result<&mut S> {
        self.check_exit(exit)?;
        let last = *self.layout.gates[exit - 1].layers.last().expect("gate has layers");
        Ok(&mut self.params[last.off + last.n_in])
    }

    fn check_exit(&self, exit: usize) -> Result<()> {
        if exit == 0 || exit > self.config.num_exits {
            return Err(Error::domain(format!(
                "exit index {exit} outside 1..={}",
                self.config.num_exits
            )));
        }
        Ok(())
    }

    fn check_dim(&self, v: &[S], what: &str) -> Result<()> {
        if v.len() != self.config.feature_dim {
            return Err(Error::domain(format!(
                "{what} has length {}, expected {}",
                v.len(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    /// One aggregator step: folds the frame feature `phi` into `state`.
    pub fn accumulate(&self, state: &AggregatorState<S>, phi: &[S]) -> Result<AggregatorState<S>> {
        self.check_dim(phi, "frame feature")?;
        for v in [&state.h1, &state.c1, &state.h2, &state.c2] {
            self.check_dim(v, "aggregator state")?;
        }
        let [l1, l2] = &self.layout.lstm;
        let s1 = l1.step(&self.params, phi, &state.h1, &state.c1);
        let s2 = l2.step(&self.params, &s1.h, &state.h2, &state.c2);
        Ok(AggregatorState {
            h1: s1.h,
            c1: s1.c,
            h2: s2.h,
            c2: s2.c,
        })
    }

    /// Runs the aggregator over a sequence and returns `z_1..z_T`.
    pub fn accumulate_sequence(&self, phis: &[Vec<S>]) -> Result<Vec<Vec<S>>> {
        let mut state = AggregatorState::zeros(self.config.feature_dim);
        let mut out = Vec::with_capacity(phis.len());
        for phi in phis {
            state = self.accumulate(&state, phi)?;
            out.push(state.output().to_vec());
        }
        Ok(out)
    }

    /// Raw scores `τ` and attention weights `β = softmax(τ)`, with `z_0 = 0`.
    pub fn attention_scores(&self, z_window: &[Vec<S>]) -> Result<(Vec<S>, Vec<S>)> {
        if z_window.is_empty() {
            return Err(Error::domain("attention needs a non-empty window"));
        }
        for z in z_window {
            self.check_dim(z, "accumulated feature")?;
        }
        let d = self.config.feature_dim;
        let zero = vec![S::zero(); d];
        let tau: Vec<S> = (0..z_window.len())
            .map(|t| {
                let prev = if t == 0 { &zero } else { &z_window[t - 1] };
                forward::attention_score(&self.params, &self.layout, d, prev, &z_window[t]).0
            })
            .collect();
        let beta = softmax(&tau);
        Ok((tau, beta))
    }

    /// Exit probability of gate `exit` (1-based) for inputs `[z_prev, z_t, β_t]`.
    pub fn gate_forward(&self, z_prev: &[S], z_t: &[S], beta_t: S, exit: usize) -> Result<S> {
        self.check_exit(exit)?;
        self.check_dim(z_prev, "z_prev")?;
        self.check_dim(z_t, "z_t")?;
        let input = forward::gate_input(z_prev, z_t, beta_t);
        let out = self.layout.gates[exit - 1].forward(&self.params, &input).output[0];
        Ok(crate::scalar::sigmoid(out))
    }

    /// Logits of the classifier at `exit` (1-based).
    pub fn classify(&self, z_t: &[S], exit: usize) -> Result<Vec<S>> {
        self.check_exit(exit)?;
        self.check_dim(z_t, "z_t")?;
        Ok(self.layout.heads[exit - 1].forward(&self.params, z_t))
    }

    /// Full forward pass over one window of frame features (no label needed).
    pub fn forward_window(&self, phis: &[Vec<S>]) -> Result<WindowForward<S>> {
        if phis.is_empty() {
            return Err(Error::domain("window must contain at least one frame"));
        }
        for phi in phis {
            self.check_dim(phi, "frame feature")?;
        }
        Ok(forward::forward(self, phis))
    }

    /// First frame whose gate probability reaches the threshold (ties fire).
    pub fn earliest_exit(&self, phis: &[Vec<S>]) -> Result<ExitDecision> {
        let fwd = self.forward_window(phis)?;
        Ok(fwd.decision(S::lit(self.config.gate_threshold)))
    }

    /// Predicted class for a window given its exit decision; `Full` uses the deepest head on `z_T`.
    pub fn predict(&self, fwd: &WindowForward<S>, decision: &ExitDecision) -> usize {
        match decision.fired_at_frame {
            Some(t) => argmax(&fwd.logits[t - 1]),
            None => {
                let z_last = fwd.z.last().expect("non-empty window");
                let logits = self.layout.heads[self.config.num_exits - 1].forward(&self.params, z_last);
                argmax(&logits)
            }
        }
    }

    /// Mean losses over a batch of `(frame features, label)` windows.
    pub fn loss_total(&self, batch: &[(Vec<Vec<S>>, usize)]) -> Result<LossBreakdown<S>> {
        if batch.is_empty() {
            return Err(Error::domain("loss needs a non-empty batch"));
        }
        let mut acc = LossBreakdown::zero();
        for (phis, y) in batch {
            if *y >= self.config.num_classes {
                return Err(Error::domain(format!("label {y} >= class count")));
            }
            let fwd = self.forward_window(phis)?;
            acc.add(&fwd.loss(self, *y, None));
        }
        Ok(acc.scaled(S::one() / S::lit(batch.len() as f64)))
    }

    /// Loss and flat gradient for one window.
    pub fn loss_and_grad(&self, phis: &[Vec<S>], y: usize) -> Result<(LossBreakdown<S>, Vec<S>)> {
        let fwd = self.forward_window(phis)?;
        let mut grad = vec![S::zero(); self.params.len()];
        let loss = forward::backward(self, &fwd, y, None, &mut grad);
        Ok((loss, grad))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint<S> = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Self::from_params(ck.config, ck.params)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
struct Checkpoint<S: Scalar> {
    version: u32,
    config: ExitNetConfig,
    params: Vec<S>,
}

#[cfg(test)]
mod tests;
