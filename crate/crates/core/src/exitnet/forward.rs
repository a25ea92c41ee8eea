//! Window-level forward pass, joint loss and its hand-derived gradient.

use serde::Serialize;

use super::layers::{LstmStep, MlpCache};
use super::{exit_for_frame, ExitDecision, ExitNetModel, ExitPoint, GateTarget, Layout};
use crate::scalar::{argmax, log_sum_exp, sigmoid, softmax, Scalar};

/// Classification, gate and attention losses and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct LossBreakdown<S: Scalar> {
    pub cls: S,
    pub gate: S,
    pub att: S,
    pub total: S,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn zero() -> Self {
        Self {
            cls: S::zero(),
            gate: S::zero(),
            att: S::zero(),
            total: S::zero(),
        }
    }

    fn from_parts(cls: S, gate: S, att: S) -> Self {
        Self {
            cls,
            gate,
            att,
            total: cls + gate + att,
        }
    }

    pub fn add(&mut self, other: &Self) {
        self.cls += other.cls;
        self.gate += other.gate;
        self.att += other.att;
        self.total = self.cls + self.gate + self.att;
    }

    pub fn scaled(&self, k: S) -> Self {
        Self::from_parts(self.cls * k, self.gate * k, self.att * k)
    }
}

/// Everything computed for one window, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WindowForward<S: Scalar> {
    /// `z_1..z_T`.
    pub z: Vec<Vec<S>>,
    pub tau: Vec<S>,
    pub beta: Vec<S>,
    /// Exit (1-based) serving each frame.
    pub exits: Vec<usize>,
    /// Classifier logits per frame from that frame's exit head.
    pub logits: Vec<Vec<S>>,
    /// Gate logits and probabilities per frame.
    pub gate_logits: Vec<S>,
    pub gate_probs: Vec<S>,
    /// Auxiliary head logits on the β-weighted window feature.
    pub aux_logits: Vec<S>,
    l1: Vec<LstmStep<S>>,
    l2: Vec<LstmStep<S>>,
    /// `W1 z_{t-1}` and `tanh(W2 z_t)` per frame.
    att_a: Vec<Vec<S>>,
    att_b: Vec<Vec<S>>,
    gate_caches: Vec<MlpCache<S>>,
    aux_cache: MlpCache<S>,
}

pub(crate) fn gate_input<S: Scalar>(z_prev: &[S], z_t: &[S], beta_t: S) -> Vec<S> {
    let mut x = Vec::with_capacity(z_prev.len() * 2 + 1);
    x.extend_from_slice(z_prev);
    x.extend_from_slice(z_t);
    x.push(beta_t);
    x
}

fn matvec<S: Scalar>(w: &[S], x: &[S], rows: usize) -> Vec<S> {
    let cols = x.len();
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// Returns `(τ, W1 z_prev, tanh(W2 z_t))`.
pub(crate) fn attention_score<S: Scalar>(
    params: &[S],
    layout: &Layout,
    d: usize,
    z_prev: &[S],
    z_t: &[S],
) -> (S, Vec<S>, Vec<S>) {
    let a = matvec(&params[layout.w1(d)], z_prev, d);
    let b: Vec<S> = matvec(&params[layout.w2(d)], z_t, d).into_iter().map(|v| v.tanh()).collect();
    let tau = a.iter().zip(&b).map(|(&x, &y)| x * y).sum();
    (tau, a, b)
}

pub(crate) fn forward<S: Scalar>(model: &ExitNetModel<S>, phis: &[Vec<S>]) -> WindowForward<S> {
    let cfg = model.config();
    let layout = model.layout();
    let params = model.params();
    let d = cfg.feature_dim;
    let t_len = phis.len();
    let zero = vec![S::zero(); d];

    let mut l1 = Vec::with_capacity(t_len);
    let mut l2: Vec<LstmStep<S>> = Vec::with_capacity(t_len);
    for (t, phi) in phis.iter().enumerate() {
        let (h1p, c1p, h2p, c2p) = if t == 0 {
            (&zero, &zero, &zero, &zero)
        } else {
            let p1: &LstmStep<S> = &l1[t - 1];
            let p2 = &l2[t - 1];
            (&p1.h, &p1.c, &p2.h, &p2.c)
        };
        let s1 = layout.lstm[0].step(params, phi, h1p, c1p);
        let s2 = layout.lstm[1].step(params, &s1.h, h2p, c2p);
        l1.push(s1);
        l2.push(s2);
    }
    let z: Vec<Vec<S>> = l2.iter().map(|s| s.h.clone()).collect();

    let mut tau = Vec::with_capacity(t_len);
    let mut att_a = Vec::with_capacity(t_len);
    let mut att_b = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let prev = if t == 0 { &zero } else { &z[t - 1] };
        let (s, a, b) = attention_score(params, layout, d, prev, &z[t]);
        tau.push(s);
        att_a.push(a);
        att_b.push(b);
    }
    let beta = softmax(&tau);

    let exits: Vec<usize> = (1..=t_len)
        .map(|t| exit_for_frame(t, t_len, cfg.num_exits))
        .collect();
    let logits: Vec<Vec<S>> = (0..t_len)
        .map(|t| layout.heads[exits[t] - 1].forward(params, &z[t]))
        .collect();
    let mut gate_caches = Vec::with_capacity(t_len);
    let mut gate_logits = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let prev = if t == 0 { &zero } else { &z[t - 1] };
        let cache = layout.gates[exits[t] - 1].forward(params, &gate_input(prev, &z[t], beta[t]));
        gate_logits.push(cache.output[0]);
        gate_caches.push(cache);
    }
    let gate_probs = gate_logits.iter().map(|&u| sigmoid(u)).collect();

    let mut pooled = vec![S::zero(); d];
    for (zt, &bt) in z.iter().zip(&beta) {
        for (p, &v) in pooled.iter_mut().zip(zt) {
            *p += bt * v;
        }
    }
    let aux_cache = layout.aux.forward(params, &pooled);
    let aux_logits = aux_cache.output.clone();

    WindowForward {
        z,
        tau,
        beta,
        exits,
        logits,
        gate_logits,
        gate_probs,
        aux_logits,
        l1,
        l2,
        att_a,
        att_b,
        gate_caches,
        aux_cache,
    }
}

fn cross_entropy<S: Scalar>(logits: &[S], y: usize) -> S {
    log_sum_exp(logits) - logits[y]
}

/// `BCE(σ(u), target)` evaluated from the logit `u`.
fn bce_with_logit<S: Scalar>(u: S, target: bool) -> S {
    let softplus = u.max(S::zero()) + (S::one() + (-u.abs()).exp()).ln();
    if target {
        softplus - u
    } else {
        softplus
    }
}

impl<S: Scalar> WindowForward<S> {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Earliest frame whose gate probability is at least `threshold`.
    pub fn decision(&self, threshold: S) -> ExitDecision {
        for (t, &p) in self.gate_probs.iter().enumerate() {
            if p >= threshold {
                return ExitDecision {
                    exit: ExitPoint::Exit(self.exits[t]),
                    fired_at_frame: Some(t + 1),
                    gate_probability: p.as_f64(),
                };
            }
        }
        ExitDecision {
            exit: ExitPoint::Full,
            fired_at_frame: None,
            gate_probability: self.gate_probs.last().map_or(0.0, |p| p.as_f64()),
        }
    }

    /// Binary gate targets for label `y`.
    pub fn gate_targets(&self, y: usize, mode: GateTarget) -> Vec<bool> {
        match mode {
            GateTarget::ExitSafe => self.logits.iter().map(|l| argmax(l) == y).collect(),
            GateTarget::RawLabel => vec![y != 0; self.len()],
        }
    }

    /// Joint loss for label `y`; gate targets are derived from the current classifiers unless given.
    pub fn loss(&self, model: &ExitNetModel<S>, y: usize, targets: Option<&[bool]>) -> LossBreakdown<S> {
        let owned;
        let targets = match targets {
            Some(t) => t,
            None => {
                owned = self.gate_targets(y, model.config().gate_target);
                &owned
            }
        };
        let inv_t = S::one() / S::lit(self.len() as f64);
        let cls: S = self.logits.iter().map(|l| cross_entropy(l, y)).sum::<S>() * inv_t;
        let gate: S = self
            .gate_logits
            .iter()
            .zip(targets)
            .map(|(&u, &tg)| bce_with_logit(u, tg))
            .sum::<S>()
            * inv_t;
        let att = cross_entropy(&self.aux_logits, y);
        LossBreakdown::from_parts(cls, gate, att)
    }
}

/// Accumulates `∂L/∂θ` for one window into `grad` and returns the loss.
pub(crate) fn backward<S: Scalar>(
    model: &ExitNetModel<S>,
    fwd: &WindowForward<S>,
    y: usize,
    targets: Option<&[bool]>,
    grad: &mut [S],
) -> LossBreakdown<S> {
    let cfg = model.config();
    let layout = model.layout();
    let params = model.params();
    let d = cfg.feature_dim;
    let t_len = fwd.len();
    let inv_t = S::one() / S::lit(t_len as f64);
    let owned;
    let targets = match targets {
        Some(t) => t,
        None => {
            owned = fwd.gate_targets(y, cfg.gate_target);
            &owned
        }
    };
    let loss = fwd.loss(model, y, Some(targets));

    let zero = vec![S::zero(); d];
    // dz[0] belongs to the constant z_0 and is discarded.
    let mut dz = vec![vec![S::zero(); d]; t_len + 1];
    let mut dbeta = vec![S::zero(); t_len];

    for t in 0..t_len {
        let head = &layout.heads[fwd.exits[t] - 1];
        let mut dl = softmax(&fwd.logits[t]);
        dl[y] -= S::one();
        dl.iter_mut().for_each(|v| *v *= inv_t);
        head.backward(params, grad, &fwd.z[t], &dl, Some(&mut dz[t + 1]));

        let gate = &layout.gates[fwd.exits[t] - 1];
        let target = if targets[t] { S::one() } else { S::zero() };
        let du = (sigmoid(fwd.gate_logits[t]) - target) * inv_t;
        let mut dx = vec![S::zero(); 2 * d + 1];
        gate.backward(params, grad, &fwd.gate_caches[t], &[du], Some(&mut dx));
        for k in 0..d {
            dz[t][k] += dx[k];
            dz[t + 1][k] += dx[d + k];
        }
        dbeta[t] += dx[2 * d];
    }

    let mut dl = softmax(&fwd.aux_logits);
    dl[y] -= S::one();
    let mut dpooled = vec![S::zero(); d];
    layout.aux.backward(params, grad, &fwd.aux_cache, &dl, Some(&mut dpooled));
    for t in 0..t_len {
        let bt = fwd.beta[t];
        let mut dot = S::zero();
        for k in 0..d {
            dz[t + 1][k] += bt * dpooled[k];
            dot += dpooled[k] * fwd.z[t][k];
        }
        dbeta[t] += dot;
    }

    let weighted: S = fwd.beta.iter().zip(&dbeta).map(|(&b, &g)| b * g).sum();
    let dtau: Vec<S> = fwd.beta.iter().zip(&dbeta).map(|(&b, &g)| b * (g - weighted)).collect();

    let (w1r, w2r) = (layout.w1(d), layout.w2(d));
    for t in 0..t_len {
        let g = dtau[t];
        if g == S::zero() {
            continue;
        }
        let z_prev = if t == 0 { &zero } else { &fwd.z[t - 1] };
        let a = &fwd.att_a[t];
        let b = &fwd.att_b[t];
        for r in 0..d {
            let da = g * b[r];
            let du = g * a[r] * (S::one() - b[r] * b[r]);
            let row = r * d;
            for c in 0..d {
                grad[w1r.start + row + c] += da * z_prev[c];
                grad[w2r.start + row + c] += du * fwd.z[t][c];
                dz[t][c] += da * params[w1r.start + row + c];
                dz[t + 1][c] += du * params[w2r.start + row + c];
            }
        }
    }

    let dh2: Vec<Vec<S>> = dz.into_iter().skip(1).collect();
    let dh1 = layout.lstm[1].backward_sequence(params, grad, &fwd.l2, &dh2);
    layout.lstm[0].backward_sequence(params, grad, &fwd.l1, &dh1);
    loss
}
