//! Synthetic per-frame features standing in for a pretrained backbone.
//!
//! The first `d/2` dimensions carry the class prototype plus Gaussian noise whose scale
//! grows with frame complexity; the last `d/2` dimensions carry the complexity itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ExitNetConfig;
use crate::scalar::Scalar;
use crate::tracegen::Frame;

const PROTOTYPE_STREAM: u64 = 0x5052_4f54_4f54_5950;

fn mix(seed: u64, frame_id: u64) -> u64 {
    // splitmix64 finaliser over the combined key.
    let mut z = seed ^ frame_id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One prototype per class in `half` dimensions, each of norm `√half`.
///
/// Prototypes are mutually orthogonal whenever `num_classes <= half`.
pub fn class_prototypes(num_classes: usize, half: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROTOTYPE_STREAM);
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut v: Vec<f64> = (0..half).map(|_| StandardNormal.sample(&mut rng)).collect();
        if k < half {
            for p in &protos {
                let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / half as f64;
                v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let scale = (half as f64).sqrt() / norm;
        v.iter_mut().for_each(|x| *x *= scale);
        protos.push(v);
    }
    protos
}

/// Feature vector of one frame, deterministic in `(frame, seed)`.
///
/// Class prototypes come from `config.feature_seed`, so every noise seed sees the same
/// backbone. Panics if `config.feature_dim` is odd (rejected by [`ExitNetConfig::validate`]).
pub fn synth_features<S: Scalar>(frame: &Frame, config: &ExitNetConfig, seed: u64) -> Vec<S> {
    let protos = class_prototypes(config.num_classes.max(frame.label + 1), config.feature_dim / 2, config.feature_seed);
    features_with(&protos, frame, config, seed)
}

fn features_with<S: Scalar>(protos: &[Vec<f64>], frame: &Frame, config: &ExitNetConfig, seed: u64) -> Vec<S> {
    assert!(config.feature_dim.is_multiple_of(2), "feature_dim must be even");
    let half = config.feature_dim / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, frame.frame_id));
    let scale = config.feature_noise * frame.complexity;
    let mut out = Vec::with_capacity(config.feature_dim);
    for &p in &protos[frame.label] {
        let noise: f64 = StandardNormal.sample(&mut rng);
        out.push(S::lit(if scale == 0.0 { p } else { p + scale * noise }));
    }
    out.extend(std::iter::repeat_n(S::lit(frame.complexity), half));
    out
}

/// Features of every frame in a window, sharing one prototype table.
pub fn window_features<S: Scalar>(window: &[Frame], config: &ExitNetConfig, seed: u64) -> Vec<Vec<S>> {
    let k = window.iter().map(|f| f.label + 1).max().unwrap_or(0).max(config.num_classes);
    let protos = class_prototypes(k, config.feature_dim / 2, config.feature_seed);
    window.iter().map(|f| features_with(&protos, f, config, seed)).collect()
}
