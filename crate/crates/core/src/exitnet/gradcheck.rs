//! Finite-difference verification of the hand-derived gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::forward::{backward, forward};
use super::ExitNetModel;
use crate::error::{Error, Result};

/// Minimum number of coordinates probed (all of them when the model is smaller).
pub const MIN_CHECKED_COORDS: usize = 200;

/// Denominator floor of the relative error. Central differences on an O(1) loss carry
/// roundoff near `f64::EPSILON / ε ≈ 1e-11`, so coordinates with gradients below the floor
/// are judged on absolute agreement instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinate with the largest error.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::domain(format!("epsilon must be finite and > 0, got {epsilon}")));
    }
    Ok(())
}

fn pick_coords(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = if n <= MIN_CHECKED_COORDS {
        (0..n).collect()
    } else {
        sample(&mut rng, n, MIN_CHECKED_COORDS).into_vec()
    };
    coords.sort_unstable();
    coords
}

fn report(coords: &[usize], mut probe: impl FnMut(usize) -> (f64, f64)) -> GradCheckReport {
    let mut rep = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &i in coords {
        let (a, n) = probe(i);
        let err = rel_error(a, n);
        if err > rep.max_rel_error || !err.is_finite() {
            rep.max_rel_error = err;
            rep.worst_coord = i;
            rep.analytic = a;
            rep.numeric = n;
        }
    }
    rep
}

/// Compares the analytic gradient of the joint loss on one `(frame features, label)` window
/// with two-sided finite differences.
///
/// Gate targets depend on classifier argmaxes, which are piecewise constant; they are frozen
/// at the unperturbed parameters so the loss is differentiable along every probe.
pub fn grad_check(model: &ExitNetModel<f64>, sample: &(Vec<Vec<f64>>, usize), epsilon: f64) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let (phis, y) = sample;
    if *y >= model.config().num_classes {
        return Err(Error::domain(format!("label {y} >= class count")));
    }
    let fwd = model.forward_window(phis)?;
    let targets = fwd.gate_targets(*y, model.config().gate_target);
    let mut grad = vec![0.0; model.num_params()];
    backward(model, &fwd, *y, Some(&targets), &mut grad);

    let coords = pick_coords(model.num_params(), model.config().seed ^ 0x9e37_79b9);
    let mut probe = model.clone();
    let loss_at = |m: &ExitNetModel<f64>| forward(m, phis).loss(m, *y, Some(&targets)).total;
    Ok(report(&coords, |i| {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let plus = loss_at(&probe);
        probe.params_mut()[i] = orig - epsilon;
        let minus = loss_at(&probe);
        probe.params_mut()[i] = orig;
        (grad[i], (plus - minus) / (2.0 * epsilon))
    }))
}

/// Checks the classifier heads alone on a fixed feature `z`: the probed function
/// `F = Σ_e c_e · classify(z, e)` is linear in the head parameters, so finite differences
/// are exact up to rounding.
pub fn grad_check_heads(model: &ExitNetModel<f64>, z: &[f64], seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let e = model.num_exits();
    let k = model.config().num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<Vec<f64>> = (0..e)
        .map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let f = |m: &ExitNetModel<f64>| -> Result<f64> {
        let mut acc = 0.0;
        for (exit, c) in coeffs.iter().enumerate() {
            let logits = m.classify(z, exit + 1)?;
            acc += logits.iter().zip(c).map(|(l, c)| l * c).sum::<f64>();
        }
        Ok(acc)
    };
    f(model)?;

    let mut grad = vec![0.0; model.num_params()];
    let heads = &model.layout().heads;
    for (spec, c) in heads.iter().zip(&coeffs) {
        spec.backward(model.params(), &mut grad, z, c, None);
    }
    let mut coords: Vec<usize> = heads.iter().flat_map(|h| h.range()).collect();
    if coords.len() > MIN_CHECKED_COORDS {
        let picked = pick_coords(coords.len(), seed);
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }
    let mut probe = model.clone();
    Ok(report(&coords, |i| {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + epsilon;
        let plus = f(&probe).expect("validated above");
        probe.params_mut()[i] = orig - epsilon;
        let minus = f(&probe).expect("validated above");
        probe.params_mut()[i] = orig;
        (grad[i], (plus - minus) / (2.0 * epsilon))
    }))
}
