//! Central finite-difference gradient verification.
//!
//! The checker compares an analytic gradient against central differences of
//! the loss closure. Finite differences are only valid where the loss is
//! smooth around the evaluation point; rectifier kinks, clamp edges, and
//! twin-critic min crossovers within the probe step produce garbage
//! quotients. Callers therefore pick evaluation points away from kinks
//! ([`preactivation_margin`] measures how far a network sits from its
//! nearest rectifier kink) rather than filtering coordinates after the fact.

use ndarray::ArrayView2;

use crate::nn::ParamVector;

/// Central finite differences of `loss` with step `h`, one coordinate at a
/// time.
pub fn finite_difference<F>(params: &ParamVector, loss: F, h: f64) -> Vec<f64>
where
    F: Fn(&ParamVector) -> f64,
{
    let mut g = vec![0.0; params.len()];
    let mut p = params.clone();
    for i in 0..params.len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let plus = loss(&p);
        p.values_mut()[i] = orig - h;
        let minus = loss(&p);
        p.values_mut()[i] = orig;
        g[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `loss` with step `h`. Relative error uses
/// `max(|analytic|, |numeric|, floor)` as the denominator.
pub fn max_rel_error<F>(params: &ParamVector, analytic: &[f64], loss: F, h: f64, floor: f64) -> f64
where
    F: Fn(&ParamVector) -> f64,
{
    assert_eq!(analytic.len(), params.len());
    let numeric = finite_difference(params, loss, h);
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Smallest |pre-activation| over all hidden rectifier units of the network
/// evaluated on the rows of `x`. An evaluation point is safe for a
/// finite-difference probe of step `h` when this margin comfortably exceeds
/// `h` times the input scale.
pub fn preactivation_margin(params: &ParamVector, x: ArrayView2<f64>) -> f64 {
    let last = params.shape().num_layers() - 1;
    let mut margin = f64::INFINITY;
    let mut h = x.to_owned();
    for layer in 0..last {
        let w = params.weight_view(layer);
        let b = params.bias(layer);
        let mut pre = h.dot(&w.t());
        for mut row in pre.rows_mut() {
            for (v, bi) in row.iter_mut().zip(b) {
                *v += bi;
            }
        }
        for v in pre.iter() {
            margin = margin.min(v.abs());
        }
        h = pre.mapv(|v| v.max(0.0));
    }
    margin
}
