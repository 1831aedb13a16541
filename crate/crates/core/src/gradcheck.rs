//! Central finite-difference utilities for verifying analytic gradients.
//!
//! Every loss and layer in this crate is checked against these at 64-bit
//! precision; the relative-error target used across the suite is 1e-4.

use ndarray::ArrayD;

/// Central finite-difference gradient of a scalar function at `x`.
pub fn central_diff<F>(f: F, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let hi = f(&probe);
        probe[&idx] = orig - eps;
        let lo = f(&probe);
        probe[&idx] = orig;
        grad[&idx] = (hi - lo) / (2.0 * eps);
    }
    grad
}

/// Largest elementwise relative error between two gradients.
/// Denominator is floored so near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Deterministic pseudo-random array in (-1, 1) for gradient probes.
pub fn probe_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// Deterministic random softmax-normalized probabilities along `class_axis`.
pub fn probe_probs(shape: &[usize], class_axis: usize, seed: u64) -> ArrayD<f64> {
    let logits = probe_array(shape, seed);
    softmax_nd(&logits, class_axis)
}

/// Plain (non-tape) softmax, used to build probe inputs.
pub fn softmax_nd(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(ndarray::Axis(axis)) {
        let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v /= sum;
        }
    }
    out
}
