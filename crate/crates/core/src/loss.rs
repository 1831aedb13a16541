//! The supervised and semi-supervised loss family: dice, focal, dynamic
//! cross-entropy, and their weighted combinations.
//!
//! All functions take softmax probabilities and one-hot (or soft) targets
//! shaped `[B, C, H, W]` and return a scalar tape node, so gradients flow
//! back to the logits that produced the probabilities.

use crate::autodiff::Tx;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal focusing parameter; larger down-weights easy pixels harder.
    pub focal_gamma: f64,
    /// Focal class weighting factor in [0, 1].
    pub focal_alpha: f64,
    /// Additive dice smoothing (per class).
    pub dice_smooth: f64,
    /// Lower clamp for every log argument.
    pub log_clamp: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub lambda_dce: f64,
    /// Treat pseudo-labels as soft distributions instead of hard one-hots.
    pub soft_pseudo_labels: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            log_clamp: 1e-7,
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            lambda_dce: 1.0,
            soft_pseudo_labels: false,
        }
    }
}

fn check_same_shape(probs: &Tx<'_>, targets: &Tx<'_>, what: &str) -> Result<()> {
    let (a, b) = (probs.shape(), targets.shape());
    if a != b {
        return Err(Error::shape_mismatch(what, &a, &b));
    }
    if a.len() != 4 {
        return Err(Error::shape_mismatch(what, &a, &[0, 0, 0, 0]));
    }
    Ok(())
}

/// `1 - (2*overlap + eps) / (pred + target + eps)`, averaged over classes
/// and batch.
pub fn dice_loss<'t>(probs: Tx<'t>, targets: Tx<'t>, dice_smooth: f64) -> Result<Tx<'t>> {
    check_same_shape(&probs, &targets, "dice_loss")?;
    let overlap = probs.mul(targets).sum_axes(&[2, 3]);
    let denom = probs.sum_axes(&[2, 3]).add(targets.sum_axes(&[2, 3]));
    let dsc = overlap
        .scale(2.0)
        .add_scalar(dice_smooth)
        .div_b(denom.add_scalar(dice_smooth));
    Ok(dsc.neg().add_scalar(1.0).mean_all())
}

/// Probability assigned to the true class per pixel: `[B,1,H,W]`.
fn true_class_prob<'t>(probs: Tx<'t>, targets: Tx<'t>) -> Tx<'t> {
    probs.mul(targets).sum_axes(&[1])
}

/// Mean over pixels of `-alpha * (1 - p_t)^gamma * log(p_t)`.
pub fn focal_loss<'t>(
    probs: Tx<'t>,
    targets: Tx<'t>,
    gamma: f64,
    alpha: f64,
    log_clamp: f64,
) -> Result<Tx<'t>> {
    check_same_shape(&probs, &targets, "focal_loss")?;
    let pt = true_class_prob(probs, targets);
    let modulator = pt.neg().add_scalar(1.0).powf(gamma);
    let log_pt = pt.clamp(log_clamp, 1.0).ln();
    Ok(modulator.mul(log_pt).scale(-alpha).mean_all())
}

/// Plain cross-entropy against (possibly soft) targets, mean over pixels.
pub fn cross_entropy<'t>(probs: Tx<'t>, targets: Tx<'t>, log_clamp: f64) -> Result<Tx<'t>> {
    check_same_shape(&probs, &targets, "cross_entropy")?;
    let log_p = probs.clamp(log_clamp, 1.0).ln();
    Ok(targets.mul(log_p).sum_axes(&[1]).neg().mean_all())
}

/// The per-pixel dynamic weight: the maximum softmax activation across
/// classes, in `[1/C, 1]`. Gradient flows through the max.
pub fn dynamic_weights<'t>(probs: Tx<'t>) -> Tx<'t> {
    probs.max_axis(1)
}

/// Confidence-weighted cross-entropy for noisy pseudo-labels, negated so it
/// behaves as a loss:
/// `-mean[ w * sum_c y log(p) + (1 - w) * sum_c p log(y) ]`
/// with every log argument clamped from below.
pub fn dynamic_cross_entropy<'t>(
    probs: Tx<'t>,
    pseudo_targets: Tx<'t>,
    log_clamp: f64,
) -> Result<Tx<'t>> {
    check_same_shape(&probs, &pseudo_targets, "dynamic_cross_entropy")?;
    let w = dynamic_weights(probs);
    let forward = pseudo_targets
        .mul(probs.clamp(log_clamp, 1.0).ln())
        .sum_axes(&[1]);
    let reverse = probs
        .mul(pseudo_targets.clamp(log_clamp, 1.0).ln())
        .sum_axes(&[1]);
    let anti_w = w.neg().add_scalar(1.0);
    let per_pixel = w.mul(forward).add(anti_w.mul(reverse));
    Ok(per_pixel.neg().mean_all())
}

/// Supervised loss: dice + focal.
pub fn supervised_loss<'t>(probs: Tx<'t>, targets: Tx<'t>, cfg: &LossConfig) -> Result<Tx<'t>> {
    let dl = dice_loss(probs, targets, cfg.dice_smooth)?;
    let fl = focal_loss(probs, targets, cfg.focal_gamma, cfg.focal_alpha, cfg.log_clamp)?;
    Ok(dl.add(fl))
}

/// Semi-supervised loss: `lambda1*DL + lambda2*FL + lambda3*DCE`.
pub fn semi_supervised_loss<'t>(
    probs: Tx<'t>,
    pseudo_targets: Tx<'t>,
    cfg: &LossConfig,
) -> Result<Tx<'t>> {
    let dl = dice_loss(probs, pseudo_targets, cfg.dice_smooth)?;
    let fl = focal_loss(
        probs,
        pseudo_targets,
        cfg.focal_gamma,
        cfg.focal_alpha,
        cfg.log_clamp,
    )?;
    let dce = dynamic_cross_entropy(probs, pseudo_targets, cfg.log_clamp)?;
    Ok(dl
        .scale(cfg.lambda_dice)
        .add(fl.scale(cfg.lambda_focal))
        .add(dce.scale(cfg.lambda_dce)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{one_hot, Tape};
    use crate::gradcheck::{central_diff, max_rel_err, probe_array, probe_probs};
    use ndarray::{ArrayD, IxDyn};

    fn one_hot_targets<'t>(tape: &'t Tape, labels: &[u8], shape: &[usize]) -> Tx<'t> {
        let arr = ArrayD::from_shape_vec(IxDyn(shape), labels.to_vec()).unwrap();
        one_hot(tape, &arr, 4, 1)
    }

    /// Loss of softmax(logits): the form used for all finite-difference
    /// checks.
    fn loss_of_logits<F>(f: F, logits: &ArrayD<f64>, labels: &[u8], shape: &[usize]) -> f64
    where
        F: for<'t> Fn(Tx<'t>, Tx<'t>) -> Result<Tx<'t>>,
    {
        let tape = Tape::new();
        let x = tape.var(logits.clone());
        let probs = x.softmax(1);
        let targets = one_hot_targets(&tape, labels, shape);
        f(probs, targets).unwrap().scalar()
    }

    fn grad_check<F>(name: &str, f: F)
    where
        F: for<'t> Fn(Tx<'t>, Tx<'t>) -> Result<Tx<'t>> + Copy,
    {
        let shape = [2usize, 4, 6, 6];
        let logits = probe_array(&[2, 4, 6, 6], 50);
        let labels: Vec<u8> = (0..2 * 6 * 6).map(|i| (i % 4) as u8).collect();
        let tape = Tape::new();
        let x = tape.var(logits.clone());
        let probs = x.softmax(1);
        let targets = one_hot_targets(&tape, &labels, &[2, 6, 6]);
        let loss = f(probs, targets).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).unwrap().clone();
        let numeric = central_diff(
            |lv| loss_of_logits(f, lv, &labels, &[2, 6, 6]),
            &logits,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{name}: rel err {err} ({:?})", shape);
    }

    #[test]
    fn all_loss_gradients_match_finite_differences() {
        grad_check("dice", |p, t| dice_loss(p, t, 1.0));
        grad_check("focal", |p, t| focal_loss(p, t, 2.0, 0.25, 1e-7));
        grad_check("dce", |p, t| dynamic_cross_entropy(p, t, 1e-7));
        grad_check("supervised", |p, t| {
            supervised_loss(p, t, &LossConfig::default())
        });
        grad_check("semi_supervised", |p, t| {
            semi_supervised_loss(p, t, &LossConfig::default())
        });
    }

    #[test]
    fn dice_is_zero_for_perfect_and_one_for_disjoint() {
        let tape = Tape::new();
        let labels: Vec<u8> = (0..32).map(|i| (i % 4) as u8).collect();
        let targets = one_hot_targets(&tape, &labels, &[2, 4, 4]);
        // Perfect prediction: probs == one-hot targets.
        let probs = tape.var(targets.value().as_ref().clone());
        let dl = dice_loss(probs, targets, 1e-6).unwrap().scalar();
        assert!(dl.abs() <= 2e-6, "perfect dice {dl}");
        // Fully disjoint one-hot prediction: shift every label by one class.
        let shifted: Vec<u8> = labels.iter().map(|&l| (l + 1) % 4).collect();
        let wrong = one_hot_targets(&tape, &shifted, &[2, 4, 4]);
        let probs = tape.var(wrong.value().as_ref().clone());
        let dl = dice_loss(probs, targets, 1e-6).unwrap().scalar();
        assert!(dl >= 1.0 - 2e-6, "disjoint dice {dl}");
    }

    #[test]
    fn dice_hand_count_half_overlap() {
        // One class, pred covers 2 px, target covers 2 px, overlap 1.
        let tape = Tape::new();
        let p = tape.var(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 4]), vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let t = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, 4]), vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        );
        let dl = dice_loss(p, t, 1e-12).unwrap().scalar();
        assert!((dl - 0.5).abs() < 1e-9, "dice {dl}");
    }

    #[test]
    fn dice_is_permutation_equivariant_under_class_relabeling() {
        let tape = Tape::new();
        let probs0 = probe_probs(&[2, 4, 3, 3], 1, 51);
        let labels: Vec<u8> = (0..18).map(|i| ((i * 7) % 4) as u8).collect();
        let t = one_hot_targets(&tape, &labels, &[2, 3, 3]);
        let p = tape.var(probs0.clone());
        let base = dice_loss(p, t, 1.0).unwrap().scalar();
        // Rotate classes by one in both probs and targets.
        let perm = [1usize, 2, 3, 0];
        let mut probs_p = probs0.clone();
        for b in 0..2 {
            for c in 0..4 {
                for y in 0..3 {
                    for x in 0..3 {
                        probs_p[IxDyn(&[b, perm[c], y, x])] = probs0[IxDyn(&[b, c, y, x])];
                    }
                }
            }
        }
        let labels_p: Vec<u8> = labels.iter().map(|&l| perm[l as usize] as u8).collect();
        let tp = one_hot_targets(&tape, &labels_p, &[2, 3, 3]);
        let pp = tape.var(probs_p);
        let permuted = dice_loss(pp, tp, 1.0).unwrap().scalar();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_value_at_half_confidence() {
        // Single pixel, p_t = 0.5, gamma = 2, alpha = 1:
        // 0.25 * ln 2 ~= 0.17329.
        let tape = Tape::new();
        let p = tape.var(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![0.5, 0.5]).unwrap(),
        );
        let t = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![1.0, 0.0]).unwrap(),
        );
        let fl = focal_loss(p, t, 2.0, 1.0, 1e-7).unwrap().scalar();
        assert!((fl - 0.25 * std::f64::consts::LN_2).abs() < 1e-10, "{fl}");
    }

    #[test]
    fn focal_with_gamma_zero_is_cross_entropy() {
        let tape = Tape::new();
        let probs0 = probe_probs(&[2, 4, 5, 5], 1, 52);
        let labels: Vec<u8> = (0..50).map(|i| ((i * 3) % 4) as u8).collect();
        let t = one_hot_targets(&tape, &labels, &[2, 5, 5]);
        let p = tape.var(probs0);
        let fl = focal_loss(p, t, 0.0, 1.0, 1e-7).unwrap().scalar();
        let ce = cross_entropy(p, t, 1e-7).unwrap().scalar();
        assert!((fl - ce).abs() < 1e-10, "fl {fl} vs ce {ce}");
    }

    #[test]
    fn focal_decreases_monotonically_in_confidence() {
        let tape = Tape::new();
        let mut prev = f64::INFINITY;
        for i in 1..20 {
            let pt = i as f64 / 20.0;
            let p = tape.var(
                ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![pt, 1.0 - pt]).unwrap(),
            );
            let t = tape.constant(
                ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![1.0, 0.0]).unwrap(),
            );
            let fl = focal_loss(p, t, 2.0, 1.0, 1e-7).unwrap().scalar();
            assert!(fl < prev, "focal not monotone at p_t={pt}");
            prev = fl;
        }
        // p_t = 1 exactly: the modulating factor kills the loss.
        let p = tape.var(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![1.0, 0.0]).unwrap(),
        );
        let t = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![1.0, 0.0]).unwrap(),
        );
        let fl = focal_loss(p, t, 2.0, 1.0, 1e-7).unwrap().scalar();
        assert!(fl.abs() <= 1e-6, "focal at p_t=1: {fl}");
    }

    #[test]
    fn dynamic_weight_is_max_softmax_activation() {
        let tape = Tape::new();
        let p = tape.var(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![0.8, 0.2]).unwrap(),
        );
        let w = dynamic_weights(p);
        assert!((w.scalar() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dynamic_weight_stays_in_band() {
        let probs = probe_probs(&[3, 4, 6, 6], 1, 53);
        let tape = Tape::new();
        let w = dynamic_weights(tape.var(probs));
        for &v in w.value().iter() {
            assert!((0.25..=1.0).contains(&v), "w={v} outside [1/c, 1]");
        }
    }

    #[test]
    fn dce_vanishes_for_confident_correct_prediction() {
        let tape = Tape::new();
        let labels: Vec<u8> = (0..16).map(|i| (i % 4) as u8).collect();
        let t = one_hot_targets(&tape, &labels, &[1, 4, 4]);
        let p = tape.var(t.value().as_ref().clone());
        let dce = dynamic_cross_entropy(p, t, 1e-7).unwrap().scalar();
        assert!(dce.abs() <= 1e-5, "dce {dce}");
    }

    /// Loop-based reference of the negated Eq. 3/4 form.
    fn reference_dce(probs: &ArrayD<f64>, targets: &ArrayD<f64>, clamp: f64) -> f64 {
        let (b, c, h, w) = (
            probs.shape()[0],
            probs.shape()[1],
            probs.shape()[2],
            probs.shape()[3],
        );
        let mut total = 0.0;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let mut wmax = f64::NEG_INFINITY;
                    for ci in 0..c {
                        wmax = wmax.max(probs[IxDyn(&[bi, ci, y, x])]);
                    }
                    let mut fwd = 0.0;
                    let mut rev = 0.0;
                    for ci in 0..c {
                        let p = probs[IxDyn(&[bi, ci, y, x])];
                        let t = targets[IxDyn(&[bi, ci, y, x])];
                        fwd += t * p.clamp(clamp, 1.0).ln();
                        rev += p * t.clamp(clamp, 1.0).ln();
                    }
                    total += wmax * fwd + (1.0 - wmax) * rev;
                }
            }
        }
        -total / (b * h * w) as f64
    }

    #[test]
    fn dce_matches_loop_reference_at_two_confidence_levels() {
        let labels: Vec<u8> = (0..2 * 3 * 3).map(|i| ((i * 5) % 4) as u8).collect();
        for (seed, sharpen) in [(54u64, 1.0f64), (55, 6.0)] {
            let logits = probe_array(&[2, 4, 3, 3], seed).mapv(|v| v * sharpen);
            let probs = crate::gradcheck::softmax_nd(&logits, 1);
            let tape = Tape::new();
            let t = one_hot_targets(&tape, &labels, &[2, 3, 3]);
            let p = tape.var(probs.clone());
            let dce = dynamic_cross_entropy(p, t, 1e-7).unwrap().scalar();
            let reference = reference_dce(&probs, &t.value(), 1e-7);
            assert!(
                (dce - reference).abs() < 1e-12,
                "dce {dce} vs reference {reference}"
            );
        }
    }

    #[test]
    fn soft_pseudo_labels_keep_reverse_term_finite_without_clamping() {
        // Soft targets: the reverse term log(y) is finite on its own.
        let tape = Tape::new();
        let probs = tape.var(probe_probs(&[1, 4, 2, 2], 1, 56));
        let soft = tape.constant(probe_probs(&[1, 4, 2, 2], 1, 57));
        let dce = dynamic_cross_entropy(probs, soft, 1e-7).unwrap().scalar();
        assert!(dce.is_finite());
    }

    #[test]
    fn supervised_is_exactly_dice_plus_focal() {
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let labels: Vec<u8> = (0..18).map(|i| (i % 4) as u8).collect();
        let t = one_hot_targets(&tape, &labels, &[2, 3, 3]);
        let p = tape.var(probe_probs(&[2, 4, 3, 3], 1, 58));
        let total = supervised_loss(p, t, &cfg).unwrap().scalar();
        let dl = dice_loss(p, t, cfg.dice_smooth).unwrap().scalar();
        let fl = focal_loss(p, t, cfg.focal_gamma, cfg.focal_alpha, cfg.log_clamp)
            .unwrap()
            .scalar();
        assert_eq!(total, dl + fl);
    }

    #[test]
    fn ssl_loss_reduces_to_supervised_when_dce_weight_is_zero() {
        let cfg = LossConfig {
            lambda_dce: 0.0,
            ..LossConfig::default()
        };
        let tape = Tape::new();
        let labels: Vec<u8> = (0..18).map(|i| ((i * 3) % 4) as u8).collect();
        let t = one_hot_targets(&tape, &labels, &[2, 3, 3]);
        let p = tape.var(probe_probs(&[2, 4, 3, 3], 1, 59));
        let ssl = semi_supervised_loss(p, t, &cfg).unwrap().scalar();
        let sl = supervised_loss(p, t, &cfg).unwrap().scalar();
        assert!((ssl - sl).abs() < 1e-15);
    }

    #[test]
    fn ssl_defaults_sum_all_three_terms() {
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let labels: Vec<u8> = (0..18).map(|i| ((i * 7) % 4) as u8).collect();
        let t = one_hot_targets(&tape, &labels, &[2, 3, 3]);
        let p = tape.var(probe_probs(&[2, 4, 3, 3], 1, 60));
        let ssl = semi_supervised_loss(p, t, &cfg).unwrap().scalar();
        let dl = dice_loss(p, t, cfg.dice_smooth).unwrap().scalar();
        let fl = focal_loss(p, t, cfg.focal_gamma, cfg.focal_alpha, cfg.log_clamp)
            .unwrap()
            .scalar();
        let dce = dynamic_cross_entropy(p, t, cfg.log_clamp).unwrap().scalar();
        assert!((ssl - (dl + fl + dce)).abs() < 1e-15);
    }

    #[test]
    fn losses_reject_mismatched_shapes() {
        let tape = Tape::new();
        let p = tape.var(probe_probs(&[1, 4, 2, 2], 1, 61));
        let t = tape.constant(probe_probs(&[1, 4, 3, 3], 1, 62));
        assert!(matches!(
            dice_loss(p, t, 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            focal_loss(p, t, 2.0, 0.25, 1e-7),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            dynamic_cross_entropy(p, t, 1e-7),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn losses_are_nonnegative_and_finite_on_random_inputs() {
        let cfg = LossConfig::default();
        for seed in 70..75 {
            let tape = Tape::new();
            let labels: Vec<u8> = (0..2 * 6 * 6).map(|i| ((i + seed as usize) % 4) as u8).collect();
            let t = one_hot_targets(&tape, &labels, &[2, 6, 6]);
            let p = tape.var(probe_probs(&[2, 4, 6, 6], 1, seed));
            for loss in [
                dice_loss(p, t, cfg.dice_smooth).unwrap().scalar(),
                focal_loss(p, t, cfg.focal_gamma, cfg.focal_alpha, cfg.log_clamp)
                    .unwrap()
                    .scalar(),
                dynamic_cross_entropy(p, t, cfg.log_clamp).unwrap().scalar(),
                semi_supervised_loss(p, t, &cfg).unwrap().scalar(),
            ] {
                assert!(loss.is_finite() && loss >= 0.0, "loss {loss}");
            }
        }
    }
}
