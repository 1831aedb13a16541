//! Finite-difference checks for every primitive op, plus tape mechanics.

use super::*;
use crate::gradcheck::{central_diff, max_rel_err, probe_array};
use ndarray::{ArrayD, IxDyn};

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

/// Check d(sum(f(x)))/dx against central differences.
fn check_unary(name: &str, f: impl for<'t> Fn(Tx<'t>) -> Tx<'t>, x0: ArrayD<f64>) {
    let tape = Tape::new();
    let x = tape.var(x0.clone());
    let loss = f(x).sum_all();
    let grads = tape.backward(loss);
    let analytic = grads.wrt(x).expect("gradient must reach input").clone();
    let numeric = central_diff(
        |xv| {
            let t = Tape::new();
            let x = t.var(xv.clone());
            f(x).sum_all().scalar()
        },
        &x0,
        EPS,
    );
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < TOL, "{name}: rel err {err}");
}

fn check_binary(
    name: &str,
    f: impl for<'t> Fn(Tx<'t>, Tx<'t>) -> Tx<'t>,
    a0: ArrayD<f64>,
    b0: ArrayD<f64>,
) {
    let tape = Tape::new();
    let a = tape.var(a0.clone());
    let b = tape.var(b0.clone());
    let loss = f(a, b).sum_all();
    let grads = tape.backward(loss);
    for (which, x0, other, lhs) in [("lhs", &a0, &b0, true), ("rhs", &b0, &a0, false)] {
        let analytic = grads
            .wrt(if lhs { a } else { b })
            .expect("gradient must reach input")
            .clone();
        let numeric = central_diff(
            |xv| {
                let t = Tape::new();
                let (av, bv) = if lhs {
                    (t.var(xv.clone()), t.var(other.clone()))
                } else {
                    (t.var(other.clone()), t.var(xv.clone()))
                };
                f(av, bv).sum_all().scalar()
            },
            x0,
            EPS,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < TOL, "{name} ({which}): rel err {err}");
    }
}

#[test]
fn elementwise_grads_match_finite_differences() {
    let a = probe_array(&[2, 3, 4], 1);
    let b = probe_array(&[2, 3, 4], 2);
    check_binary("add", |x, y| x.add(y), a.clone(), b.clone());
    check_binary("sub", |x, y| x.sub(y), a.clone(), b.clone());
    check_binary("mul", |x, y| x.mul(y), a.clone(), b.clone());
    check_binary("maximum", |x, y| x.maximum(y), a.clone(), b.clone());
}

#[test]
fn broadcast_grads_match_finite_differences() {
    let a = probe_array(&[2, 3, 4], 3);
    let b = probe_array(&[1, 3, 1], 4);
    check_binary("add_b", |x, y| x.add_b(y), a.clone(), b.clone());
    check_binary("mul_b", |x, y| x.mul_b(y), a.clone(), b.clone());
    // Keep the divisor away from zero.
    let bpos = b.mapv(|v| v.abs() + 0.5);
    check_binary("div_b", |x, y| x.div_b(y), a.clone(), bpos);
}

#[test]
fn unary_grads_match_finite_differences() {
    let x = probe_array(&[3, 5], 5);
    check_unary("scale", |t| t.scale(2.5), x.clone());
    check_unary("add_scalar", |t| t.add_scalar(0.7), x.clone());
    check_unary("neg", |t| t.neg(), x.clone());
    check_unary("sigmoid", |t| t.sigmoid(), x.clone());
    check_unary("tanh", |t| t.tanh(), x.clone());
    check_unary("gelu", |t| t.gelu(), x.clone());
    check_unary("exp", |t| t.exp(), x.clone());
    let xpos = x.mapv(|v| v.abs() + 0.3);
    check_unary("ln", |t| t.ln(), xpos.clone());
    check_unary("sqrt", |t| t.sqrt(), xpos.clone());
    check_unary("powf", |t| t.powf(2.7), xpos.clone());
    // relu/clamp kinks: shift the probe off the kink locations.
    let xo = x.mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_unary("relu", |t| t.relu(), xo.clone());
    check_unary("clamp", |t| t.clamp(-0.5, 0.5), xo);
}

#[test]
fn shape_op_grads_match_finite_differences() {
    let x = probe_array(&[2, 3, 4], 6);
    check_unary("reshape", |t| t.reshape(&[4, 6]).sigmoid(), x.clone());
    check_unary("permute", |t| t.permute(&[2, 0, 1]).sigmoid(), x.clone());
    check_unary("pad_axis", |t| t.pad_axis(1, 2, 1).sigmoid(), x.clone());
    check_unary("slice_axis", |t| t.slice_axis(2, 1, 2).sigmoid(), x.clone());
    check_binary(
        "concat",
        |a, b| Tx::concat(1, &[a, b]).sigmoid(),
        x.clone(),
        probe_array(&[2, 2, 4], 7),
    );
}

#[test]
fn reduction_grads_match_finite_differences() {
    let x = probe_array(&[2, 3, 4], 8);
    check_unary("mean_all", |t| t.sigmoid().mean_all(), x.clone());
    check_unary("sum_axes", |t| t.sum_axes(&[0, 2]).sigmoid(), x.clone());
    check_unary("mean_axes", |t| t.mean_axes(&[1]).sigmoid(), x.clone());
    check_unary("max_axis", |t| t.max_axis(1).sigmoid(), x.clone());
    check_unary("softmax", |t| t.softmax(1).powf(2.0), x.clone());
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::new();
    let x = tape.var(probe_array(&[2, 5, 3], 9).mapv(|v| v * 10.0));
    let s = x.softmax(1);
    let sums = s.value().sum_axis(ndarray::Axis(1));
    for &v in sums.iter() {
        assert!((v - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_grads_match_finite_differences() {
    check_binary(
        "matmul",
        |a, b| a.matmul(b),
        probe_array(&[3, 4], 10),
        probe_array(&[4, 2], 11),
    );
    check_binary(
        "bmm",
        |a, b| a.bmm(b),
        probe_array(&[2, 3, 4], 12),
        probe_array(&[2, 4, 2], 13),
    );
}

#[test]
fn conv2d_grads_match_finite_differences() {
    let geo = ConvGeometry {
        stride: 2,
        padding: 1,
        groups: 1,
    };
    check_binary(
        "conv2d s2 p1",
        |x, w| x.conv2d(w, geo),
        probe_array(&[2, 3, 5, 5], 14),
        probe_array(&[4, 3, 3, 3], 15),
    );
    // Depthwise: groups == channels.
    let geo_dw = ConvGeometry {
        stride: 1,
        padding: 1,
        groups: 4,
    };
    check_binary(
        "conv2d depthwise",
        |x, w| x.conv2d(w, geo_dw),
        probe_array(&[1, 4, 4, 4], 16),
        probe_array(&[4, 1, 3, 3], 17),
    );
}

#[test]
fn conv2d_matches_hand_computed_value() {
    // 1x1 input channel, 2x2 input, 2x2 kernel, stride 1, no padding.
    let tape = Tape::new();
    let x = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let w = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
    );
    let y = x.conv2d(
        w,
        ConvGeometry {
            stride: 1,
            padding: 0,
            groups: 1,
        },
    );
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.scalar(), 10.0 + 40.0 + 90.0 + 160.0);
}

#[test]
fn resize_bilinear_grads_match_finite_differences() {
    check_unary(
        "upsample 2x",
        |t| t.upsample_2x().sigmoid(),
        probe_array(&[1, 2, 3, 3], 18),
    );
    check_unary(
        "resize 4x",
        |t| t.resize_bilinear(8, 8).sigmoid(),
        probe_array(&[1, 2, 2, 2], 19),
    );
    check_unary(
        "downsample",
        |t| t.resize_bilinear(2, 2).sigmoid(),
        probe_array(&[1, 1, 5, 5], 20),
    );
}

#[test]
fn upsample_2x_of_constant_plane_is_constant() {
    let tape = Tape::new();
    let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 3.25));
    let y = x.upsample_2x();
    assert_eq!(y.shape(), vec![1, 1, 8, 8]);
    for &v in y.value().iter() {
        assert!((v - 3.25).abs() < 1e-12);
    }
}

#[test]
fn params_accumulate_gradients_across_reuse() {
    let mut store = ParamStore::new();
    let pid = store.create("w", ArrayD::from_elem(IxDyn(&[2]), 1.5));
    let tape = Tape::new();
    let w1 = tape.param(&store, pid);
    let w2 = tape.param(&store, pid);
    // loss = sum(w * w) via two separate leaves: d/dw = 2w.
    let loss = w1.mul(w2).sum_all();
    let grads = tape.backward(loss);
    let pg = grads.param_grads(&tape, &store);
    assert_eq!(pg.len(), 1);
    assert_eq!(pg[0].0, pid);
    for &g in pg[0].1.iter() {
        assert!((g - 3.0).abs() < 1e-12);
    }
}

#[test]
fn constants_block_gradient_flow() {
    let tape = Tape::new();
    let x = tape.var(probe_array(&[3], 21));
    let c = tape.constant(probe_array(&[3], 22));
    let loss = x.mul(c).sum_all();
    let grads = tape.backward(loss);
    assert!(grads.wrt(x).is_some());
    assert!(grads.wrt(c).is_none());
    // detach() severs an otherwise differentiable path.
    let tape2 = Tape::new();
    let y = tape2.var(probe_array(&[3], 23));
    let loss2 = y.detach().mul(y).sum_all();
    let g2 = tape2.backward(loss2);
    // Gradient flows only through the non-detached factor: d/dy = detached value.
    let expected = y.value().clone();
    let got = g2.wrt(y).unwrap();
    assert!(max_rel_err(got, &expected) < 1e-12);
}

#[test]
fn one_hot_places_single_unit_per_pixel() {
    let tape = Tape::new();
    let labels =
        ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0u8, 3, 1, 2]).unwrap();
    let oh = one_hot(&tape, &labels, 4, 1);
    assert_eq!(oh.shape(), vec![1, 4, 2, 2]);
    let v = oh.value();
    let sums = v.sum_axis(ndarray::Axis(1));
    for &s in sums.iter() {
        assert_eq!(s, 1.0);
    }
    assert_eq!(v[IxDyn(&[0, 0, 0, 0])], 1.0);
    assert_eq!(v[IxDyn(&[0, 3, 0, 1])], 1.0);
    assert_eq!(v[IxDyn(&[0, 1, 1, 0])], 1.0);
    assert_eq!(v[IxDyn(&[0, 2, 1, 1])], 1.0);
}
