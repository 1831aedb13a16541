//! Elementwise, broadcast, shape, reduction and matmul ops on [`Tx`].

use super::{Tape, Tx};
use ndarray::{ArrayD, Axis, Dimension, Ix2, IxDyn, Slice};

fn same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

/// Validate that `rhs` broadcasts to `lhs`: same rank, each dim equal or 1.
fn broadcast_axes(lhs: &[usize], rhs: &[usize], what: &str) -> Vec<usize> {
    assert_eq!(lhs.len(), rhs.len(), "{what}: rank mismatch {lhs:?} vs {rhs:?}");
    let mut axes = Vec::new();
    for (ax, (&l, &r)) in lhs.iter().zip(rhs).enumerate() {
        if r == l {
            continue;
        }
        assert_eq!(r, 1, "{what}: dim {ax} is {r}, expected {l} or 1");
        axes.push(ax);
    }
    axes
}

/// Sum `g` over `axes` keeping dims, producing the gradient of a tensor that
/// was broadcast along those axes.
fn reduce_to(g: &ArrayD<f64>, axes: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    for &ax in axes {
        let summed = out.sum_axis(Axis(ax));
        out = summed.insert_axis(Axis(ax));
    }
    out
}

#[allow(clippy::should_implement_trait)]
impl<'t> Tx<'t> {
    // ---- binary, same shape ----

    pub fn add(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        same_shape(&a, &b, "add");
        let value = a.as_ref() + b.as_ref();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    sink.add(ia, g.clone());
                }
                if nb {
                    sink.add(ib, g.clone());
                }
            }),
        )
    }

    pub fn sub(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        same_shape(&a, &b, "sub");
        let value = a.as_ref() - b.as_ref();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    sink.add(ia, g.clone());
                }
                if nb {
                    sink.add(ib, -g);
                }
            }),
        )
    }

    pub fn mul(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        same_shape(&a, &b, "mul");
        let value = a.as_ref() * b.as_ref();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    sink.add(ia, g * b.as_ref());
                }
                if nb {
                    sink.add(ib, g * a.as_ref());
                }
            }),
        )
    }

    /// Elementwise maximum. Ties route the gradient to `self`.
    pub fn maximum(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        same_shape(&a, &b, "maximum");
        let mut value = a.as_ref().clone();
        value.zip_mut_with(&b, |x, &y| *x = x.max(y));
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&(a.as_ref() - b.as_ref()), |gx, &d| {
                        if d < 0.0 {
                            *gx = 0.0
                        }
                    });
                    sink.add(ia, ga);
                }
                if nb {
                    let mut gb = g.clone();
                    gb.zip_mut_with(&(a.as_ref() - b.as_ref()), |gx, &d| {
                        if d >= 0.0 {
                            *gx = 0.0
                        }
                    });
                    sink.add(ib, gb);
                }
            }),
        )
    }

    // ---- binary with rhs broadcast onto self's shape ----

    pub fn add_b(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        let axes = broadcast_axes(a.shape(), b.shape(), "add_b");
        let value = a.as_ref() + &b.broadcast(a.raw_dim()).unwrap();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    sink.add(ia, g.clone());
                }
                if nb {
                    sink.add(ib, reduce_to(g, &axes));
                }
            }),
        )
    }

    pub fn mul_b(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        let axes = broadcast_axes(a.shape(), b.shape(), "mul_b");
        let value = a.as_ref() * &b.broadcast(a.raw_dim()).unwrap();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    sink.add(ia, g * &b.broadcast(g.raw_dim()).unwrap());
                }
                if nb {
                    sink.add(ib, reduce_to(&(g * a.as_ref()), &axes));
                }
            }),
        )
    }

    pub fn div_b(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        let axes = broadcast_axes(a.shape(), b.shape(), "div_b");
        let value = a.as_ref() / &b.broadcast(a.raw_dim()).unwrap();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                let bb = b.broadcast(g.raw_dim()).unwrap();
                if na {
                    sink.add(ia, g / &bb);
                }
                if nb {
                    let ga = -(g * a.as_ref()) / &(&bb * &bb);
                    sink.add(ib, reduce_to(&ga, &axes));
                }
            }),
        )
    }

    // ---- unary ----

    pub fn neg(self) -> Tx<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.as_ref() * c;
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| sink.add(ia, g * c)),
        )
    }

    pub fn add_scalar(self, c: f64) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.as_ref() + c;
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| sink.add(ia, g.clone())),
        )
    }

    pub fn relu(self) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(|x| x.max(0.0));
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&a, |gx, &x| {
                    if x <= 0.0 {
                        *gx = 0.0
                    }
                });
                sink.add(ia, ga);
            }),
        )
    }

    pub fn sigmoid(self) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = value.clone();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&out, |gx, &s| *gx *= s * (1.0 - s));
                sink.add(ia, ga);
            }),
        )
    }

    pub fn tanh(self) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(f64::tanh);
        let out = value.clone();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&out, |gx, &t| *gx *= 1.0 - t * t);
                sink.add(ia, ga);
            }),
        )
    }

    /// GELU, tanh approximation (forward and backward are consistent).
    pub fn gelu(self) -> Tx<'t> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044_715;
        let a = self.value_rc();
        let value = a.mapv(|x| 0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh()));
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&a, |gx, &x| {
                    let u = K * (x + C * x * x * x);
                    let t = u.tanh();
                    let du = K * (1.0 + 3.0 * C * x * x);
                    *gx *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                sink.add(ia, ga);
            }),
        )
    }

    pub fn exp(self) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(f64::exp);
        let out = value.clone();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| sink.add(ia, g * &out)),
        )
    }

    pub fn ln(self) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(f64::ln);
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| sink.add(ia, g / a.as_ref())),
        )
    }

    pub fn sqrt(self) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(f64::sqrt);
        let out = value.clone();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| sink.add(ia, 0.5 * g / &out)),
        )
    }

    pub fn powf(self, p: f64) -> Tx<'t> {
        if p == 0.0 {
            let shape = self.shape();
            return self.tape().constant(ArrayD::ones(IxDyn(&shape)));
        }
        let a = self.value_rc();
        let value = a.mapv(|x| x.powf(p));
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&a, |gx, &x| *gx *= p * x.powf(p - 1.0));
                sink.add(ia, ga);
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(self, lo: f64, hi: f64) -> Tx<'t> {
        let a = self.value_rc();
        let value = a.mapv(|x| x.clamp(lo, hi));
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut ga = g.clone();
                ga.zip_mut_with(&a, |gx, &x| {
                    if x <= lo || x >= hi {
                        *gx = 0.0
                    }
                });
                sink.add(ia, ga);
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(self, shape: &[usize]) -> Tx<'t> {
        let a = self.value_rc();
        assert_eq!(
            a.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch {:?} -> {shape:?}",
            a.shape()
        );
        let orig = a.shape().to_vec();
        let value = a
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                sink.add(
                    ia,
                    g.clone().into_shape_with_order(IxDyn(&orig)).unwrap(),
                );
            }),
        )
    }

    pub fn permute(self, axes: &[usize]) -> Tx<'t> {
        let a = self.value_rc();
        assert_eq!(axes.len(), a.ndim(), "permute: axes rank mismatch");
        let value = a
            .as_ref()
            .clone()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                sink.add(
                    ia,
                    g.clone()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned(),
                );
            }),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(axis: usize, parts: &[Tx<'t>]) -> Tx<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape();
        let values: Vec<_> = parts.iter().map(|p| p.value_rc()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let meta: Vec<(usize, usize, bool)> = parts
            .iter()
            .map(|p| (p.index(), p.shape()[axis], p.needs_grad()))
            .collect();
        let needs = meta.iter().any(|m| m.2);
        tape.push_op(
            value,
            needs,
            Box::new(move |g, sink| {
                let mut offset = 0usize;
                for &(idx, extent, ng) in &meta {
                    if ng {
                        let part = g
                            .slice_axis(Axis(axis), Slice::from(offset..offset + extent))
                            .to_owned();
                        sink.add(idx, part);
                    }
                    offset += extent;
                }
            }),
        )
    }

    /// Zero-pad along one axis.
    pub fn pad_axis(self, axis: usize, before: usize, after: usize) -> Tx<'t> {
        let a = self.value_rc();
        let mut shape = a.shape().to_vec();
        let orig_extent = shape[axis];
        shape[axis] += before + after;
        let mut value = ArrayD::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(Axis(axis), Slice::from(before..before + orig_extent))
            .assign(&a);
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                sink.add(
                    ia,
                    g.slice_axis(Axis(axis), Slice::from(before..before + orig_extent))
                        .to_owned(),
                );
            }),
        )
    }

    pub fn slice_axis(self, axis: usize, start: usize, len: usize) -> Tx<'t> {
        let a = self.value_rc();
        let orig = a.shape().to_vec();
        let value = a
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut full = ArrayD::zeros(IxDyn(&orig));
                full.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                sink.add(ia, full);
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(self) -> Tx<'t> {
        let a = self.value_rc();
        let shape = a.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let s = *g.iter().next().unwrap();
                sink.add(ia, ArrayD::from_elem(IxDyn(&shape), s));
            }),
        )
    }

    pub fn mean_all(self) -> Tx<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axes`, keeping reduced dims as size 1.
    pub fn sum_axes(self, axes: &[usize]) -> Tx<'t> {
        let a = self.value_rc();
        let value = reduce_to(&a, axes);
        let shape = a.shape().to_vec();
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                sink.add(ia, g.broadcast(IxDyn(&shape)).unwrap().to_owned());
            }),
        )
    }

    pub fn mean_axes(self, axes: &[usize]) -> Tx<'t> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&ax| shape[ax]).product();
        self.sum_axes(axes).scale(1.0 / n as f64)
    }

    /// Max over one axis (keepdim). Gradient routes to the first maximum.
    pub fn max_axis(self, axis: usize) -> Tx<'t> {
        let a = self.value_rc();
        let in_shape = a.shape().to_vec();
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        let mut value = ArrayD::from_elem(IxDyn(&out_shape), f64::NEG_INFINITY);
        let mut argmax: ArrayD<usize> = ArrayD::zeros(IxDyn(&out_shape));
        for (lane, (mut vslot, mut aslot)) in a.lanes(Axis(axis)).into_iter().zip(
            value
                .lanes_mut(Axis(axis))
                .into_iter()
                .zip(argmax.lanes_mut(Axis(axis))),
        ) {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for (i, &x) in lane.iter().enumerate() {
                if x > best {
                    best = x;
                    best_i = i;
                }
            }
            vslot[0] = best;
            aslot[0] = best_i;
        }
        let ia = self.index();
        self.tape().push_op(
            value,
            self.needs_grad(),
            Box::new(move |g, sink| {
                let mut full = ArrayD::zeros(IxDyn(&in_shape));
                for ((mut lane, gslot), aslot) in full
                    .lanes_mut(Axis(axis))
                    .into_iter()
                    .zip(g.lanes(Axis(axis)))
                    .zip(argmax.lanes(Axis(axis)))
                {
                    lane[aslot[0]] = gslot[0];
                }
                sink.add(ia, full);
            }),
        )
    }

    // ---- composite ----

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Tx<'t> {
        // Subtracting the (detached) max leaves the function unchanged.
        let stabilizer = self.max_axis(axis).detach();
        let shifted = self.sub_b(stabilizer);
        let e = shifted.exp();
        let denom = e.sum_axes(&[axis]);
        e.div_b(denom)
    }

    /// Subtract with rhs broadcast onto self's shape.
    pub fn sub_b(self, rhs: Tx<'t>) -> Tx<'t> {
        self.add_b(rhs.neg())
    }

    // ---- matmul ----

    /// 2-D matrix product `[M,K] @ [K,N] -> [M,N]`.
    pub fn matmul(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D");
        assert_eq!(a.shape()[1], b.shape()[0], "matmul inner dim mismatch");
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let value = a2.dot(&b2).into_dyn();
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if na {
                    let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
                    sink.add(ia, g2.dot(&b2.t()).into_dyn());
                }
                if nb {
                    let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
                    sink.add(ib, a2.t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    /// Batched matmul over one leading dim: `[B,M,K] @ [B,K,N] -> [B,M,N]`.
    pub fn bmm(self, rhs: Tx<'t>) -> Tx<'t> {
        let (a, b) = (self.value_rc(), rhs.value_rc());
        assert_eq!(a.ndim(), 3, "bmm lhs must be 3-D");
        assert_eq!(b.ndim(), 3, "bmm rhs must be 3-D");
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
        assert_eq!(bs, bs2, "bmm batch mismatch");
        assert_eq!(k, k2, "bmm inner dim mismatch");
        let mut value = ArrayD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = a
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let bi = b
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            value.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        let (ia, ib) = (self.index(), rhs.index());
        let (na, nb) = (self.needs_grad(), rhs.needs_grad());
        self.tape().push_op(
            value,
            na || nb,
            Box::new(move |g, sink| {
                if na {
                    let mut ga = ArrayD::zeros(IxDyn(&[bs, m, k]));
                    for i in 0..bs {
                        let gi = g
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let bi = b
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    }
                    sink.add(ia, ga);
                }
                if nb {
                    let mut gb = ArrayD::zeros(IxDyn(&[bs, k, n]));
                    for i in 0..bs {
                        let gi = g
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let ai = a
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                    }
                    sink.add(ib, gb);
                }
            }),
        )
    }
}

/// Convenience: build a one-hot constant on a tape from integer labels.
pub fn one_hot<'t>(
    tape: &'t Tape,
    labels: &ndarray::ArrayD<u8>,
    num_classes: usize,
    class_axis: usize,
) -> Tx<'t> {
    let mut shape = labels.shape().to_vec();
    shape.insert(class_axis, num_classes);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (idx, &label) in labels.indexed_iter() {
        let mut full_idx: Vec<usize> = idx.slice().to_vec();
        full_idx.insert(class_axis, label as usize);
        out[IxDyn(&full_idx)] = 1.0;
    }
    tape.constant(out)
}
