//! Parameterized layers built on the autodiff tape.

use crate::autodiff::{
    kaiming_normal, trunc_normal, ConvGeometry, ParamId, ParamStore, Tape, Tx,
};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Everything a layer needs during a forward pass.
pub struct Fwd<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    pub training: bool,
    /// Present during training when stochastic layers (drop-path) are active.
    pub rng: Option<ChaCha8Rng>,
}

impl<'t, 's> Fwd<'t, 's> {
    pub fn inference(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Fwd {
            tape,
            store,
            training: false,
            rng: None,
        }
    }

    pub fn training(tape: &'t Tape, store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Fwd {
            tape,
            store,
            training: true,
            rng: Some(rng),
        }
    }

    pub fn param(&self, id: ParamId) -> Tx<'t> {
        self.tape.param(self.store, id)
    }
}

/// Dense layer over the last axis. Weight stored `[in, out]`.
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let weight = store.create(
            &format!("{name}.weight"),
            trunc_normal(rng, &[in_features, out_features], 0.02),
        );
        let bias = bias.then(|| {
            store.create(
                &format!("{name}.bias"),
                ArrayD::zeros(IxDyn(&[out_features])),
            )
        });
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    /// `[..., in] -> [..., out]`.
    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        let shape = x.shape();
        let (lead, last) = shape.split_at(shape.len() - 1);
        assert_eq!(last[0], self.in_features, "linear input width");
        let rows: usize = lead.iter().product();
        let flat = x.reshape(&[rows, self.in_features]);
        let w = cx.param(self.weight);
        let mut y = flat.matmul(w);
        if let Some(b) = self.bias {
            let mut bshape = vec![1usize; 1];
            bshape.push(self.out_features);
            y = y.add_b(cx.param(b).reshape(&bshape));
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(self.out_features);
        y.reshape(&out_shape)
    }
}

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geo: ConvGeometry,
        bias: bool,
    ) -> Self {
        assert_eq!(in_channels % geo.groups, 0);
        let weight = store.create(
            &format!("{name}.weight"),
            kaiming_normal(
                rng,
                &[out_channels, in_channels / geo.groups, kernel, kernel],
            ),
        );
        let bias = bias.then(|| {
            store.create(
                &format!("{name}.bias"),
                ArrayD::zeros(IxDyn(&[out_channels])),
            )
        });
        Conv2d {
            weight,
            bias,
            geo,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        let w = cx.param(self.weight);
        let mut y = x.conv2d(w, self.geo);
        if let Some(b) = self.bias {
            y = y.conv_bias(cx.param(b));
        }
        y
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub features: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        let gamma = store.create(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[features])));
        let beta = store.create(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[features])));
        LayerNorm {
            gamma,
            beta,
            eps: 1e-6,
            features,
        }
    }

    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        let shape = x.shape();
        let last = shape.len() - 1;
        assert_eq!(shape[last], self.features, "layer norm width");
        let mean = x.mean_axes(&[last]);
        let centered = x.sub_b(mean);
        let var = centered.mul(centered).mean_axes(&[last]);
        let norm = centered.div_b(var.add_scalar(self.eps).sqrt());
        let mut pshape = vec![1usize; last];
        pshape.push(self.features);
        norm.mul_b(cx.param(self.gamma).reshape(&pshape))
            .add_b(cx.param(self.beta).reshape(&pshape))
    }
}

/// Batch normalization for `[B,C,H,W]`. Batch statistics during training
/// (running buffers updated in place), running statistics at inference.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.create(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])));
        let beta = store.create(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        let running_mean = store.create_buffer(
            &format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_var = store.create_buffer(
            &format!("{name}.running_var"),
            ArrayD::ones(IxDyn(&[channels])),
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        let c = self.channels;
        let pshape = [1, c, 1, 1];
        let (mean, var) = if cx.training {
            let mean = x.mean_axes(&[0, 2, 3]);
            let centered = x.sub_b(mean);
            let var = centered.mul(centered).mean_axes(&[0, 2, 3]);
            self.update_running(cx, &mean, &var, x.shape().iter().product::<usize>() / c);
            (mean, var)
        } else {
            let mean = cx
                .tape
                .constant(cx.store.value(self.running_mean))
                .reshape(&pshape);
            let var = cx
                .tape
                .constant(cx.store.value(self.running_var))
                .reshape(&pshape);
            (mean, var)
        };
        let norm = x.sub_b(mean).div_b(var.add_scalar(self.eps).sqrt());
        norm.mul_b(cx.param(self.gamma).reshape(&pshape))
            .add_b(cx.param(self.beta).reshape(&pshape))
    }

    fn update_running(&self, cx: &Fwd<'_, '_>, mean: &Tx<'_>, var: &Tx<'_>, n: usize) {
        let m = self.momentum;
        let batch_mean = mean.value().iter().cloned().collect::<Vec<_>>();
        // Unbiased variance for the running buffer.
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        let batch_var: Vec<f64> = var.value().iter().map(|&v| v * unbias).collect();
        let mut rm = cx.store.value(self.running_mean);
        let mut rv = cx.store.value(self.running_var);
        for (i, slot) in rm.iter_mut().enumerate() {
            *slot = (1.0 - m) * *slot + m * batch_mean[i];
        }
        for (i, slot) in rv.iter_mut().enumerate() {
            *slot = (1.0 - m) * *slot + m * batch_var[i];
        }
        cx.store.set_value(self.running_mean, rm);
        cx.store.set_value(self.running_var, rv);
    }
}

/// Stochastic depth on a residual branch: per-sample Bernoulli keep mask,
/// rescaled so the expectation is unchanged. Identity at inference or rate 0.
pub fn drop_path<'t>(cx: &mut Fwd<'t, '_>, branch: Tx<'t>, rate: f64) -> Tx<'t> {
    if !cx.training || rate <= 0.0 {
        return branch;
    }
    use rand::Rng;
    let shape = branch.shape();
    let mut mask_shape = vec![1usize; shape.len()];
    mask_shape[0] = shape[0];
    let keep = 1.0 - rate;
    let rng = cx
        .rng
        .as_mut()
        .expect("training forward requires an rng for drop-path");
    let mask = ArrayD::from_shape_simple_fn(IxDyn(&mask_shape), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    branch.mul_b(cx.tape.constant(mask))
}
