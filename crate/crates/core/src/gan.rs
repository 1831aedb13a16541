//! Loss functions of the adversarial semi-supervised baseline, plus a small
//! fully convolutional discriminator sufficient to drive them.
//!
//! The lambda weights here are namespaced away from the segmentation loss
//! lambdas; they weight the adversarial term in the generator objectives.

use crate::autodiff::{ConvGeometry, Tx};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd};
use crate::autodiff::ParamStore;
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanLossWeights {
    /// Adversarial weight in the supervised generator objective.
    pub lambda_adv_supervised: f64,
    /// Adversarial weight in the semi-supervised generator objective.
    pub lambda_adv_semi: f64,
    /// Discriminator-confidence threshold gating the semi-supervised CE.
    pub t_semi: f64,
    pub log_clamp: f64,
}

impl Default for GanLossWeights {
    fn default() -> Self {
        GanLossWeights {
            lambda_adv_supervised: 0.01,
            lambda_adv_semi: 0.1,
            t_semi: 0.2,
            log_clamp: 1e-7,
        }
    }
}

impl GanLossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_semi > 0.0 && self.t_semi < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "t_semi must lie in (0,1), got {}",
                self.t_semi
            )));
        }
        Ok(())
    }
}

fn check_conf_shape(conf: &Tx<'_>, what: &str) -> Result<()> {
    let s = conf.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape_mismatch(what, &s, &[0, 1, 0, 0]));
    }
    Ok(())
}

/// `-sum_{h,w} log(conf)`, averaged over the batch. Zero when the
/// discriminator is fully fooled (conf = 1 everywhere).
pub fn adversarial_loss<'t>(conf: Tx<'t>, log_clamp: f64) -> Result<Tx<'t>> {
    check_conf_shape(&conf, "adversarial_loss")?;
    let b = conf.shape()[0] as f64;
    Ok(conf
        .clamp(log_clamp, 1.0)
        .ln()
        .sum_all()
        .scale(-1.0 / b))
}

/// `BCE(1s, real) + BCE(0s, fake)`, per-pixel mean of each term.
pub fn discriminator_loss<'t>(
    real_conf: Tx<'t>,
    fake_conf: Tx<'t>,
    log_clamp: f64,
) -> Result<Tx<'t>> {
    check_conf_shape(&real_conf, "discriminator_loss real")?;
    check_conf_shape(&fake_conf, "discriminator_loss fake")?;
    let real_term = real_conf.clamp(log_clamp, 1.0).ln().neg().mean_all();
    let fake_term = fake_conf
        .neg()
        .add_scalar(1.0)
        .clamp(log_clamp, 1.0)
        .ln()
        .neg()
        .mean_all();
    Ok(real_term.add(fake_term))
}

/// Supervised generator objective: `ce + lambda * adv`.
pub fn gan_supervised_total<'t>(ce_loss: Tx<'t>, adv_loss: Tx<'t>, lambda: f64) -> Tx<'t> {
    ce_loss.add(adv_loss.scale(lambda))
}

/// Semi-supervised generator objective: `masked_ce + lambda * adv`.
pub fn gan_semi_total<'t>(masked_ce: Tx<'t>, adv_loss: Tx<'t>, lambda: f64) -> Tx<'t> {
    masked_ce.add(adv_loss.scale(lambda))
}

/// Cross-entropy against pseudo-labels summed over exactly the pixels where
/// the discriminator confidence exceeds `t_semi`, averaged over the batch.
/// The indicator mask is a constant: no gradient flows into `conf` here.
pub fn masked_semi_ce<'t>(
    probs: Tx<'t>,
    pseudo_targets: Tx<'t>,
    conf: Tx<'t>,
    t_semi: f64,
    log_clamp: f64,
) -> Result<Tx<'t>> {
    let (ps, ts) = (probs.shape(), pseudo_targets.shape());
    if ps != ts {
        return Err(Error::shape_mismatch("masked_semi_ce", &ps, &ts));
    }
    check_conf_shape(&conf, "masked_semi_ce conf")?;
    if conf.shape()[0] != ps[0] || conf.shape()[2] != ps[2] || conf.shape()[3] != ps[3] {
        return Err(Error::shape_mismatch(
            "masked_semi_ce conf spatial",
            &conf.shape(),
            &ps,
        ));
    }
    let mask_arr: ArrayD<f64> = conf
        .value()
        .mapv(|v| if v > t_semi { 1.0 } else { 0.0 });
    let mask = probs.tape().constant(mask_arr);
    let per_pixel = pseudo_targets
        .mul(probs.clamp(log_clamp, 1.0).ln())
        .sum_axes(&[1])
        .neg();
    let b = ps[0] as f64;
    Ok(per_pixel.mul(mask).sum_all().scale(1.0 / b))
}

/// Strided fully convolutional discriminator: image and prediction are
/// channel-concatenated, four stride-2 convolutions extract features, a head
/// maps to one channel, and the map is resized back to the input resolution
/// and squashed to (0,1).
pub struct FcnDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl FcnDiscriminator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        widths: &[usize],
    ) -> Self {
        assert!(!widths.is_empty());
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.conv{i}"),
                cin,
                w,
                4,
                ConvGeometry {
                    stride: 2,
                    padding: 1,
                    groups: 1,
                },
                true,
            ));
            cin = w;
        }
        let head = Conv2d::new(
            store,
            rng,
            &format!("{name}.head"),
            cin,
            1,
            3,
            ConvGeometry {
                stride: 1,
                padding: 1,
                groups: 1,
            },
            true,
        );
        FcnDiscriminator { convs, head }
    }

    /// Per-pixel confidence map `[B,1,H,W]` for an image/prediction pair.
    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, image: Tx<'t>, prediction: Tx<'t>) -> Tx<'t> {
        let (h, w) = {
            let s = image.shape();
            (s[2], s[3])
        };
        let mut x = Tx::concat(1, &[image, prediction]);
        for conv in &self.convs {
            x = conv.forward(cx, x).relu();
        }
        let logits = self.head.forward(cx, x);
        logits.resize_bilinear(h, w).sigmoid()
    }
}
