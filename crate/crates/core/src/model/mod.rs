//! The hybrid segmentation model: Mix-Transformer encoder, CNN decoder with
//! P-scSE attention, and a 1x1 classification head restored to full
//! resolution.

mod decoder;
mod encoder;

pub use decoder::{CSe, DecoderConfig, DecoderStage, PScse, SSe, SeConfig, SeMode};
pub use encoder::{
    AttentionProbe, EfficientSelfAttention, FeaturePyramid, MitBlock, MitConfig, MitEncoder,
    MixFfn, OverlapPatchEmbed,
};

use crate::autodiff::{ParamStore, Tape, Tx};
use crate::data::{RgbImage, TissueMask};
use crate::error::{Error, Result};
use crate::nn::Fwd;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub encoder: MitConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn b3() -> Self {
        ModelConfig {
            encoder: MitConfig::b3(),
            decoder: DecoderConfig::default(),
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            encoder: MitConfig::tiny(),
            decoder: DecoderConfig::tiny(),
        }
    }
}

/// Per-pixel class logits at the input resolution.
pub struct LogitMap<'t> {
    pub logits: Tx<'t>,
    pub num_classes: usize,
}

pub struct HybridModel {
    pub encoder: MitEncoder,
    stages: Vec<DecoderStage>,
    head: crate::nn::Conv2d,
    pub config: ModelConfig,
}

impl HybridModel {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let encoder = MitEncoder::new(store, rng, "encoder", &config.encoder)?;
        let dims = config.encoder.embed_dims;
        let widths = config.decoder.widths;
        let mut stages = Vec::new();
        // Bottom-up: 1/32 -> 1/16 -> 1/8 -> 1/4 through the three skips.
        let below = [dims[3], widths[0], widths[1]];
        let skips = [dims[2], dims[1], dims[0]];
        for i in 0..3 {
            stages.push(DecoderStage::new(
                store,
                rng,
                &format!("decoder.stage{i}"),
                below[i],
                skips[i],
                widths[i],
                config.decoder.se,
                config.decoder.bn_before_activation,
            ));
        }
        let head = crate::nn::Conv2d::new(
            store,
            rng,
            "decoder.head",
            widths[2],
            config.decoder.num_classes,
            1,
            crate::autodiff::ConvGeometry {
                stride: 1,
                padding: 0,
                groups: 1,
            },
            true,
        );
        Ok(HybridModel {
            encoder,
            stages,
            head,
            config: config.clone(),
        })
    }

    /// Full forward pass: `[B,3,H,W] -> [B,num_classes,H,W]` logits.
    pub fn forward<'t>(&self, cx: &mut Fwd<'t, '_>, image: Tx<'t>) -> Result<LogitMap<'t>> {
        let shape = image.shape();
        let (h, w) = (shape[2], shape[3]);
        let pyramid = self.encoder.forward(cx, image)?;
        let mut x = pyramid.maps[3];
        for (i, stage) in self.stages.iter().enumerate() {
            let skip = pyramid.maps[2 - i];
            x = stage.forward(cx, x, skip)?;
        }
        // 1/4 scale head, then 4x bilinear restore.
        let logits = self.head.forward(cx, x).resize_bilinear(h, w);
        Ok(LogitMap {
            logits,
            num_classes: self.config.decoder.num_classes,
        })
    }

    pub fn decoder_stage(&self, i: usize) -> &DecoderStage {
        &self.stages[i]
    }

    /// Eval-mode pseudo-label prediction: per-pixel argmax of the softmax.
    pub fn predict(&self, store: &ParamStore, images: &[RgbImage]) -> Result<Vec<TissueMask>> {
        let mut out = Vec::with_capacity(images.len());
        for image in images {
            let tape = Tape::new();
            let mut cx = Fwd::inference(&tape, store);
            let input = tape.constant(images_to_tensor(&[image]));
            let logit_map = self.forward(&mut cx, input)?;
            let probs = logit_map.logits.softmax(1);
            out.push(argmax_mask(&probs.value(), 0, logit_map.num_classes)?);
        }
        Ok(out)
    }
}

/// Normalize u8 images into a `[B,3,H,W]` f64 tensor in `[0,1]`.
pub fn images_to_tensor(images: &[&RgbImage]) -> ArrayD<f64> {
    images_to_tensor_impl(images.iter().copied())
}

/// As [`images_to_tensor`] but over owned slices.
pub fn images_to_tensor_owned(images: &[RgbImage]) -> ArrayD<f64> {
    images_to_tensor_impl(images.iter())
}

fn images_to_tensor_impl<'a>(images: impl Iterator<Item = &'a RgbImage> + Clone) -> ArrayD<f64> {
    let first = images.clone().next().expect("at least one image");
    let (h, w) = (first.height(), first.width());
    let b = images.clone().count();
    let mut out = ArrayD::zeros(IxDyn(&[b, 3, h, w]));
    for (bi, image) in images.enumerate() {
        assert_eq!(
            (image.height(), image.width()),
            (h, w),
            "batch images must share dimensions"
        );
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[IxDyn(&[bi, c, y, x])] = image.pixels[(y, x, c)] as f64 / 255.0;
                }
            }
        }
    }
    out
}

/// Stack masks into a `[B,H,W]` u8 label array.
pub fn masks_to_labels(masks: &[&TissueMask]) -> ArrayD<u8> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut out = ArrayD::zeros(IxDyn(&[masks.len(), h, w]));
    for (bi, mask) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[IxDyn(&[bi, y, x])] = mask.labels[(y, x)];
            }
        }
    }
    out
}

/// Per-pixel argmax over the class axis of a `[B,C,H,W]` probability or
/// logit tensor, for one batch element.
pub fn argmax_mask(probs: &ArrayD<f64>, batch: usize, num_classes: usize) -> Result<TissueMask> {
    let shape = probs.shape();
    if shape.len() != 4 {
        return Err(Error::shape_mismatch("argmax_mask", shape, &[0, 0, 0, 0]));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = probs[IxDyn(&[batch, ci, y, x])];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            labels[(y, x)] = best as u8;
        }
    }
    TissueMask::new(labels, num_classes)
}

/// Convenience constructor used across tests and the trainer.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(HybridModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = HybridModel::new(&mut store, &mut rng, config)?;
    Ok((model, store))
}
