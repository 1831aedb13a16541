//! Probabilistic four-set augmentation: sets 1–2 hold the affine transforms
//! (applied jointly to image and mask), sets 3–4 the photometric ones
//! (image only) plus perspective. Each transform fires independently with
//! its configured probability, in set order, each set seeing the output of
//! the previous one.

mod transforms;

pub use transforms::{homography_from_corners, Geometry};

use crate::data::{LabeledPair, RgbImage, TissueMask};
use crate::error::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Geometric: applies the same warp to image (bilinear) and mask
    /// (nearest-neighbor).
    Affine,
    /// Image-only; the mask passes through bit-identical.
    Photometric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub name: String,
    pub kind: TransformKind,
    pub probability: f64,
    /// Named parameter ranges `[lo, hi]`, sampled uniformly when the
    /// transform fires.
    #[serde(default)]
    pub params: BTreeMap<String, [f64; 2]>,
}

impl TransformSpec {
    fn range(&self, key: &str, default: [f64; 2]) -> [f64; 2] {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn sample(&self, rng: &mut ChaCha8Rng, key: &str, default: [f64; 2]) -> f64 {
        let [lo, hi] = self.range(key, default);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub sets: Vec<Vec<TransformSpec>>,
}

fn spec(
    name: &str,
    kind: TransformKind,
    probability: f64,
    params: &[(&str, [f64; 2])],
) -> TransformSpec {
    TransformSpec {
        name: name.into(),
        kind,
        probability,
        params: params
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
    }
}

/// The default 15-transform inventory. Flips and shifts carry higher
/// probabilities than scaling and rotation to limit truncation and
/// rounding artifacts.
pub fn build_default_pipeline() -> AugmentationPipeline {
    use TransformKind::*;
    AugmentationPipeline {
        sets: vec![
            vec![
                spec("horizontal_flip", Affine, 0.5, &[]),
                spec("vertical_flip", Affine, 0.5, &[]),
                spec("shift", Affine, 0.5, &[("limit", [-0.1, 0.1])]),
            ],
            vec![
                spec("rotate", Affine, 0.2, &[("degrees", [-15.0, 15.0])]),
                spec("scale", Affine, 0.2, &[("factor", [0.9, 1.1])]),
                spec("transpose", Affine, 0.3, &[]),
            ],
            vec![
                spec("brightness", Photometric, 0.3, &[("delta", [-0.2, 0.2])]),
                spec("contrast", Photometric, 0.3, &[("factor", [0.8, 1.2])]),
                spec("gamma", Photometric, 0.2, &[("gamma", [0.8, 1.2])]),
                spec(
                    "hue_saturation",
                    Photometric,
                    0.2,
                    &[("hue_delta", [-18.0, 18.0]), ("sat_scale", [0.8, 1.2])],
                ),
                spec("perspective", Affine, 0.2, &[("distortion", [0.0, 0.05])]),
            ],
            vec![
                spec("gaussian_blur", Photometric, 0.2, &[("sigma", [0.5, 1.5])]),
                spec("gaussian_noise", Photometric, 0.2, &[("std", [5.0, 20.0])]),
                spec("local_contrast", Photometric, 0.2, &[("amount", [0.2, 0.8])]),
                spec("color_jitter", Photometric, 0.2, &[("factor", [0.9, 1.1])]),
            ],
        ],
    }
}

impl AugmentationPipeline {
    pub fn transform_count(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }

    pub fn transforms(&self) -> impl Iterator<Item = &TransformSpec> {
        self.sets.iter().flatten()
    }

    /// A copy with every probability forced to `p` (0 disables everything,
    /// 1 fires everything).
    pub fn with_uniform_probability(&self, p: f64) -> AugmentationPipeline {
        let mut out = self.clone();
        for t in out.sets.iter_mut().flatten() {
            t.probability = p;
        }
        out
    }

    /// Only the photometric members (mask-preserving by contract).
    pub fn photometric_only(&self) -> AugmentationPipeline {
        AugmentationPipeline {
            sets: self
                .sets
                .iter()
                .map(|s| {
                    s.iter()
                        .filter(|t| t.kind == TransformKind::Photometric)
                        .cloned()
                        .collect()
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pipeline serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Apply one named transform. Affine-kind transforms warp image and mask
/// with identical geometry; photometric ones touch only the image.
fn apply_transform(
    t: &TransformSpec,
    image: &mut RgbImage,
    mask: &mut TissueMask,
    rng: &mut ChaCha8Rng,
) {
    let (h, w) = (image.height(), image.width());
    let geometry = match t.name.as_str() {
        "horizontal_flip" => Some(Geometry::FlipH),
        "vertical_flip" => Some(Geometry::FlipV),
        "transpose" => Some(Geometry::Transpose),
        "shift" => {
            let fy = t.sample(rng, "limit", [-0.1, 0.1]).clamp(-0.5, 0.5);
            let fx = t.sample(rng, "limit", [-0.1, 0.1]).clamp(-0.5, 0.5);
            Some(Geometry::Shift {
                dy: (fy * h as f64).round() as isize,
                dx: (fx * w as f64).round() as isize,
            })
        }
        "rotate" => Some(Geometry::Rotate {
            radians: t.sample(rng, "degrees", [-15.0, 15.0]).to_radians(),
        }),
        "scale" => Some(Geometry::Scale {
            factor: t.sample(rng, "factor", [0.9, 1.1]),
        }),
        "perspective" => {
            let d = t.sample(rng, "distortion", [0.0, 0.05]);
            Some(transforms::sample_perspective(rng, h, w, d))
        }
        _ => None,
    };
    if let Some(geom) = geometry {
        let (pi, pm) = geom.apply(&image.pixels, &mask.labels);
        image.pixels = pi;
        mask.labels = pm;
        return;
    }
    image.pixels = match t.name.as_str() {
        "brightness" => transforms::brightness(&image.pixels, t.sample(rng, "delta", [-0.2, 0.2])),
        "contrast" => transforms::contrast(&image.pixels, t.sample(rng, "factor", [0.8, 1.2])),
        "gamma" => transforms::gamma(&image.pixels, t.sample(rng, "gamma", [0.8, 1.2])),
        "hue_saturation" => {
            let hue = t.sample(rng, "hue_delta", [-18.0, 18.0]);
            let sat = t.sample(rng, "sat_scale", [0.8, 1.2]);
            transforms::hue_saturation(&image.pixels, hue, sat)
        }
        "gaussian_blur" => {
            transforms::gaussian_blur(&image.pixels, t.sample(rng, "sigma", [0.5, 1.5]))
        }
        "gaussian_noise" => {
            let std = t.sample(rng, "std", [5.0, 20.0]);
            transforms::gaussian_noise(&image.pixels, std, rng)
        }
        "local_contrast" => {
            transforms::local_contrast(&image.pixels, t.sample(rng, "amount", [0.2, 0.8]))
        }
        "color_jitter" => {
            let [lo, hi] = t.range("factor", [0.9, 1.1]);
            let mut f = || if hi > lo { rng.random_range(lo..hi) } else { lo };
            let factors = [f(), f(), f()];
            transforms::color_jitter(&image.pixels, factors)
        }
        other => panic!("unknown transform {other:?}"),
    };
}

/// Run the pipeline, returning which transforms fired (in set order).
pub fn apply_traced(
    pipeline: &AugmentationPipeline,
    image: &RgbImage,
    mask: &TissueMask,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, TissueMask, Vec<bool>) {
    assert_eq!(
        (image.height(), image.width()),
        (mask.height(), mask.width()),
        "image/mask dimensions must match"
    );
    let mut image = image.clone();
    let mut mask = mask.clone();
    let mut fired = Vec::with_capacity(pipeline.transform_count());
    for set in &pipeline.sets {
        for t in set {
            let fire = rng.random::<f64>() < t.probability;
            fired.push(fire);
            if fire {
                apply_transform(t, &mut image, &mut mask, rng);
            }
        }
    }
    (image, mask, fired)
}

/// Run the pipeline on an (image, mask) pair. Deterministic given the rng
/// seed.
pub fn apply(
    pipeline: &AugmentationPipeline,
    image: &RgbImage,
    mask: &TissueMask,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, TissueMask) {
    let (i, m, _) = apply_traced(pipeline, image, mask, rng);
    (i, m)
}

/// Stable per-item seed derivation (splitmix64 over the key parts).
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expand a training set by injecting augmented copies of pairs containing
/// the target (minority) classes.
///
/// Pairs containing a target class contribute `factor` augmented copies,
/// re-drawn (up to 5 times, then falling back to the original) until the
/// copy still contains at least one target-class pixel; all other pairs
/// pass through once, unmodified.
pub fn minority_oversample(
    train_pairs: &[LabeledPair],
    target_classes: &[u8],
    factor: usize,
    pipeline: &AugmentationPipeline,
    master_seed: u64,
) -> Vec<LabeledPair> {
    assert!(factor >= 1, "oversampling factor must be >= 1");
    let has_target =
        |mask: &TissueMask| target_classes.iter().any(|&c| mask.contains_class(c));
    let mut out = Vec::new();
    for (i, pair) in train_pairs.iter().enumerate() {
        if !has_target(&pair.mask) {
            out.push(pair.clone());
            continue;
        }
        for copy in 0..factor {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(master_seed, i as u64, copy as u64));
            let mut accepted = None;
            for _attempt in 0..5 {
                let (image, mask) = apply(pipeline, &pair.image, &pair.mask, &mut rng);
                if has_target(&mask) {
                    accepted = Some((image, mask));
                    break;
                }
            }
            let (mut image, mask) =
                accepted.unwrap_or_else(|| (pair.image.clone(), pair.mask.clone()));
            image.name = format!("{}_aug{copy}", pair.image.name);
            out.push(LabeledPair { image, mask });
        }
    }
    out
}

#[cfg(test)]
mod tests;
