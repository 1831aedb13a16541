//! Canonical image/mask representations, palette encoding, canvas padding,
//! dataset splitting and the pool containers used by the trainer.

mod fixtures;
mod io;
mod manifest;

pub use fixtures::{synthetic_dataset, synthetic_pair, table1_like_fixture};
pub use io::{
    decode_indexed, decode_rgb, read_indexed_png, read_rgb_png, write_indexed_png, write_rgb_png,
};
pub use manifest::{Manifest, ManifestEntry, Split};

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

/// An RGB image with a stable name identifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    /// `[H, W, 3]`, channel values 0..=255.
    pub pixels: Array3<u8>,
    pub name: String,
}

impl RgbImage {
    pub fn new(pixels: Array3<u8>, name: impl Into<String>) -> Self {
        let (h, w, c) = pixels.dim();
        assert!(h >= 1 && w >= 1 && c == 3, "image must be HxWx3, H,W >= 1");
        RgbImage {
            pixels,
            name: name.into(),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

/// Per-pixel tissue labels paired with an [`RgbImage`].
///
/// Classes: 0 background, 1 fibrin, 2 granulation, 3 callus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub labels: Array2<u8>,
    pub num_classes: usize,
}

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; 4] = ["background", "fibrin", "granulation", "callus"];

impl TissueMask {
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(TissueMask {
            labels,
            num_classes,
        })
    }

    pub fn height(&self) -> usize {
        self.labels.dim().0
    }

    pub fn width(&self) -> usize {
        self.labels.dim().1
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.labels.iter().any(|&l| l == class)
    }
}

/// Bijective class-index <-> RGB association.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    colors: Vec<[u8; 3]>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        ClassPalette {
            colors: vec![[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]],
        }
    }
}

impl ClassPalette {
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        let unique: HashSet<_> = colors.iter().collect();
        if unique.len() != colors.len() {
            return Err(Error::InvalidConfig(
                "palette colors must be distinct".into(),
            ));
        }
        Ok(ClassPalette { colors })
    }

    pub fn num_classes(&self) -> usize {
        self.colors.len()
    }

    pub fn color(&self, class: u8) -> Result<[u8; 3]> {
        self.colors
            .get(class as usize)
            .copied()
            .ok_or(Error::UnknownLabel {
                label: class,
                num_classes: self.colors.len(),
            })
    }

    pub fn class_of(&self, color: [u8; 3]) -> Option<u8> {
        self.colors.iter().position(|&c| c == color).map(|i| i as u8)
    }

    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }
}

/// Zero-pad an image (and optionally its mask) onto a `side`x`side` canvas,
/// centered, ties toward top-left. The padded region is zero in the image
/// and class 0 in the mask.
pub fn pad_to_canvas(
    image: &RgbImage,
    mask: Option<&TissueMask>,
    side: usize,
) -> Result<(RgbImage, Option<TissueMask>)> {
    let (h, w) = (image.height(), image.width());
    if h > side || w > side {
        return Err(Error::DimensionExceedsCanvas {
            name: image.name.clone(),
            h,
            w,
            side,
        });
    }
    if let Some(m) = mask {
        if m.height() != h || m.width() != w {
            return Err(Error::shape_mismatch(
                "pad_to_canvas mask",
                &[h, w],
                &[m.height(), m.width()],
            ));
        }
    }
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut pixels = Array3::<u8>::zeros((side, side, 3));
    pixels
        .slice_mut(ndarray::s![top..top + h, left..left + w, ..])
        .assign(&image.pixels);
    let padded_mask = mask.map(|m| {
        let mut labels = Array2::<u8>::zeros((side, side));
        labels
            .slice_mut(ndarray::s![top..top + h, left..left + w])
            .assign(&m.labels);
        TissueMask {
            labels,
            num_classes: m.num_classes,
        }
    });
    Ok((
        RgbImage {
            pixels,
            name: image.name.clone(),
        },
        padded_mask,
    ))
}

/// Offsets `(top, left)` that [`pad_to_canvas`] uses for an `h`x`w` input.
pub fn canvas_offsets(h: usize, w: usize, side: usize) -> (usize, usize) {
    ((side - h) / 2, (side - w) / 2)
}

/// Map a color mask to class labels through the palette. Colors outside the
/// palette are an error that lists the offending triples and coordinates.
pub fn encode_mask(color_mask: &Array3<u8>, palette: &ClassPalette) -> Result<TissueMask> {
    let (h, w, c) = color_mask.dim();
    assert_eq!(c, 3, "color mask must be HxWx3");
    let lookup: HashMap<[u8; 3], u8> = palette
        .colors()
        .iter()
        .enumerate()
        .map(|(i, &rgb)| (rgb, i as u8))
        .collect();
    let mut labels = Array2::<u8>::zeros((h, w));
    let mut offenders = String::new();
    let mut offender_count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let rgb = [
                color_mask[(y, x, 0)],
                color_mask[(y, x, 1)],
                color_mask[(y, x, 2)],
            ];
            match lookup.get(&rgb) {
                Some(&class) => labels[(y, x)] = class,
                None => {
                    offender_count += 1;
                    if offender_count <= 8 {
                        let _ = write!(
                            offenders,
                            "{}({},{},{}) at ({},{})",
                            if offender_count > 1 { ", " } else { "" },
                            rgb[0],
                            rgb[1],
                            rgb[2],
                            y,
                            x
                        );
                    }
                }
            }
        }
    }
    if offender_count > 0 {
        if offender_count > 8 {
            let _ = write!(offenders, ", ... {} total", offender_count);
        }
        return Err(Error::UnknownColor(offenders));
    }
    TissueMask::new(labels, palette.num_classes())
}

/// Exact inverse of [`encode_mask`].
pub fn decode_mask(mask: &TissueMask, palette: &ClassPalette) -> Result<Array3<u8>> {
    let (h, w) = mask.labels.dim();
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let rgb = palette.color(mask.labels[(y, x)])?;
            out[(y, x, 0)] = rgb[0];
            out[(y, x, 1)] = rgb[1];
            out[(y, x, 2)] = rgb[2];
        }
    }
    Ok(out)
}

/// Deterministic dataset split sizes and seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl SplitSpec {
    /// 70:15:15 split: both 15% shares floor, remainder goes to train
    /// (110 images -> 78/16/16).
    pub fn from_ratio(total: usize, seed: u64) -> Self {
        let val = total * 15 / 100;
        let test = total * 15 / 100;
        SplitSpec {
            train_count: total - val - test,
            val_count: val,
            test_count: test,
            seed,
        }
    }
}

/// Shuffle deterministically by seed, then partition into train/val/test.
pub fn make_splits<T>(pairs: Vec<T>, spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let total = pairs.len();
    let sum = spec.train_count + spec.val_count + spec.test_count;
    if sum != total {
        return Err(Error::CountMismatch {
            counts: [spec.train_count, spec.val_count, spec.test_count],
            sum,
            total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut slots: Vec<Option<T>> = pairs.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| -> Vec<T> {
        ids.iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(&order[..spec.train_count]);
    let val = take(&order[spec.train_count..spec.train_count + spec.val_count]);
    let test = take(&order[spec.train_count + spec.val_count..]);
    Ok((train, val, test))
}

/// A labeled (image, mask) pair.
#[derive(Clone, Debug)]
pub struct LabeledPair {
    pub image: RgbImage,
    pub mask: TissueMask,
}

/// The pools mutated by the semi-supervised loop: labeled pool, unlabeled
/// pool, the pseudo-label store, the staging pool for the current inner run,
/// the per-run picked-name record, per-run best validation losses, and the
/// best validation loss tracked across rounds (starts at +inf).
#[derive(Debug, Default)]
pub struct DatasetPools {
    pub labeled: Vec<LabeledPair>,
    pub unlabeled: Vec<RgbImage>,
    pub pseudo: BTreeMap<String, TissueMask>,
    pub staged: Vec<(RgbImage, TissueMask)>,
    pub picked_names: Vec<Vec<String>>,
    pub val_losses: Vec<f64>,
    pub tracked_val: f64,
}

impl DatasetPools {
    pub fn new(labeled: Vec<LabeledPair>, unlabeled: Vec<RgbImage>) -> Self {
        DatasetPools {
            labeled,
            unlabeled,
            pseudo: BTreeMap::new(),
            staged: Vec::new(),
            picked_names: Vec::new(),
            val_losses: Vec::new(),
            tracked_val: f64::INFINITY,
        }
    }

    /// Labeled, unlabeled and staged pools must stay pairwise disjoint by
    /// image name.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let all = self
            .labeled
            .iter()
            .map(|p| &p.image.name)
            .chain(self.unlabeled.iter().map(|u| &u.name))
            .chain(self.staged.iter().map(|(img, _)| &img.name));
        for name in all {
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidConfig(format!(
                    "pool disjointness violated: {name} appears twice"
                )));
            }
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.labeled.len() + self.unlabeled.len() + self.staged.len()
    }
}

/// Blend palette colors over the image at the given opacity wherever the
/// mask is foreground; background pixels pass through untouched.
pub fn render_overlay(
    image: &RgbImage,
    mask: &TissueMask,
    palette: &ClassPalette,
    opacity: f64,
) -> Result<Array3<u8>> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape_mismatch(
            "render_overlay",
            &[image.height(), image.width()],
            &[mask.height(), mask.width()],
        ));
    }
    let mut out = image.pixels.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let class = mask.labels[(y, x)];
            if class == 0 {
                continue;
            }
            let color = palette.color(class)?;
            for c in 0..3 {
                let blended =
                    (1.0 - opacity) * image.pixels[(y, x, c)] as f64 + opacity * color[c] as f64;
                out[(y, x, c)] = blended.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(out)
}

/// Number of masks containing at least one pixel of each class.
pub fn count_occurrences<'a>(
    masks: impl IntoIterator<Item = &'a TissueMask>,
    num_classes: usize,
) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for mask in masks {
        for (class, slot) in counts.iter_mut().enumerate() {
            if mask.contains_class(class as u8) {
                *slot += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests;
