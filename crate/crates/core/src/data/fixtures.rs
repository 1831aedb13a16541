//! Deterministic synthetic fixtures. The toolkit ships no clinical images;
//! these stand in for desk-scale training and evaluation runs.

use super::{ClassPalette, LabeledPair, RgbImage, TissueMask, NUM_CLASSES};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One synthetic wound image: each requested tissue class gets an elliptical
/// blob in its own horizontal band (so every requested class is present),
/// rendered with class-correlated colors plus pixel noise.
pub fn synthetic_pair(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    name: impl Into<String>,
    classes_present: &[u8],
) -> LabeledPair {
    let palette = ClassPalette::default();
    let mut labels = Array2::<u8>::zeros((h, w));
    let bands = classes_present.len().max(1);
    for (slot, &class) in classes_present.iter().enumerate() {
        assert!((1..NUM_CLASSES as u8).contains(&class));
        let band_w = w / bands;
        let x0 = slot * band_w;
        let cx = x0 as f64 + band_w as f64 * rng.random_range(0.3..0.7);
        let cy = h as f64 * rng.random_range(0.3..0.7);
        let rx = band_w as f64 * rng.random_range(0.18..0.4);
        let ry = h as f64 * rng.random_range(0.12..0.3);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / ry.max(1.0);
                let dx = (x as f64 - cx) / rx.max(1.0);
                if dy * dy + dx * dx <= 1.0 {
                    labels[(y, x)] = class;
                }
            }
        }
        // The band construction keeps blobs disjoint; the center pixel
        // guarantees presence even for degenerate radii.
        labels[(cy as usize, cx as usize)] = class;
    }
    let mut pixels = Array3::<u8>::zeros((h, w, 3));
    let base = [38u8, 34, 30];
    for y in 0..h {
        for x in 0..w {
            let class = labels[(y, x)];
            let color = if class == 0 {
                base
            } else {
                let c = palette.color(class).unwrap();
                [
                    (c[0] as f64 * 0.7) as u8 + 40,
                    (c[1] as f64 * 0.7) as u8 + 40,
                    (c[2] as f64 * 0.7) as u8 + 40,
                ]
            };
            for ch in 0..3 {
                let noise: i16 = rng.random_range(-18..=18);
                pixels[(y, x, ch)] = (color[ch] as i16 + noise).clamp(0, 255) as u8;
            }
        }
    }
    LabeledPair {
        image: RgbImage::new(pixels, name),
        mask: TissueMask::new(labels, NUM_CLASSES).unwrap(),
    }
}

/// `n` synthetic pairs with one to three tissue classes each.
pub fn synthetic_dataset(seed: u64, n: usize, h: usize, w: usize) -> Vec<LabeledPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let count = rng.random_range(1..=3usize);
            let mut classes: Vec<u8> = vec![1, 2, 3];
            // Deterministic subset pick.
            while classes.len() > count {
                let drop = rng.random_range(0..classes.len());
                classes.remove(drop);
            }
            synthetic_pair(&mut rng, h, w, format!("synthetic_{i:04}"), &classes)
        })
        .collect()
}

/// 110 pairs whose per-class occurrence counts match the reference tissue
/// distribution exactly: granulation in 93 images, callus in 86, fibrin
/// in 74, every image non-empty.
pub fn table1_like_fixture(seed: u64) -> Vec<LabeledPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..110)
        .map(|i| {
            let mut classes = Vec::new();
            if i >= 36 {
                classes.push(1u8); // fibrin: 110 - 36 = 74
            }
            if i < 93 {
                classes.push(2u8); // granulation: 93
            }
            if i >= 24 {
                classes.push(3u8); // callus: 110 - 24 = 86
            }
            synthetic_pair(&mut rng, 48, 48, format!("fixture_{i:03}"), &classes)
        })
        .collect()
}
