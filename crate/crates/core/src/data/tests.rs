use super::*;
use proptest::prelude::*;
use rand::Rng;

fn test_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("tissueseg_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> TissueMask {
    let labels = Array2::from_shape_fn((h, w), |_| rng.random_range(0..4u8));
    TissueMask::new(labels, NUM_CLASSES).unwrap()
}

#[test]
fn pad_places_70x138_at_93_59() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pixels = Array3::from_shape_fn((70, 138, 3), |_| rng.random::<u8>());
    let image = RgbImage::new(pixels.clone(), "a");
    let (padded, _) = pad_to_canvas(&image, None, 256).unwrap();
    assert_eq!(padded.pixels.dim(), (256, 256, 3));
    assert_eq!(canvas_offsets(70, 138, 256), (93, 59));
    let inner = padded.pixels.slice(ndarray::s![93..93 + 70, 59..59 + 138, ..]);
    assert_eq!(inner, pixels.view());
    // Everything outside the placement is zero.
    let total: u64 = padded.pixels.iter().map(|&v| v as u64).sum();
    let inner_sum: u64 = pixels.iter().map(|&v| v as u64).sum();
    assert_eq!(total, inner_sum);
}

#[test]
fn pad_of_full_canvas_is_identity() {
    let pixels = Array3::from_shape_fn((256, 256, 3), |(y, x, c)| (y + x + c) as u8);
    let image = RgbImage::new(pixels.clone(), "full");
    let (padded, _) = pad_to_canvas(&image, None, 256).unwrap();
    assert_eq!(padded.pixels, pixels);
}

#[test]
fn pad_single_pixel_lands_at_center() {
    let mut pixels = Array3::<u8>::zeros((1, 1, 3));
    pixels[(0, 0, 0)] = 10;
    pixels[(0, 0, 1)] = 20;
    pixels[(0, 0, 2)] = 30;
    let image = RgbImage::new(pixels, "dot");
    let (padded, _) = pad_to_canvas(&image, None, 256).unwrap();
    let nonzero: Vec<_> = padded
        .pixels
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .collect();
    assert_eq!(nonzero.len(), 3);
    assert_eq!(padded.pixels[(127, 127, 0)], 10);
    assert_eq!(padded.pixels[(127, 127, 1)], 20);
    assert_eq!(padded.pixels[(127, 127, 2)], 30);
}

#[test]
fn pad_rejects_oversized_images() {
    let image = RgbImage::new(Array3::zeros((257, 10, 3)), "big");
    match pad_to_canvas(&image, None, 256) {
        Err(Error::DimensionExceedsCanvas { h, side, .. }) => {
            assert_eq!(h, 257);
            assert_eq!(side, 256);
        }
        other => panic!("expected canvas error, got {other:?}"),
    }
}

#[test]
fn pad_preserves_mask_class_pixel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask = random_mask(&mut rng, 33, 21);
    let image = RgbImage::new(Array3::zeros((33, 21, 3)), "m");
    let before: usize = mask.labels.iter().filter(|&&l| l != 0).count();
    let (_, padded) = pad_to_canvas(&image, Some(&mask), 64).unwrap();
    let padded = padded.unwrap();
    let after: usize = padded.labels.iter().filter(|&&l| l != 0).count();
    assert_eq!(before, after);
    assert_eq!(padded.labels.dim(), (64, 64));
}

#[test]
fn encode_all_black_is_all_background() {
    let mask = encode_mask(&Array3::zeros((5, 5, 3)), &ClassPalette::default()).unwrap();
    assert!(mask.labels.iter().all(|&l| l == 0));
}

#[test]
fn encode_green_is_granulation() {
    let mut color = Array3::<u8>::zeros((1, 1, 3));
    color[(0, 0, 1)] = 255;
    let mask = encode_mask(&color, &ClassPalette::default()).unwrap();
    assert_eq!(mask.labels[(0, 0)], 2);
}

#[test]
fn decode_fibrin_is_red() {
    let mask = TissueMask::new(Array2::from_elem((1, 1), 1u8), 4).unwrap();
    let rgb = decode_mask(&mask, &ClassPalette::default()).unwrap();
    assert_eq!(
        [rgb[(0, 0, 0)], rgb[(0, 0, 1)], rgb[(0, 0, 2)]],
        [255, 0, 0]
    );
}

#[test]
fn decode_all_zero_is_black() {
    let mask = TissueMask::new(Array2::zeros((4, 6)), 4).unwrap();
    let rgb = decode_mask(&mask, &ClassPalette::default()).unwrap();
    assert!(rgb.iter().all(|&v| v == 0));
}

#[test]
fn encode_reports_unknown_colors_with_coordinates() {
    let mut color = Array3::<u8>::zeros((2, 2, 3));
    color[(1, 0, 0)] = 7;
    match encode_mask(&color, &ClassPalette::default()) {
        Err(Error::UnknownColor(msg)) => {
            assert!(msg.contains("(7,0,0)"), "{msg}");
            assert!(msg.contains("(1,0)"), "{msg}");
        }
        other => panic!("expected unknown-color error, got {other:?}"),
    }
}

#[test]
fn encode_decode_roundtrip_on_50_random_masks() {
    let palette = ClassPalette::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let mask = random_mask(&mut rng, 13, 17);
        let rgb = decode_mask(&mask, &palette).unwrap();
        let back = encode_mask(&rgb, &palette).unwrap();
        assert_eq!(back, mask);
    }
}

proptest! {
    #[test]
    fn prop_encode_decode_are_mutual_inverses(seed in 0u64..1000, h in 1usize..12, w in 1usize..12) {
        let palette = ClassPalette::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&mut rng, h, w);
        let rgb = decode_mask(&mask, &palette).unwrap();
        let back = encode_mask(&rgb, &palette).unwrap();
        prop_assert_eq!(back, mask);
    }
}

#[test]
fn splits_match_published_sizes() {
    let pairs: Vec<usize> = (0..110).collect();
    let spec = SplitSpec::from_ratio(110, 9);
    assert_eq!((spec.train_count, spec.val_count, spec.test_count), (78, 16, 16));
    let (train, val, test) = make_splits(pairs, &spec).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (78, 16, 16));
    // Disjoint and exhaustive.
    let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..110).collect::<Vec<_>>());
}

#[test]
fn degenerate_split_puts_everything_in_train() {
    let pairs: Vec<usize> = (0..10).collect();
    let spec = SplitSpec {
        train_count: 10,
        val_count: 0,
        test_count: 0,
        seed: 1,
    };
    let (train, val, test) = make_splits(pairs, &spec).unwrap();
    assert_eq!(train.len(), 10);
    assert!(val.is_empty() && test.is_empty());
}

#[test]
fn split_is_deterministic_per_seed() {
    let spec = SplitSpec::from_ratio(40, 1234);
    let a = make_splits((0..40).collect::<Vec<_>>(), &spec).unwrap();
    let b = make_splits((0..40).collect::<Vec<_>>(), &spec).unwrap();
    assert_eq!(a, b);
    let other = SplitSpec { seed: 77, ..spec };
    let c = make_splits((0..40).collect::<Vec<_>>(), &other).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn split_count_mismatch_is_an_error() {
    let spec = SplitSpec {
        train_count: 5,
        val_count: 1,
        test_count: 1,
        seed: 0,
    };
    assert!(matches!(
        make_splits((0..10).collect::<Vec<_>>(), &spec),
        Err(Error::CountMismatch { .. })
    ));
}

#[test]
fn fixture_occurrences_match_reference_distribution() {
    let pairs = table1_like_fixture(5);
    assert_eq!(pairs.len(), 110);
    let counts = count_occurrences(pairs.iter().map(|p| &p.mask), NUM_CLASSES);
    assert_eq!(counts[2], 93, "granulation");
    assert_eq!(counts[3], 86, "callus");
    assert_eq!(counts[1], 74, "fibrin");
}

#[test]
fn pools_detect_duplicate_names() {
    let pair = synthetic_pair(&mut ChaCha8Rng::seed_from_u64(0), 8, 8, "dup", &[2]);
    let img = pair.image.clone();
    let pools = DatasetPools::new(vec![pair], vec![img]);
    assert!(pools.check_disjoint().is_err());
}

#[test]
fn png_roundtrips_rgb_and_indexed() {
    let dir = test_dir("png");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pixels = Array3::from_shape_fn((9, 7, 3), |_| rng.random::<u8>());
    let rgb_path = dir.join("img.png");
    write_rgb_png(&rgb_path, &pixels).unwrap();
    assert_eq!(read_rgb_png(&rgb_path).unwrap(), pixels);

    let mask = random_mask(&mut rng, 9, 7);
    let palette = ClassPalette::default();
    let idx_path = dir.join("mask.png");
    write_indexed_png(&idx_path, &mask.labels, palette.colors()).unwrap();
    let (labels, pal) = read_indexed_png(&idx_path).unwrap();
    assert_eq!(labels, mask.labels);
    assert_eq!(pal, palette.colors());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn manifest_bytes_are_deterministic() {
    let mut entries = std::collections::BTreeMap::new();
    entries.insert(
        "b.png".to_string(),
        ManifestEntry {
            original_height: 70,
            original_width: 138,
            split: Split::Train,
            labeled: true,
        },
    );
    entries.insert(
        "a.png".to_string(),
        ManifestEntry {
            original_height: 89,
            original_width: 127,
            split: Split::Unlabeled,
            labeled: false,
        },
    );
    let manifest = Manifest {
        side: 256,
        seed: 42,
        config_hash: "deadbeef".into(),
        entries,
    };
    let one = manifest.to_json();
    let two = manifest.to_json();
    assert_eq!(one, two);
    let back = Manifest::from_json(&one).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.names_in_split(Split::Train), vec!["b.png".to_string()]);
}
