//! Command implementations behind the `tissueseg` binary. Everything is a
//! plain function over paths so integration tests can drive commands
//! without spawning processes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tissueseg::augment::{apply as apply_augmentation, minority_oversample};
use tissueseg::config::{fnv1a64, ExperimentConfig};
use tissueseg::data::{
    decode_mask, encode_mask, pad_to_canvas, read_indexed_png, read_rgb_png,
    render_overlay, write_indexed_png, write_rgb_png, ClassPalette, LabeledPair, Manifest,
    ManifestEntry, RgbImage, Split, SplitSpec, TissueMask,
};
use tissueseg::error::{Error, Result};
use tissueseg::metrics::{aggregate_report, confusion_counts, MetricsReport};
use tissueseg::model::build_model;
use tissueseg::raster::{resize_image, resize_mask};
use tissueseg::train::{
    evaluate, round_log_to_csv, train_semi_supervised, train_supervised, write_atomic,
    Checkpoint, HybridSslRunner, LossKind, TrainSession,
};
use tissueseg::data::make_splits;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use tissueseg::error::Error as CliError;

/// Exit code mapped from an error: 2 for a non-finite-loss abort, 3 for an
/// unlabeled-pool underflow, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => 2,
        Error::PoolUnderflow { .. } => 3,
        _ => 1,
    }
}

/// Deterministic mode is the default; setting `TISSUESEG_DETERMINISTIC=0`
/// replaces the configured seed with entropy.
pub fn effective_seed(seed: u64) -> u64 {
    match std::env::var("TISSUESEG_DETERMINISTIC") {
        Ok(v) if v == "0" => rand::random(),
        _ => seed,
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

/// Load a mask for `name` from `masks/` (indexed, authoritative) or
/// `masks_rgb/` (palette colors).
fn load_mask(data_dir: &Path, name: &str, palette: &ClassPalette) -> Result<Option<TissueMask>> {
    let indexed = data_dir.join("masks").join(format!("{name}.png"));
    if indexed.is_file() {
        let (labels, _) = read_indexed_png(&indexed)?;
        return Ok(Some(TissueMask::new(labels, palette.num_classes())?));
    }
    let rgb = data_dir.join("masks_rgb").join(format!("{name}.png"));
    if rgb.is_file() {
        let colors = read_rgb_png(&rgb)?;
        return match encode_mask(&colors, palette) {
            Ok(mask) => Ok(Some(mask)),
            Err(Error::UnknownColor(detail)) => Err(Error::UnknownColor(format!(
                "{}: {detail}",
                rgb.display()
            ))),
            Err(other) => Err(other),
        };
    }
    Ok(None)
}

/// Pad (and encode) one input pair onto the canvas, downscaling first when
/// `resize` allows it.
fn prepare_pair(
    image: RgbImage,
    mask: Option<TissueMask>,
    side: usize,
    resize: bool,
) -> Result<(RgbImage, Option<TissueMask>, (usize, usize))> {
    let original = (image.height(), image.width());
    let (image, mask) = if resize && (image.height() > side || image.width() > side) {
        let (h, w) = (image.height(), image.width());
        let scale = side as f64 / h.max(w) as f64;
        let nh = ((h as f64 * scale).round() as usize).clamp(1, side);
        let nw = ((w as f64 * scale).round() as usize).clamp(1, side);
        let resized = RgbImage::new(resize_image(&image.pixels, nh, nw), image.name.clone());
        let mask = match mask {
            Some(m) => Some(TissueMask::new(
                resize_mask(&m.labels, nh, nw),
                m.num_classes,
            )?),
            None => None,
        };
        (resized, mask)
    } else {
        (image, mask)
    };
    let (padded, padded_mask) = pad_to_canvas(&image, mask.as_ref(), side)?;
    Ok((padded, padded_mask, original))
}

/// `prepare`: pad everything onto the canvas, write indexed + color masks,
/// assign 70:15:15 splits, emit the manifest.
pub fn cmd_prepare(
    in_dir: &Path,
    out_dir: &Path,
    side: usize,
    seed: u64,
    resize: bool,
) -> Result<Manifest> {
    let palette = ClassPalette::default();
    let image_paths = list_pngs(&in_dir.join("images"))?;
    if image_paths.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no labeled images under {}",
            in_dir.join("images").display()
        )));
    }
    for sub in ["images", "masks", "masks_rgb", "unlabeled"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }

    let mut entries = BTreeMap::new();
    let mut labeled_names = Vec::new();
    for path in &image_paths {
        let name = stem(path);
        let image = RgbImage::new(read_rgb_png(path)?, name.clone());
        let mask = load_mask(in_dir, &name, &palette)?.ok_or_else(|| {
            Error::MissingGroundTruth(format!("no mask found for labeled image {name}"))
        })?;
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(Error::shape_mismatch(
                format!("{name} image vs mask"),
                &[image.height(), image.width()],
                &[mask.height(), mask.width()],
            ));
        }
        let (padded, padded_mask, original) = prepare_pair(image, Some(mask), side, resize)?;
        let padded_mask = padded_mask.expect("mask survives preparation");
        write_rgb_png(&out_dir.join("images").join(format!("{name}.png")), &padded.pixels)?;
        write_indexed_png(
            &out_dir.join("masks").join(format!("{name}.png")),
            &padded_mask.labels,
            palette.colors(),
        )?;
        write_rgb_png(
            &out_dir.join("masks_rgb").join(format!("{name}.png")),
            &decode_mask(&padded_mask, &palette)?,
        )?;
        entries.insert(
            format!("{name}.png"),
            ManifestEntry {
                original_height: original.0,
                original_width: original.1,
                split: Split::Train, // overwritten below
                labeled: true,
            },
        );
        labeled_names.push(format!("{name}.png"));
    }

    // Deterministic 70:15:15 assignment over the labeled set.
    let spec = SplitSpec::from_ratio(labeled_names.len(), seed);
    let (train, val, test) = make_splits(labeled_names, &spec)?;
    for (names, split) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
        for name in names {
            entries.get_mut(&name).expect("known entry").split = split;
        }
    }

    for path in list_pngs(&in_dir.join("unlabeled"))? {
        let name = stem(&path);
        let image = RgbImage::new(read_rgb_png(&path)?, name.clone());
        let (padded, _, original) = prepare_pair(image, None, side, resize)?;
        write_rgb_png(
            &out_dir.join("unlabeled").join(format!("{name}.png")),
            &padded.pixels,
        )?;
        entries.insert(
            format!("{name}.png"),
            ManifestEntry {
                original_height: original.0,
                original_width: original.1,
                split: Split::Unlabeled,
                labeled: false,
            },
        );
    }

    let manifest = Manifest {
        side,
        seed,
        config_hash: format!(
            "{:016x}",
            fnv1a64(format!("prepare:{side}:{seed}:{resize}").as_bytes())
        ),
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Load the pairs of one split from a prepared dataset directory.
pub fn load_split(data_dir: &Path, split: Split) -> Result<Vec<LabeledPair>> {
    let palette = ClassPalette::default();
    let manifest = Manifest::load(&data_dir.join("manifest.json"))?;
    let mut out = Vec::new();
    for file in manifest.names_in_split(split) {
        let name = file.trim_end_matches(".png").to_string();
        let image = RgbImage::new(
            read_rgb_png(&data_dir.join("images").join(&file))?,
            name.clone(),
        );
        let mask = load_mask(data_dir, &name, &palette)?
            .ok_or_else(|| Error::MissingGroundTruth(format!("{file} has no mask")))?;
        out.push(LabeledPair { image, mask });
    }
    Ok(out)
}

pub fn load_unlabeled(data_dir: &Path) -> Result<Vec<RgbImage>> {
    let mut out = Vec::new();
    for path in list_pngs(&data_dir.join("unlabeled"))? {
        let name = stem(&path);
        out.push(RgbImage::new(read_rgb_png(&path)?, name));
    }
    Ok(out)
}

/// `train`: supervised phase on the prepared dataset. `init_weights`
/// optionally seeds matching tensors (externally obtained encoder weights);
/// everything else keeps its random initialization.
pub fn cmd_train(
    config: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    init_weights: Option<&Path>,
) -> Result<()> {
    let mut config = config.clone();
    config.seed = effective_seed(config.seed);
    config.normalize();
    let hash = config.hash();
    let train_pairs = load_split(data_dir, Split::Train)?;
    let val_pairs = load_split(data_dir, Split::Val)?;
    let pipeline = config.pipeline();
    let train_pairs = if config.oversample.enabled {
        minority_oversample(
            &train_pairs,
            &config.oversample.target_classes,
            config.oversample.factor,
            &pipeline,
            config.seed,
        )
    } else {
        train_pairs
    };
    let (model, store) = build_model(&config.model, config.seed)?;
    if let Some(base) = init_weights {
        let pretrained = Checkpoint::load(base)?;
        let applied = pretrained.apply_partial(&store)?;
        eprintln!("loaded {applied} pretrained tensors from {}", base.display());
    }
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("config.json"), config.to_json().as_bytes())?;
    let session = TrainSession {
        out_dir: Some(out_dir.to_path_buf()),
        config_hash: hash,
        model_hash: config.model_hash(),
    };
    train_supervised(
        &model,
        &store,
        &train_pairs,
        &val_pairs,
        &config.train,
        &config.loss,
        config.train.augment.then_some(&pipeline),
        &session,
    )?;
    Ok(())
}

/// `ssl-train`: the pseudo-labeling loop from a supervised checkpoint.
pub fn cmd_ssl_train(
    config: &ExperimentConfig,
    data_dir: &Path,
    checkpoint_base: &Path,
    out_dir: &Path,
) -> Result<()> {
    let mut config = config.clone();
    config.seed = effective_seed(config.seed);
    config.normalize();
    let hash = config.hash();
    let labeled = load_split(data_dir, Split::Train)?;
    let val_pairs = load_split(data_dir, Split::Val)?;
    let unlabeled = load_unlabeled(data_dir)?;
    if unlabeled.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no unlabeled images under {}",
            data_dir.join("unlabeled").display()
        )));
    }
    let incoming = Checkpoint::load(checkpoint_base)?;
    check_model_hash(&incoming, &config.model_hash())?;
    let (model, store) = build_model(&config.model, config.seed)?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("config.json"), config.to_json().as_bytes())?;
    let session = TrainSession {
        out_dir: Some(out_dir.to_path_buf()),
        config_hash: hash.clone(),
        model_hash: config.model_hash(),
    };
    let mut runner = HybridSslRunner::new(
        &model,
        &store,
        &incoming,
        val_pairs,
        config.train.clone(),
        config.loss,
        config.train.augment.then(|| config.pipeline()),
        session,
    )?;
    let mut pools = tissueseg::data::DatasetPools::new(labeled, unlabeled);
    let (final_ckpt, log) = train_semi_supervised(&mut pools, &config.ssl, &mut runner)?;
    final_ckpt.save(&out_dir.join("best_ssl"))?;
    let mut csv = format!("# config_hash={} seed={}\n", hash, config.seed);
    csv.push_str(&round_log_to_csv(&log));
    write_atomic(&out_dir.join("rounds.csv"), csv.as_bytes())?;
    Ok(())
}

fn check_model_hash(ckpt: &Checkpoint, model_hash: &str) -> Result<()> {
    if !ckpt.meta.model_hash.is_empty() && ckpt.meta.model_hash != model_hash {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint was produced by model config {}, current model config is {}",
            ckpt.meta.model_hash, model_hash
        )));
    }
    Ok(())
}

/// `infer`: indexed predicted masks plus 50%-opacity overlays.
pub fn cmd_infer(
    config: &ExperimentConfig,
    checkpoint_base: &Path,
    images: &[PathBuf],
    out_dir: &Path,
    overlay_opacity: f64,
) -> Result<()> {
    let mut config = config.clone();
    config.normalize();
    let palette = ClassPalette::default();
    let incoming = Checkpoint::load(checkpoint_base)?;
    check_model_hash(&incoming, &config.model_hash())?;
    let (model, store) = build_model(&config.model, config.seed)?;
    incoming.apply(&store)?;
    std::fs::create_dir_all(out_dir)?;
    for path in images {
        let name = stem(path);
        let raw = RgbImage::new(read_rgb_png(path)?, name.clone());
        let (padded, _, _) = prepare_pair(raw, None, config.data.side, false)?;
        let mask = model
            .predict(&store, std::slice::from_ref(&padded))?
            .remove(0);
        write_indexed_png(
            &out_dir.join(format!("{name}_mask.png")),
            &mask.labels,
            palette.colors(),
        )?;
        let overlay = render_overlay(&padded, &mask, &palette, overlay_opacity)?;
        write_rgb_png(&out_dir.join(format!("{name}_overlay.png")), &overlay)?;
    }
    Ok(())
}

/// `eval`: metrics report over a split with ground truth.
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint_base: &Path,
    data_dir: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let mut config = config.clone();
    config.normalize();
    let hash = config.hash();
    if split == Split::Unlabeled {
        return Err(Error::MissingGroundTruth(
            "the unlabeled split has no ground truth to evaluate against".into(),
        ));
    }
    let pairs = load_split(data_dir, split)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("split {split:?} is empty")));
    }
    let incoming = Checkpoint::load(checkpoint_base)?;
    check_model_hash(&incoming, &config.model_hash())?;
    let (model, store) = build_model(&config.model, config.seed)?;
    incoming.apply(&store)?;

    let images: Vec<RgbImage> = pairs.iter().map(|p| p.image.clone()).collect();
    let preds = model.predict(&store, &images)?;
    let per_image: Vec<_> = preds
        .iter()
        .zip(&pairs)
        .map(|(pred, pair)| {
            confusion_counts(pred, &pair.mask, config.model.decoder.num_classes)
        })
        .collect::<Result<_>>()?;
    let report = aggregate_report(&per_image)?;

    std::fs::create_dir_all(out_dir)?;
    let wrapped = serde_json::json!({
        "config_hash": hash,
        "seed": config.seed,
        "report": &report,
    });
    write_atomic(
        &out_dir.join("report.json"),
        format!("{}\n", serde_json::to_string_pretty(&wrapped)?).as_bytes(),
    )?;
    let mut csv = format!("# config_hash={} seed={}\n", hash, config.seed);
    csv.push_str(&report.to_csv());
    write_atomic(&out_dir.join("report.csv"), csv.as_bytes())?;
    Ok(report)
}

/// `augment-preview`: sample augmented (image, overlay) pairs for
/// inspection.
pub fn cmd_augment_preview(
    config: &ExperimentConfig,
    image_path: &Path,
    mask_path: &Path,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let palette = ClassPalette::default();
    let image = RgbImage::new(read_rgb_png(image_path)?, stem(image_path));
    let (labels, _) = read_indexed_png(mask_path)?;
    let mask = TissueMask::new(labels, palette.num_classes())?;
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape_mismatch(
            "augment-preview pair",
            &[image.height(), image.width()],
            &[mask.height(), mask.width()],
        ));
    }
    let pipeline = config.pipeline();
    std::fs::create_dir_all(out_dir)?;
    for i in 0..count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(tissueseg::augment::derive_seed(seed, i as u64, 0));
        let (aug_image, aug_mask) = apply_augmentation(&pipeline, &image, &mask, &mut rng);
        write_rgb_png(
            &out_dir.join(format!("sample_{i:03}.png")),
            &aug_image.pixels,
        )?;
        let overlay = render_overlay(&aug_image, &aug_mask, &palette, 0.5)?;
        write_rgb_png(
            &out_dir.join(format!("sample_{i:03}_overlay.png")),
            &overlay,
        )?;
    }
    Ok(())
}

/// Shared by tests: evaluate a checkpointed model's loss/IoU on a split.
pub fn eval_loss_iou(
    config: &ExperimentConfig,
    checkpoint_base: &Path,
    data_dir: &Path,
    split: Split,
) -> Result<(f64, f64)> {
    let mut config = config.clone();
    config.normalize();
    let pairs = load_split(data_dir, split)?;
    let incoming = Checkpoint::load(checkpoint_base)?;
    let (model, store) = build_model(&config.model, config.seed)?;
    incoming.apply(&store)?;
    evaluate(
        &model,
        &store,
        &pairs,
        &config.loss,
        LossKind::Supervised,
        config.train.batch_size,
    )
}
