//! The epoch loop: minibatch training with on-the-fly augmentation,
//! dual-criterion checkpointing (validation loss down OR validation IoU up)
//! and early stopping.

use super::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use super::early_stop::{EarlyStopper, Verdict};
use super::optim::{Optimizer, OptimizerKind, Scheduler, SchedulerKind};
use crate::augment::{apply as apply_augmentation, derive_seed, AugmentationPipeline};
use crate::autodiff::{one_hot, ParamStore, Tape};
use crate::data::LabeledPair;
use crate::error::{Error, Result};
use crate::loss::{semi_supervised_loss, supervised_loss, LossConfig};
use crate::metrics::{confusion_counts, ConfusionCounts};
use crate::model::{argmax_mask, images_to_tensor, masks_to_labels, HybridModel};
use crate::nn::Fwd;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub scheduler: SchedulerKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    /// Apply the augmentation pipeline to training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 16,
            patience: 50,
            weight_decay: 1e-5,
            scheduler: SchedulerKind::ReduceOnPlateau,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience > self.epochs {
            return Err(Error::InvalidConfig(format!(
                "patience {} exceeds epoch budget {}",
                self.patience, self.epochs
            )));
        }
        Ok(())
    }
}

/// Which objective drives an epoch loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Supervised,
    SemiSupervised,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub lr: f64,
}

pub fn epochs_to_csv(epochs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_iou,lr\n");
    for e in epochs {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_loss, e.val_iou, e.lr
        ));
    }
    out
}

/// Where to persist run artifacts; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainSession {
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    pub model_hash: String,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
}

/// One batch forward: logits -> softmax -> loss of the configured kind.
fn batch_loss<'t>(
    model: &HybridModel,
    cx: &mut Fwd<'t, '_>,
    pairs: &[&LabeledPair],
    loss_cfg: &LossConfig,
    kind: LossKind,
) -> Result<(crate::autodiff::Tx<'t>, Vec<ConfusionCounts>)> {
    let images: Vec<&crate::data::RgbImage> = pairs.iter().map(|p| &p.image).collect();
    let input = cx.tape.constant(images_to_tensor(&images));
    let logit_map = model.forward(cx, input)?;
    let probs = logit_map.logits.softmax(1);
    let masks: Vec<&crate::data::TissueMask> = pairs.iter().map(|p| &p.mask).collect();
    let labels = masks_to_labels(&masks);
    let targets = one_hot(cx.tape, &labels, logit_map.num_classes, 1);
    let loss = match kind {
        LossKind::Supervised => supervised_loss(probs, targets, loss_cfg)?,
        LossKind::SemiSupervised => semi_supervised_loss(probs, targets, loss_cfg)?,
    };
    // Confusion of the argmax predictions against the batch labels.
    let probs_val = probs.value();
    let mut counts = Vec::with_capacity(pairs.len());
    for (bi, pair) in pairs.iter().enumerate() {
        let pred = argmax_mask(&probs_val, bi, logit_map.num_classes)?;
        counts.push(confusion_counts(&pred, &pair.mask, logit_map.num_classes)?);
    }
    Ok((loss, counts))
}

/// Validation pass: mean loss plus micro foreground IoU.
pub fn evaluate(
    model: &HybridModel,
    store: &ParamStore,
    pairs: &[LabeledPair],
    loss_cfg: &LossConfig,
    kind: LossKind,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("evaluate over zero pairs".into()));
    }
    let mut total_loss = 0.0;
    let mut total = ConfusionCounts::zeros(model.config.decoder.num_classes);
    for chunk in pairs.chunks(batch_size.max(1)) {
        let tape = Tape::new();
        let mut cx = Fwd::inference(&tape, store);
        let refs: Vec<&LabeledPair> = chunk.iter().collect();
        let (loss, counts) = batch_loss(model, &mut cx, &refs, loss_cfg, kind)?;
        total_loss += loss.scalar() * chunk.len() as f64;
        for c in &counts {
            total.merge(c);
        }
    }
    let (tp, fp, fneg) = total.foreground_totals();
    let iou = crate::metrics::metrics_for(tp, fp, fneg).iou;
    Ok((total_loss / pairs.len() as f64, iou))
}

/// Micro foreground DSC of the model's argmax predictions over a set.
pub fn evaluate_dsc(model: &HybridModel, store: &ParamStore, pairs: &[LabeledPair]) -> Result<f64> {
    let images: Vec<crate::data::RgbImage> = pairs.iter().map(|p| p.image.clone()).collect();
    let preds = model.predict(store, &images)?;
    let mut total = ConfusionCounts::zeros(model.config.decoder.num_classes);
    for (pred, pair) in preds.iter().zip(pairs) {
        total.merge(&confusion_counts(
            pred,
            &pair.mask,
            model.config.decoder.num_classes,
        )?);
    }
    let (tp, fp, fneg) = total.foreground_totals();
    Ok(crate::metrics::metrics_for(tp, fp, fneg).dsc)
}

/// The shared epoch loop behind both training phases.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    model: &HybridModel,
    store: &ParamStore,
    train_pairs: &[LabeledPair],
    val_pairs: &[LabeledPair],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    pipeline: Option<&AugmentationPipeline>,
    kind: LossKind,
    session: &TrainSession,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if val_pairs.is_empty() {
        return Err(Error::EmptyDataset("validation set is empty".into()));
    }
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay);
    let mut scheduler = Scheduler::new(cfg.scheduler, cfg.learning_rate, cfg.epochs);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<Checkpoint> = None;
    let mut epochs = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // Augmented copies live only for this batch.
            let materialized: Vec<LabeledPair> = batch
                .iter()
                .map(|&i| {
                    let pair = &train_pairs[i];
                    match (cfg.augment, pipeline) {
                        (true, Some(p)) => {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                                cfg.seed,
                                (epoch as u64) << 20 | 2,
                                i as u64,
                            ));
                            let (image, mask) = apply_augmentation(p, &pair.image, &pair.mask, &mut rng);
                            LabeledPair { image, mask }
                        }
                        _ => pair.clone(),
                    }
                })
                .collect();
            let refs: Vec<&LabeledPair> = materialized.iter().collect();

            let tape = Tape::new();
            let branch_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                (epoch as u64) << 20 | 3,
                batch_idx as u64,
            ));
            let mut cx = Fwd::training(&tape, store, branch_rng);
            let (loss, _) = batch_loss(model, &mut cx, &refs, loss_cfg, kind)?;
            let loss_value = loss.scalar();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    value: loss_value,
                });
            }
            epoch_loss += loss_value * refs.len() as f64;
            let grads = tape.backward(loss);
            let param_grads = grads.param_grads(&tape, store);
            optimizer.step(store, &param_grads);
        }
        let train_loss = epoch_loss / train_pairs.len() as f64;

        let (val_loss, val_iou) = evaluate(model, store, val_pairs, loss_cfg, kind, cfg.batch_size)?;
        epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_iou,
            lr: optimizer.lr,
        });

        let verdict = stopper.observe(epoch, val_loss, val_iou);
        if verdict == Verdict::Improved {
            let ckpt = Checkpoint::from_store(
                store,
                CheckpointMeta {
                    epoch,
                    val_loss,
                    val_iou,
                    config_hash: session.config_hash.clone(),
                    model_hash: session.model_hash.clone(),
                },
            );
            if let Some(dir) = &session.out_dir {
                std::fs::create_dir_all(dir)?;
                ckpt.save(&dir.join("best"))?;
            }
            best = Some(ckpt);
        }
        optimizer.lr = scheduler.observe(epoch, val_loss);
        if verdict == Verdict::Stop {
            break;
        }
    }

    if let Some(dir) = &session.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = format!(
            "# config_hash={} seed={}\n",
            session.config_hash, cfg.seed
        );
        csv.push_str(&epochs_to_csv(&epochs));
        write_atomic(&dir.join("epochs.csv"), csv.as_bytes())?;
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("epoch 1 always improves on +inf"),
        epochs,
    })
}

/// Supervised phase: dice + focal on labeled pairs.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    model: &HybridModel,
    store: &ParamStore,
    train_pairs: &[LabeledPair],
    val_pairs: &[LabeledPair],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    pipeline: Option<&AugmentationPipeline>,
    session: &TrainSession,
) -> Result<TrainOutcome> {
    run_training(
        model,
        store,
        train_pairs,
        val_pairs,
        cfg,
        loss_cfg,
        pipeline,
        LossKind::Supervised,
        session,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    /// A constant-output stub: learning rate 0 freezes the weights, and
    /// zeroed BatchNorm scales make the eval path independent of the
    /// running statistics that training forwards keep updating. With
    /// patience 2 the loop runs exactly epochs 1..=3 and keeps the epoch-1
    /// checkpoint.
    #[test]
    fn constant_val_loss_stops_after_patience() {
        let pairs = crate::data::synthetic_dataset(7, 3, 32, 32);
        let (model, store) = build_model(&ModelConfig::tiny(), 3).unwrap();
        for pid in store.ids().collect::<Vec<_>>() {
            if store.name(pid).ends_with(".bn.gamma") {
                let shape = store.value(pid).shape().to_vec();
                store.set_value(pid, ndarray::ArrayD::zeros(ndarray::IxDyn(&shape)));
            }
        }
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 2,
            patience: 2,
            learning_rate: 0.0,
            augment: false,
            ..TrainConfig::default()
        };
        let outcome = run_training(
            &model,
            &store,
            &pairs[..2],
            &pairs[2..],
            &cfg,
            &LossConfig::default(),
            None,
            LossKind::Supervised,
            &TrainSession::default(),
        )
        .unwrap();
        assert_eq!(outcome.epochs.len(), 3, "stops at epoch 3");
        assert_eq!(outcome.checkpoint.meta.epoch, 1);
        let first = outcome.epochs[0].val_loss;
        for e in &outcome.epochs {
            assert!((e.val_loss - first).abs() < 1e-12, "val loss constant");
        }
    }

    #[test]
    fn training_rejects_empty_sets_and_bad_configs() {
        let pairs = crate::data::synthetic_dataset(8, 2, 32, 32);
        let (model, store) = build_model(&ModelConfig::tiny(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            patience: 1,
            augment: false,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_supervised(
                &model,
                &store,
                &[],
                &pairs,
                &cfg,
                &LossConfig::default(),
                None,
                &TrainSession::default()
            ),
            Err(Error::EmptyDataset(_))
        ));
        let bad = TrainConfig {
            epochs: 2,
            patience: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
