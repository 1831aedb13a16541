//! The pseudo-labeling semi-supervised loop.
//!
//! Each outer round predicts pseudo-labels for the whole unlabeled pool,
//! then runs K comparable inner trainings, each on the labeled pool plus a
//! fresh random pick of n pseudo-labeled images, starting from the round's
//! incoming weights. The pick with the lowest best-validation-loss joins
//! the labeled pool for good; the loop stops when a round fails to improve
//! the tracked best validation loss, or after the round budget.

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::supervised::{run_training, LossKind, TrainConfig, TrainSession};
use crate::augment::{derive_seed, AugmentationPipeline};
use crate::autodiff::ParamStore;
use crate::data::{DatasetPools, LabeledPair, RgbImage, TissueMask};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::HybridModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    /// Outer rounds (E).
    pub rounds: usize,
    /// Inner runs per round (K).
    pub runs_per_round: usize,
    /// Images picked per run (n).
    pub pick_count: usize,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            rounds: 10,
            runs_per_round: 5,
            pick_count: 50,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs_per_round < 1 {
            return Err(Error::InvalidConfig("runs_per_round must be >= 1".into()));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundLogEntry {
    pub round: usize,
    pub run: usize,
    /// |L| + n while this run trained.
    pub training_size: usize,
    pub picked: Vec<String>,
    pub best_val_loss: f64,
}

pub fn round_log_to_csv(log: &[RoundLogEntry]) -> String {
    let mut out = String::from("round,run,training_size,best_val_loss,picked\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.round,
            e.run,
            e.training_size,
            e.best_val_loss,
            e.picked.join(";")
        ));
    }
    out
}

/// The training engine the loop drives. The bookkeeping (pools, picks,
/// transfers, termination) lives in [`train_semi_supervised`]; runners only
/// predict, train and manage weight snapshots.
pub trait InnerRunner {
    /// Predict pseudo-labels for every unlabeled image.
    fn pseudo_labels(&mut self, unlabeled: &[RgbImage]) -> Result<BTreeMap<String, TissueMask>>;

    /// A round begins: remember the incoming weights; every run of this
    /// round restarts from them.
    fn begin_round(&mut self, round: usize);

    /// Train once on labeled ∪ staged from the round-start weights and
    /// return the best validation loss of the run.
    fn run(
        &mut self,
        round: usize,
        run: usize,
        labeled: &[LabeledPair],
        staged: &[LabeledPair],
    ) -> Result<f64>;

    /// Adopt the winning run's weights as the next round's starting point.
    fn commit_winner(&mut self, round: usize, winning_run: usize) -> Result<()>;

    /// The checkpoint to return when the loop ends.
    fn final_checkpoint(&mut self) -> Result<Checkpoint>;
}

/// Draw `n` distinct indices from `0..len`, deterministic in the rng.
fn sample_indices(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    let mut picked: Vec<usize> = all.into_iter().take(n).collect();
    picked.sort_unstable();
    picked
}

/// Move the picked images out of the unlabeled pool into the staging pool,
/// remembering their original positions for exact restoration.
fn stage_picks(
    pools: &mut DatasetPools,
    picks: &[usize],
) -> Result<Vec<(usize, String)>> {
    let mut order = Vec::with_capacity(picks.len());
    // Remove back-to-front so earlier indices stay valid.
    for &idx in picks.iter().rev() {
        let image = pools.unlabeled.remove(idx);
        let name = image.name.clone();
        let mask = pools
            .pseudo
            .get(&name)
            .cloned()
            .ok_or_else(|| Error::MissingGroundTruth(format!("no pseudo-label for {name}")))?;
        pools.staged.push((image, mask));
        order.push((idx, name));
    }
    order.reverse();
    Ok(order)
}

/// Empty the staging pool back into the unlabeled pool at the exact
/// positions the images came from.
fn unstage(pools: &mut DatasetPools, order: &[(usize, String)]) {
    for (idx, name) in order {
        let pos = pools
            .staged
            .iter()
            .position(|(img, _)| &img.name == name)
            .expect("staged image present");
        let (image, _) = pools.staged.remove(pos);
        pools.unlabeled.insert(*idx, image);
    }
}

/// The outer/inner iteration with its pool bookkeeping.
pub fn train_semi_supervised(
    pools: &mut DatasetPools,
    cfg: &SslConfig,
    runner: &mut dyn InnerRunner,
) -> Result<(Checkpoint, Vec<RoundLogEntry>)> {
    cfg.validate()?;
    pools.check_disjoint()?;
    let mut log: Vec<RoundLogEntry> = Vec::new();

    for round in 1..=cfg.rounds {
        if pools.unlabeled.len() < cfg.pick_count {
            return Err(Error::PoolUnderflow {
                available: pools.unlabeled.len(),
                requested: cfg.pick_count,
            });
        }
        // (a) predict labels for everything currently unlabeled.
        pools.pseudo = runner.pseudo_labels(&pools.unlabeled)?;
        runner.begin_round(round);
        pools.val_losses.clear();
        pools.picked_names.clear();
        let mut round_picks: Vec<Vec<(usize, String)>> = Vec::new();

        for run in 1..=cfg.runs_per_round {
            // (b.i) pick n at random, without replacement within the run;
            // staging is undone between runs so picks are i.i.d. across
            // the K runs of a round.
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                round as u64,
                run as u64,
            ));
            let picks = sample_indices(&mut rng, pools.unlabeled.len(), cfg.pick_count);
            let order = stage_picks(pools, &picks)?;
            pools.check_disjoint()?;
            let names: Vec<String> = order.iter().map(|(_, n)| n.clone()).collect();
            // (b.ii) record the picked names.
            pools.picked_names.push(names.clone());

            // (b.iii/iv) train on L ∪ T2, record the best validation loss.
            let staged_pairs: Vec<LabeledPair> = pools
                .staged
                .iter()
                .map(|(image, mask)| LabeledPair {
                    image: image.clone(),
                    mask: mask.clone(),
                })
                .collect();
            let training_size = pools.labeled.len() + staged_pairs.len();
            let best_val = runner.run(round, run, &pools.labeled, &staged_pairs)?;
            pools.val_losses.push(best_val);
            log.push(RoundLogEntry {
                round,
                run,
                training_size,
                picked: names,
                best_val_loss: best_val,
            });

            // (b.v) empty T2.
            unstage(pools, &order);
            pools.check_disjoint()?;
            round_picks.push(order);
        }

        // (d/e) the run with the minimum validation loss (first on ties).
        let (winner, &min_val_loss) = pools
            .val_losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("at least one run per round");

        // (f) transfer the winning batch from U (with its pseudo-labels
        // from T1) into L.
        let winning_names: Vec<String> = round_picks[winner]
            .iter()
            .map(|(_, n)| n.clone())
            .collect();
        for name in &winning_names {
            let pos = pools
                .unlabeled
                .iter()
                .position(|img| &img.name == name)
                .expect("winning image still unlabeled");
            let image = pools.unlabeled.remove(pos);
            let mask = pools
                .pseudo
                .remove(name)
                .expect("pseudo-label for winning image");
            pools.labeled.push(LabeledPair { image, mask });
        }
        runner.commit_winner(round, winner)?;
        pools.check_disjoint()?;

        // (h/i) stop when the round failed to improve the tracked best.
        if pools.tracked_val > min_val_loss {
            pools.tracked_val = min_val_loss;
        } else {
            pools.pseudo.clear();
            pools.val_losses.clear();
            pools.picked_names.clear();
            return Ok((runner.final_checkpoint()?, log));
        }

        // (j) empty T1, VL, R for the next round.
        pools.pseudo.clear();
        pools.val_losses.clear();
        pools.picked_names.clear();
    }
    Ok((runner.final_checkpoint()?, log))
}

/// Pseudo-label generation as a standalone step: per-image argmax of the
/// model's softmax.
pub fn generate_pseudo_labels(
    model: &HybridModel,
    store: &ParamStore,
    unlabeled: &[RgbImage],
) -> Result<BTreeMap<String, TissueMask>> {
    let masks = model.predict(store, unlabeled)?;
    Ok(unlabeled
        .iter()
        .zip(masks)
        .map(|(img, mask)| (img.name.clone(), mask))
        .collect())
}

/// The real runner: trains the hybrid model with the semi-supervised loss,
/// restarting every inner run from the round's incoming weights and
/// carrying the winning run's weights forward.
type WeightSnapshot = Vec<(String, Rc<ndarray::ArrayD<f64>>)>;

pub struct HybridSslRunner<'m> {
    pub model: &'m HybridModel,
    pub store: &'m ParamStore,
    pub val_pairs: Vec<LabeledPair>,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub pipeline: Option<AugmentationPipeline>,
    pub session: TrainSession,
    round_start: WeightSnapshot,
    run_snapshots: Vec<(f64, WeightSnapshot, CheckpointMeta)>,
    best: Option<Checkpoint>,
}

impl<'m> HybridSslRunner<'m> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'m HybridModel,
        store: &'m ParamStore,
        incoming: &Checkpoint,
        val_pairs: Vec<LabeledPair>,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig,
        pipeline: Option<AugmentationPipeline>,
        session: TrainSession,
    ) -> Result<Self> {
        incoming.apply(store)?;
        Ok(HybridSslRunner {
            model,
            store,
            val_pairs,
            train_cfg,
            loss_cfg,
            pipeline,
            session,
            round_start: store.snapshot(),
            run_snapshots: Vec::new(),
            best: Some(incoming.clone()),
        })
    }
}

impl InnerRunner for HybridSslRunner<'_> {
    fn pseudo_labels(&mut self, unlabeled: &[RgbImage]) -> Result<BTreeMap<String, TissueMask>> {
        generate_pseudo_labels(self.model, self.store, unlabeled)
    }

    fn begin_round(&mut self, _round: usize) {
        self.round_start = self.store.snapshot();
        self.run_snapshots.clear();
    }

    fn run(
        &mut self,
        round: usize,
        run: usize,
        labeled: &[LabeledPair],
        staged: &[LabeledPair],
    ) -> Result<f64> {
        // Comparable runs: always restart from the round's incoming weights.
        self.store.restore(&self.round_start);
        let mut pooled: Vec<LabeledPair> = labeled.to_vec();
        pooled.extend(staged.iter().cloned());
        let mut cfg = self.train_cfg.clone();
        cfg.seed = derive_seed(self.train_cfg.seed, round as u64, run as u64);
        let outcome = run_training(
            self.model,
            self.store,
            &pooled,
            &self.val_pairs,
            &cfg,
            &self.loss_cfg,
            self.pipeline.as_ref(),
            LossKind::SemiSupervised,
            &TrainSession {
                out_dir: None,
                config_hash: self.session.config_hash.clone(),
                model_hash: self.session.model_hash.clone(),
            },
        )?;
        // Keep the run's best weights so the winner can be adopted.
        let snapshot: WeightSnapshot = outcome
            .checkpoint
            .weights
            .iter()
            .map(|(n, a)| (n.clone(), Rc::new(a.clone())))
            .collect();
        let loss = outcome.checkpoint.meta.val_loss;
        self.run_snapshots
            .push((loss, snapshot, outcome.checkpoint.meta.clone()));
        Ok(loss)
    }

    fn commit_winner(&mut self, _round: usize, winning_run: usize) -> Result<()> {
        let (loss, snapshot, meta) = self.run_snapshots[winning_run].clone();
        self.store.restore(&snapshot);
        self.round_start = snapshot.clone();
        let improved = self
            .best
            .as_ref()
            .map(|b| loss < b.meta.val_loss)
            .unwrap_or(true);
        if improved {
            let weights: Vec<(String, ndarray::ArrayD<f64>)> = snapshot
                .iter()
                .map(|(n, a)| (n.clone(), a.as_ref().clone()))
                .collect();
            let ckpt = Checkpoint { weights, meta };
            if let Some(dir) = &self.session.out_dir {
                std::fs::create_dir_all(dir)?;
                ckpt.save(&dir.join("best_ssl"))?;
            }
            self.best = Some(ckpt);
        }
        Ok(())
    }

    fn final_checkpoint(&mut self) -> Result<Checkpoint> {
        self.best
            .clone()
            .ok_or_else(|| Error::InvalidCheckpoint("no checkpoint recorded".into()))
    }
}
