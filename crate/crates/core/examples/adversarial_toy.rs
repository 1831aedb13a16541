//! Toy adversarial training loop over the GAN-baseline losses: a tiny
//! hybrid generator against the FCN discriminator on synthetic data, a few
//! alternating steps each phase. Desk-scale demonstration, not a benchmark.
//!
//! Run with: cargo run --release -p tissueseg --example adversarial_toy

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tissueseg::autodiff::{one_hot, ParamStore, Tape};
use tissueseg::data::synthetic_dataset;
use tissueseg::gan::{
    adversarial_loss, discriminator_loss, gan_semi_total, gan_supervised_total, masked_semi_ce,
    FcnDiscriminator, GanLossWeights,
};
use tissueseg::loss::cross_entropy;
use tissueseg::model::{argmax_mask, images_to_tensor_owned, masks_to_labels, HybridModel, ModelConfig};
use tissueseg::nn::Fwd;
use tissueseg::train::{Optimizer, OptimizerKind};

fn main() -> tissueseg::Result<()> {
    let weights = GanLossWeights::default();
    let labeled = synthetic_dataset(1, 4, 32, 32);
    let unlabeled = synthetic_dataset(2, 4, 32, 32);

    let mut gen_store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let generator = HybridModel::new(&mut gen_store, &mut rng, &ModelConfig::tiny())?;
    let mut disc_store = ParamStore::new();
    // Pair = image (3) + prediction (4 classes), channel-concatenated.
    let disc = FcnDiscriminator::new(&mut disc_store, &mut rng, "disc", 7, &[8, 12, 16, 24]);

    let mut gen_opt = Optimizer::new(OptimizerKind::Adam, 1e-3, 1e-5);
    let mut disc_opt = Optimizer::new(OptimizerKind::Adam, 1e-3, 0.0);

    let images = images_to_tensor_owned(
        &labeled.iter().map(|p| p.image.clone()).collect::<Vec<_>>(),
    );
    let masks: Vec<&tissueseg::data::TissueMask> = labeled.iter().map(|p| &p.mask).collect();
    let labels = masks_to_labels(&masks);
    let unlabeled_images = images_to_tensor_owned(
        &unlabeled.iter().map(|p| p.image.clone()).collect::<Vec<_>>(),
    );

    // Supervised phase: generator takes CE + lambda1 * adversarial; the
    // discriminator separates (image, ground truth) from (image, prediction).
    for step in 0..3 {
        let tape = Tape::new();
        let mut cx = Fwd::inference(&tape, &gen_store);
        let x = tape.constant(images.clone());
        let probs = generator.forward(&mut cx, x)?.logits.softmax(1);
        let targets = one_hot(&tape, &labels, 4, 1);

        let dcx = Fwd::inference(&tape, &disc_store);
        let fake_conf = disc.forward(&dcx, x, probs);
        let ce = cross_entropy(probs, targets, weights.log_clamp)?;
        let adv = adversarial_loss(fake_conf, weights.log_clamp)?;
        let gen_loss = gan_supervised_total(ce, adv, weights.lambda_adv_supervised);
        let grads = tape.backward(gen_loss);
        gen_opt.step(&gen_store, &grads.param_grads(&tape, &gen_store));

        // Discriminator step on fresh forward passes (detached generator).
        let tape = Tape::new();
        let dcx = Fwd::inference(&tape, &disc_store);
        let mut gcx = Fwd::inference(&tape, &gen_store);
        let x = tape.constant(images.clone());
        let probs = generator.forward(&mut gcx, x)?.logits.softmax(1).detach();
        let targets = one_hot(&tape, &labels, 4, 1);
        let real_conf = disc.forward(&dcx, x, targets);
        let fake_conf = disc.forward(&dcx, x, probs);
        let d_loss = discriminator_loss(real_conf, fake_conf, weights.log_clamp)?;
        let grads = tape.backward(d_loss);
        disc_opt.step(&disc_store, &grads.param_grads(&tape, &disc_store));

        println!(
            "supervised step {step}: gen {:.4} disc {:.4}",
            gen_loss.scalar(),
            d_loss.scalar()
        );
    }

    // Semi-supervised phase: frozen discriminator gates a pseudo-label CE.
    for step in 0..3 {
        let tape = Tape::new();
        let mut cx = Fwd::inference(&tape, &gen_store);
        let x = tape.constant(unlabeled_images.clone());
        let probs = generator.forward(&mut cx, x)?.logits.softmax(1);
        // Hard pseudo-labels from the current prediction.
        let mut pseudo = ndarray::ArrayD::<u8>::zeros(ndarray::IxDyn(&[4, 32, 32]));
        {
            let pv = probs.value();
            for b in 0..4 {
                let mask = argmax_mask(&pv, b, 4)?;
                for y in 0..32 {
                    for xx in 0..32 {
                        pseudo[ndarray::IxDyn(&[b, y, xx])] = mask.labels[(y, xx)];
                    }
                }
            }
        }
        let pseudo_targets = one_hot(&tape, &pseudo, 4, 1);
        let dcx = Fwd::inference(&tape, &disc_store);
        let conf = disc.forward(&dcx, x, probs).detach();
        let semi = masked_semi_ce(probs, pseudo_targets, conf, weights.t_semi, weights.log_clamp)?;
        let adv = adversarial_loss(disc.forward(&dcx, x, probs), weights.log_clamp)?;
        let loss = gan_semi_total(semi, adv, weights.lambda_adv_semi);
        let grads = tape.backward(loss);
        gen_opt.step(&gen_store, &grads.param_grads(&tape, &gen_store));
        println!("semi-supervised step {step}: gen {:.4}", loss.scalar());
    }
    Ok(())
}
