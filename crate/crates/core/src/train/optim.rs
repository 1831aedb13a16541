//! Optimizers (Adam, SGD with momentum) and learning-rate schedules
//! (reduce-on-plateau, polynomial decay). L2 regularization enters as
//! optimizer weight decay added to the raw gradient.

use crate::autodiff::{ParamId, ParamStore};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    ReduceOnPlateau,
    PolynomialDecay,
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    momentum: f64,
    step_count: usize,
    adam_state: HashMap<ParamId, (ArrayD<f64>, ArrayD<f64>)>,
    sgd_state: HashMap<ParamId, ArrayD<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            step_count: 0,
            adam_state: HashMap::new(),
            sgd_state: HashMap::new(),
        }
    }

    /// Apply one update from accumulated gradients. Buffers (running
    /// statistics) are skipped; only trainable parameters move.
    pub fn step(&mut self, store: &ParamStore, grads: &[(ParamId, ArrayD<f64>)]) {
        self.step_count += 1;
        for (pid, grad) in grads {
            if !store.is_trainable(*pid) {
                continue;
            }
            let value = store.value_rc(*pid);
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g += &(value.as_ref() * self.weight_decay);
            }
            let delta = match self.kind {
                OptimizerKind::Adam => {
                    let (m, v) = self
                        .adam_state
                        .entry(*pid)
                        .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
                    *m *= self.beta1;
                    *m += &(&g * (1.0 - self.beta1));
                    *v *= self.beta2;
                    *v += &(&g * &g * (1.0 - self.beta2));
                    let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
                    let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
                    let mut delta = m.clone();
                    delta /= bias1;
                    let denom = v.mapv(|x| (x / bias2).sqrt() + self.eps);
                    delta.zip_mut_with(&denom, |d, &s| *d /= s);
                    delta * (-self.lr)
                }
                OptimizerKind::Sgd => {
                    let vel = self
                        .sgd_state
                        .entry(*pid)
                        .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
                    *vel *= self.momentum;
                    *vel += &g;
                    vel.clone() * (-self.lr)
                }
            };
            store.update(*pid, &delta);
        }
    }
}

/// Epoch-level learning-rate schedule.
pub struct Scheduler {
    kind: SchedulerKind,
    base_lr: f64,
    current_lr: f64,
    total_epochs: usize,
    // reduce-on-plateau state
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    stalled: usize,
    // polynomial decay
    power: f64,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, base_lr: f64, total_epochs: usize) -> Self {
        Scheduler {
            kind,
            base_lr,
            current_lr: base_lr,
            total_epochs: total_epochs.max(1),
            factor: 0.1,
            patience: 10,
            min_lr: 1e-7,
            best: f64::INFINITY,
            stalled: 0,
            power: 0.9,
        }
    }

    pub fn lr(&self) -> f64 {
        self.current_lr
    }

    /// Observe the epoch's validation loss and return the rate for the next
    /// epoch.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> f64 {
        match self.kind {
            SchedulerKind::PolynomialDecay => {
                let progress = (epoch as f64 / self.total_epochs as f64).min(1.0);
                self.current_lr = self.base_lr * (1.0 - progress).powf(self.power);
            }
            SchedulerKind::ReduceOnPlateau => {
                if val_loss < self.best - 1e-12 {
                    self.best = val_loss;
                    self.stalled = 0;
                } else {
                    self.stalled += 1;
                    if self.stalled > self.patience {
                        self.current_lr = (self.current_lr * self.factor).max(self.min_lr);
                        self.stalled = 0;
                    }
                }
            }
        }
        self.current_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut store = ParamStore::new();
        let pid = store.create("w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0);
        let g = ArrayD::from_elem(IxDyn(&[2]), 2.0);
        opt.step(&store, &[(pid, g)]);
        let v = store.value(pid);
        assert!((v[IxDyn(&[0])] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // minimize (w - 3)^2 by feeding the analytic gradient.
        let mut store = ParamStore::new();
        let pid = store.create("w", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 0.0);
        for _ in 0..300 {
            let w = store.value(pid)[IxDyn(&[0])];
            let g = ArrayD::from_elem(IxDyn(&[1]), 2.0 * (w - 3.0));
            opt.step(&store, &[(pid, g)]);
        }
        let w = store.value(pid)[IxDyn(&[0])];
        assert!((w - 3.0).abs() < 1e-2, "w = {w}");
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut store = ParamStore::new();
        let pid = store.create("w", ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.5);
        opt.step(&store, &[(pid, ArrayD::zeros(IxDyn(&[1])))]);
        let w = store.value(pid)[IxDyn(&[0])];
        assert!(w < 1.0, "decay must shrink the weight, got {w}");
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::new();
        let pid = store.create_buffer("running", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 0.0);
        opt.step(&store, &[(pid, ArrayD::from_elem(IxDyn(&[1]), 1.0))]);
        assert_eq!(store.value(pid)[IxDyn(&[0])], 5.0);
    }

    #[test]
    fn polynomial_decay_reaches_zero_at_the_horizon() {
        let mut sched = Scheduler::new(SchedulerKind::PolynomialDecay, 1.0, 10);
        let mut last = 1.0;
        for epoch in 1..=10 {
            let lr = sched.observe(epoch, 1.0);
            assert!(lr <= last + 1e-15);
            last = lr;
        }
        assert!(last.abs() < 1e-12);
    }

    #[test]
    fn plateau_cuts_the_rate_after_patience_epochs_without_improvement() {
        let mut sched = Scheduler::new(SchedulerKind::ReduceOnPlateau, 1.0, 1000);
        sched.patience = 2;
        assert_eq!(sched.observe(1, 0.5), 1.0); // improvement
        assert_eq!(sched.observe(2, 0.5), 1.0); // stall 1
        assert_eq!(sched.observe(3, 0.5), 1.0); // stall 2
        let lr = sched.observe(4, 0.5); // stall 3 > patience: cut
        assert!((lr - 0.1).abs() < 1e-12);
    }
}
