//! Dual-criterion improvement tracking: the checkpoint refreshes whenever
//! the validation loss decreases or the validation IoU increases; training
//! stops after `patience` epochs with neither.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Either criterion improved this epoch: overwrite the checkpoint.
    Improved,
    Continue,
    /// Patience exhausted.
    Stop,
}

#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    best_loss: f64,
    best_iou: f64,
    epochs_since_improvement: usize,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best_loss: f64::INFINITY,
            best_iou: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            best_epoch: 0,
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64, val_iou: f64) -> Verdict {
        let improved = val_loss < self.best_loss || val_iou > self.best_iou;
        if improved {
            self.best_loss = self.best_loss.min(val_loss);
            self.best_iou = self.best_iou.max(val_iou);
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            Verdict::Improved
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}
