//! Mini-batch SGD with a producer–consumer pipeline: producer threads turn
//! sampled fragments into sparse inputs, the calling thread owns the model and
//! applies one update per batch.

use std::sync::mpsc;
use std::thread;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dropout, Model};
use crate::error::{Error, Result};
use crate::features::FragmentInput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_initial: f64,
    /// Learning rate at the last epoch, as a fraction of `lr_initial`.
    pub lr_final_fraction: f64,
    pub dropout_initial: f64,
    pub dropout_final: f64,
    pub input_dropout: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub producers: usize,
    /// Batches the hand-off queue can hold.
    pub queue_capacity: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 128,
            lr_initial: 0.128,
            lr_final_fraction: 1.0 / 16.0,
            dropout_initial: 0.4,
            dropout_final: 0.1,
            input_dropout: false,
            batch_size: 512,
            seed: 1,
            producers: 1,
            queue_capacity: 8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction.is_finite()) {
            return bad("final learning-rate fraction must be positive");
        }
        for d in [self.dropout_initial, self.dropout_final] {
            if !(0.0..1.0).contains(&d) {
                return bad("dropout must lie in [0, 1)");
            }
        }
        if self.batch_size == 0 || self.producers == 0 || self.queue_capacity == 0 {
            return bad("batch size, producer count and queue capacity must be positive");
        }
        Ok(())
    }

    fn progress(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            0.0
        } else {
            epoch as f64 / (self.epochs - 1) as f64
        }
    }

    /// `lr_initial * lr_final_fraction^(e / (E - 1))`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_final_fraction.powf(self.progress(epoch))
    }

    /// Linear interpolation from `dropout_initial` to `dropout_final`.
    pub fn dropout_at(&self, epoch: usize) -> f64 {
        self.dropout_initial + (self.dropout_final - self.dropout_initial) * self.progress(epoch)
    }
}

/// A source of training examples that producers can share.
pub trait TrainingData: Sync {
    type Item: Send + Sync;

    /// The examples of one epoch, in any order (the trainer shuffles them).
    fn epoch_items(&self, epoch: usize, rng: &mut ChaCha8Rng) -> Vec<Self::Item>;

    /// Sparse input and target class of one example.
    fn materialize(&self, item: &Self::Item) -> Result<(FragmentInput, usize)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub dropout: f64,
    pub loss: f64,
    pub examples: usize,
    pub dev_f1: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 * 2 + stream);
    rng
}

type Batch = (Vec<FragmentInput>, Vec<usize>);

/// Trains `model` in place. `on_epoch` runs after every epoch and may return a
/// dev-set F1 to record in the log.
pub fn train<D, F>(model: &mut Model, data: &D, schedule: &TrainSchedule, mut on_epoch: F) -> Result<Vec<EpochLog>>
where
    D: TrainingData,
    F: FnMut(&Model, &EpochLog) -> Result<Option<f64>>,
{
    schedule.validate()?;
    model.validate()?;
    let mut logs = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut sample_rng = epoch_rng(schedule.seed, epoch, 0);
        let mut dropout_rng = epoch_rng(schedule.seed, epoch, 1);
        let mut items = data.epoch_items(epoch, &mut sample_rng);
        if items.is_empty() {
            return Err(Error::NoData(format!("no training examples in epoch {epoch}")));
        }
        items.shuffle(&mut sample_rng);

        let lr = schedule.lr_at(epoch);
        let dropout = Dropout {
            rate: schedule.dropout_at(epoch),
            on_input: schedule.input_dropout,
        };
        let batches: Vec<&[D::Item]> = items.chunks(schedule.batch_size).collect();
        let mut total_loss = 0.0;
        let mut seen = 0usize;

        thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(schedule.queue_capacity);
            let producers = schedule.producers.min(batches.len());
            for p in 0..producers {
                let tx = tx.clone();
                let batches = &batches;
                scope.spawn(move || {
                    for chunk in batches.iter().skip(p).step_by(producers) {
                        let batch = chunk
                            .iter()
                            .map(|item| data.materialize(item))
                            .collect::<Result<Vec<_>>>()
                            .map(|pairs| pairs.into_iter().unzip());
                        if tx.send(batch).is_err() {
                            return;
                        }
                    }
                });
            }
            drop(tx);
            for batch in rx.iter() {
                let (inputs, targets) = batch?;
                let (loss, grads) = model.loss_and_gradients(&inputs, &targets, dropout, &mut dropout_rng)?;
                if !loss.is_finite() {
                    return Err(Error::Invariant(format!("non-finite loss in epoch {epoch}")));
                }
                model.sgd_step(&grads, lr);
                total_loss += loss * targets.len() as f64;
                seen += targets.len();
            }
            Ok(())
        })?;

        let mut log = EpochLog {
            epoch,
            lr,
            dropout: dropout.rate,
            loss: total_loss / seen as f64,
            examples: seen,
            dev_f1: None,
        };
        log.dev_f1 = on_epoch(model, &log)?;
        match log.dev_f1 {
            Some(f1) => info!(
                "epoch {epoch}: loss {:.6} lr {lr:.6} dropout {:.3} examples {seen} dev F1 {f1:.4}",
                log.loss, log.dropout
            ),
            None => debug!(
                "epoch {epoch}: loss {:.6} lr {lr:.6} dropout {:.3} examples {seen}",
                log.loss, log.dropout
            ),
        }
        logs.push(log);
    }
    Ok(logs)
}
