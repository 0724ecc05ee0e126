//! Mini-batch training with MAE loss, Adam and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::SampleSet;
use crate::model::{check_compatible, forward, predict_batch, ModelParams};
use crate::optim::AdamState;

/// Appends the mean absolute error between `pred` and `target` to the tape.
///
/// With equal-sized grids this is the batch mean of per-sample cell means.
pub fn mae_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape(
            "mae_loss",
            format!("prediction {:?} vs target {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    tape.mean(abs)
}

/// Plain mean absolute error, for evaluation outside a tape.
pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64
}

fn default_lr() -> f64 {
    0.001
}
fn default_batch() -> usize {
    256
}
fn default_max_epochs() -> usize {
    2000
}
fn default_patience() -> usize {
    100
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_max_epochs(),
            early_stop_patience: default_patience(),
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so a run can be used as a no-op
    /// reference; negative or non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_reason: StopReason,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Everything but the wall time, for determinism comparisons.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.best_validation_loss.to_bits() == other.best_validation_loss.to_bits()
            && self.stopped_reason == other.stopped_reason
    }
}

/// Forward, backward and one Adam update on a batch. Folds the batch-norm
/// statistics into the running averages and returns the batch loss.
pub fn train_step(params: &mut ModelParams, adam: &mut AdamState, batch: &SampleSet) -> Result<f64> {
    let mut pass = forward(params, &batch.demand_tensor(), &batch.factor_tensor(), NormMode::Train)?;
    let target = pass.tape.constant(batch.target_tensor());
    let loss = mae_loss(&mut pass.tape, pass.prediction, target)?;
    let loss_value = pass.tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    let grads = pass.tape.backward(loss)?;
    let grad_tensors = pass.param_grads(&grads);
    let grad_slices: Vec<&[f64]> = grad_tensors.iter().map(|g| g.data()).collect();
    {
        let mut tensors = params.trainable_mut();
        let mut slices: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
        adam.update(&mut slices, &grad_slices)?;
    }
    if let Some(stats) = &pass.batch_stats {
        params.absorb_batch_stats(stats);
    }
    Ok(loss_value)
}

pub fn new_optimizer(params: &ModelParams, learning_rate: f64) -> AdamState {
    let sizes: Vec<usize> = params.trainable().iter().map(|(_, t)| t.numel()).collect();
    AdamState::new(learning_rate, &sizes)
}

/// Infer-mode MAE over a sample set.
pub fn evaluate_loss(params: &ModelParams, samples: &SampleSet) -> Result<f64> {
    let pred = predict_batch(params, samples)?;
    Ok(mae(pred.data(), samples.target_tensor().data()))
}

/// Trains from `params` and returns the snapshot with the lowest validation
/// loss together with the per-epoch history.
pub fn train(
    params: ModelParams,
    train_set: &SampleSet,
    val_set: &SampleSet,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    check_compatible(&params, train_set)?;
    check_compatible(&params, val_set)?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = new_optimizer(&params, config.learning_rate);
    let mut params = params;
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.select(chunk);
            let loss = train_step(&mut params, &mut adam, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            if !params.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            weighted += loss * chunk.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let validation_loss = evaluate_loss(&params, val_set)?;
        if !validation_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        log::info!("epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        epochs.push(EpochRecord { epoch, train_loss, validation_loss });

        if best.as_ref().is_none_or(|(_, _, b)| validation_loss < *b) {
            best = Some((params.clone(), epoch, validation_loss));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                stopped_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let (best_params, best_epoch, best_validation_loss) = best.expect("at least one epoch");
    let report = TrainReport {
        epochs,
        best_epoch,
        best_validation_loss,
        stopped_reason,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mae_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1, 2, 2], vec![3.0, 3.0, 0.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::new(vec![1, 2, 2], vec![2.0, 4.0, 0.0, 2.0]).unwrap());
        let l = mae_loss(&mut tape, p, t).unwrap();
        assert_eq!(tape.value(l).data()[0], 1.0);
        let same = mae_loss(&mut tape, t, t).unwrap();
        assert_eq!(tape.value(same).data()[0], 0.0);

        let p2 = tape.constant(Tensor::new(vec![1, 2, 2], vec![6.0, 6.0, 0.0, 0.0]).unwrap());
        let t2 = tape.constant(Tensor::new(vec![1, 2, 2], vec![4.0, 8.0, 0.0, 4.0]).unwrap());
        let l2 = mae_loss(&mut tape, p2, t2).unwrap();
        assert_eq!(tape.value(l2).data()[0], 2.0);

        let bad = tape.constant(Tensor::zeros(vec![1, 4]));
        assert!(mae_loss(&mut tape, p, bad).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: TrainConfig = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(c, TrainConfig { seed: 3, ..TrainConfig::default() });
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs, c.early_stop_patience), (0.001, 256, 2000, 100));
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate().is_ok());
    }

    #[test]
    fn stop_reason_serializes_snake_case() {
        assert_eq!(serde_json::to_string(&StopReason::EarlyStop).unwrap(), "\"early_stop\"");
        assert_eq!(serde_json::to_string(&StopReason::MaxEpochs).unwrap(), "\"max_epochs\"");
    }
}
