//! Adam training with early stopping on validation MCC.
//!
//! Determinism contract: samples are put into a canonical order (by sample
//! id), each epoch's shuffle comes from a seed derived as
//! `mix_seed(seed, ["epoch", e])`, batches are walked in order, and every
//! batch gradient is accumulated sample-by-sample. Two runs with the same
//! seed and the same sample set produce bit-identical parameters.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::Cnn;
use crate::error::{Error, Result};
use crate::fusion::FusedImage;
use crate::hashing;
use crate::metrics::{self, MetricsRow};
use crate::rng;

fn default_batch_size() -> usize {
    256
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_max_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Shuffle seed; experiment runners overwrite this per cell.
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig::new(0)
    }
}

impl TrainConfig {
    pub fn new(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problem = None;
        if self.batch_size == 0 {
            problem = Some("batch_size must be at least 1".to_string());
        } else if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            problem = Some("learning_rate must be positive".to_string());
        } else if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problem = Some("betas must lie in [0, 1)".to_string());
        } else if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            problem = Some("epsilon must be positive".to_string());
        } else if self.max_epochs > 0 && !(1..=self.max_epochs).contains(&self.patience) {
            problem = Some(format!(
                "patience {} must lie in 1..={}",
                self.patience, self.max_epochs
            ));
        }
        match problem {
            Some(message) => Err(Error::InvalidTrainConfig { message }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_mcc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the model ends up with (1-based; 0 when no
    /// epochs ran).
    pub stopping_epoch: usize,
    /// Validation MCC at `stopping_epoch` (0 when no epochs ran).
    pub best_val_mcc: f64,
    pub wall_time_s: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
}

/// Trains `model` in place and returns the per-epoch record. The model is
/// left at the parameters of the best validation-MCC epoch.
pub fn train(
    model: &mut Cnn,
    train_set: &[FusedImage],
    val_set: &[FusedImage],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput {
            what: "training set".into(),
        });
    }
    if val_set.is_empty() {
        return Err(Error::EmptyInput {
            what: "validation set".into(),
        });
    }
    if train_set.iter().all(|s| s.label == 0) || train_set.iter().all(|s| s.label == 1) {
        return Err(Error::SingleClass {
            what: "training set".into(),
        });
    }
    let started = Instant::now();
    model.train_seed = cfg.seed;

    // Canonical order first, so the incoming slice order never matters.
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.sort_by(|&a, &b| {
        train_set[a]
            .sample_id
            .cmp(&train_set[b].sample_id)
            .then(train_set[a].label.cmp(&train_set[b].label))
    });

    let val_labels: Vec<u8> = val_set.iter().map(|s| s.label).collect();
    let mut adam = Adam::new(model.num_params());
    let mut epochs = Vec::new();
    let mut best_val_mcc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params().to_vec();
    let mut strikes = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut perm = order.clone();
        let shuffle_seed = hashing::mix_seed(cfg.seed, &["epoch", &epoch.to_string()]);
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng::rng_from_seed(shuffle_seed));

        let mut loss_sum = 0f64;
        for chunk in perm.chunks(cfg.batch_size) {
            let batch: Vec<&FusedImage> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grad) = model.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}"),
                });
            }
            adam.step(model.params_mut(), &grad, cfg);
            model.snap_params_to_f32();
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let preds: Vec<u8> = model
            .predict(val_set)?
            .iter()
            .map(|p| p.label)
            .collect();
        let counts = metrics::confusion(&val_labels, &preds)?;
        let val_accuracy = metrics::accuracy(&counts)?;
        let (val_mcc, _) = metrics::mcc_with_flag(&counts);
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
            val_mcc,
        });

        if val_mcc > best_val_mcc {
            best_val_mcc = val_mcc;
            best_epoch = epoch;
            best_params.copy_from_slice(model.params());
            strikes = 0;
        } else {
            strikes += 1;
            if strikes >= cfg.patience {
                break;
            }
        }
    }

    model.params_mut().copy_from_slice(&best_params);
    Ok(TrainReport {
        epochs,
        stopping_epoch: best_epoch,
        best_val_mcc: if best_epoch == 0 { 0.0 } else { best_val_mcc },
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Test-set metrics for a trained model. The set must contain both classes,
/// otherwise TPR or FPR would be undefined.
pub fn evaluate(model: &Cnn, test_set: &[FusedImage]) -> Result<MetricsRow> {
    if test_set.is_empty() {
        return Err(Error::EmptyInput {
            what: "test set".into(),
        });
    }
    if test_set.iter().all(|s| s.label == 0) || test_set.iter().all(|s| s.label == 1) {
        return Err(Error::SingleClass {
            what: "test set".into(),
        });
    }
    let labels: Vec<u8> = test_set.iter().map(|s| s.label).collect();
    let preds: Vec<u8> = model
        .predict(test_set)?
        .iter()
        .map(|p| p.label)
        .collect();
    let counts = metrics::confusion(&labels, &preds)?;
    MetricsRow::from_counts(&counts)
}
