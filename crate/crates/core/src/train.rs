//! Minibatch training with validation-based best-epoch selection.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SignalDataset, Split};
use crate::error::{FcosError, Result};
use crate::metrics::{evaluate, CurvePoint};
use crate::model::{ModelGraph, TrainSession};
use crate::tensor::kernels::{argmax, softmax_cross_entropy};
use crate::tensor::optim::Optimizer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch: 128,
            epochs: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FcosError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(FcosError::Config("train.batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// 0 when no epoch beat the starting weights on validation.
    pub best_epoch: usize,
    pub best_val: f64,
    pub epochs_run: usize,
    pub curve: Vec<CurvePoint>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Trains `model` in place with Adam, then restores the weights of the
/// epoch with the best validation accuracy (ties keep the earlier epoch).
/// On a numeric failure the model holds the last finite weights.
pub fn fit(model: &mut ModelGraph<f32>, ds: &SignalDataset, cfg: &TrainConfig, stage: &str) -> Result<FitOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(FcosError::Usage("the train split is empty".into()));
    }
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut session = TrainSession::new();
    let mut curve = Vec::new();
    let point = |epoch: usize, split: Split, accuracy: f64| CurvePoint {
        stage: stage.to_string(),
        epoch,
        split,
        accuracy,
    };

    let val0 = evaluate(model, ds, Split::Val)?.accuracy;
    curve.push(point(0, Split::Val, val0));
    curve.push(point(0, Split::Test, evaluate(model, ds, Split::Test)?.accuracy));
    let mut best = (0, val0, model.clone());

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch)));
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let (x, y) = ds.batch(chunk);
            let logits = session.forward(model, &x)?;
            let k = logits.shape()[1];
            let (loss, dlogits) = softmax_cross_entropy(logits.data(), &y, k);
            if !loss.is_finite() {
                return Err(FcosError::NumericFailure {
                    layer: "loss".into(),
                    stage: "train",
                });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            hits += logits
                .data()
                .chunks(k)
                .zip(&y)
                .filter(|(row, &t)| argmax(row) == t)
                .count();
            session.backward(model, &Tensor::new(logits.shape().to_vec(), dlogits)?)?;
            opt.step(model.params_mut())?;
        }
        let n = order.len() as f64;
        let val = evaluate(model, ds, Split::Val)?.accuracy;
        let test = evaluate(model, ds, Split::Test)?.accuracy;
        curve.push(point(epoch, Split::Train, hits as f64 / n));
        curve.push(point(epoch, Split::Val, val));
        curve.push(point(epoch, Split::Test, test));
        debug!(
            "{stage} epoch {epoch}: loss {:.4} train {:.4} val {val:.4} test {test:.4}",
            loss_sum / n,
            hits as f64 / n
        );
        if val > best.1 {
            best = (epoch, val, model.clone());
        }
    }
    info!("{stage}: best epoch {} of {} (val {:.4})", best.0, cfg.epochs, best.1);
    *model = best.2;
    Ok(FitOutcome {
        best_epoch: best.0,
        best_val: best.1,
        epochs_run: cfg.epochs,
        curve,
    })
}
