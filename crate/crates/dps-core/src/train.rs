//! Minibatch SGD with cross-entropy loss.

use crate::engine::{backprop, forward_trace, log_sum_exp, ParamGrads};
use crate::error::{DpsError, Result};
use crate::model::ModelCheckpoint;
use crate::rng::Rng;
use crate::tensor::{Batch, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// L2 penalty applied as plain weight shrinkage per update. Softmax
    /// leaves a shared component across head rows unconstrained; decay is
    /// what pins it down.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr: 0.05,
            batch_size: 16,
            weight_decay: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainStats {
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub final_train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Trains a copy of the model. Shuffle order, minibatch composition, and
/// updates are all driven by `cfg.seed`, so identical inputs give a
/// bit-identical checkpoint.
pub fn train(
    model: &ModelCheckpoint,
    data: &Batch,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainStats)> {
    if data.is_empty() {
        return Err(DpsError::EmptyInput("training on empty batch"));
    }
    if cfg.lr < 0.0 {
        return Err(DpsError::InvalidConfig(format!(
            "negative learning rate {}",
            cfg.lr
        )));
    }
    if cfg.weight_decay < 0.0 {
        return Err(DpsError::InvalidConfig(format!(
            "negative weight decay {}",
            cfg.weight_decay
        )));
    }
    if cfg.epochs == 0 {
        return Err(DpsError::InvalidConfig("epochs must be >= 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(DpsError::InvalidConfig("batch_size must be >= 1".into()));
    }
    model.validate()?;
    if data.num_classes() > model.num_classes() {
        return Err(DpsError::Compatibility(format!(
            "dataset has labels up to {} but model has {} classes",
            data.num_classes() - 1,
            model.num_classes()
        )));
    }

    let mut trained = model.clone();
    let mut rng = Rng::new(cfg.seed);
    let num_classes = trained.num_classes();
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(&trained);
            for &idx in chunk {
                let x = data.sample(idx);
                let label = data.labels[idx] as usize;
                let trace = forward_trace(&trained, &x)?;
                let logits = trace.logits().data();
                let lse = log_sum_exp(logits);
                epoch_loss += lse - logits[label];
                // d(cross-entropy)/d(logit) = softmax - onehot
                let mut grad_logits: Vec<f64> = logits.iter().map(|g| (g - lse).exp()).collect();
                grad_logits[label] -= 1.0;
                let grad_logits = Tensor::new(vec![num_classes], grad_logits)?;
                backprop(&trained, &trace, &grad_logits, Some(&mut grads), None)?;
            }
            if cfg.lr != 0.0 {
                let scale = cfg.lr / chunk.len() as f64;
                let shrink = 1.0 - cfg.lr * cfg.weight_decay;
                for (w, gw) in trained.weights.iter_mut().zip(&grads.weights) {
                    for (wi, gi) in w.iter_mut().zip(gw) {
                        *wi = shrink * *wi - scale * gi;
                    }
                }
                // biases are not decayed
                for (b, gb) in trained.biases.iter_mut().zip(&grads.biases) {
                    for (bi, gi) in b.iter_mut().zip(gb) {
                        *bi -= scale * gi;
                    }
                }
            }
        }
        let mean_loss = epoch_loss / n as f64;
        if !mean_loss.is_finite() {
            return Err(DpsError::Numeric(format!(
                "training diverged at epoch {epoch}: loss {mean_loss}"
            )));
        }
        epoch_losses.push(mean_loss);
    }

    let stats = TrainStats {
        first_epoch_loss: epoch_losses[0],
        final_epoch_loss: *epoch_losses.last().unwrap(),
        final_train_accuracy: crate::engine::accuracy(&trained, data)?,
        epoch_losses,
    };
    Ok((trained, stats))
}
