use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::ViTModel;
use super::optim::AdamW;
use super::ViTConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::stage_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction of all steps spent in linear warm-up before cosine decay.
    pub warmup_frac: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 15,
            batch: 32,
            seed: 0,
            warmup_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

fn lr_at(hyper: &TrainHyper, step: usize, total: usize) -> f64 {
    let warmup = ((total as f64) * hyper.warmup_frac).ceil() as usize;
    if step < warmup {
        return hyper.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    hyper.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Trains a fresh model with softmax cross-entropy and AdamW.
///
/// Shuffling is seeded from `hyper.seed`, initialisation from
/// `config.seed`; batches are processed sequentially so the result is
/// bit-identical across runs.
pub fn train(
    config: &ViTConfig,
    images: &[&Image],
    labels: &[u8],
    hyper: &TrainHyper,
) -> Result<(ViTModel, TrainReport)> {
    if images.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid("images and labels differ in length"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be binary"));
    }
    if hyper.batch == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = ViTModel::init(config)?;
    let decay = model.layout().decay_mask();
    let mut opt = AdamW::new(model.params().len(), hyper.weight_decay);
    let mut rng = stage_rng(hyper.seed, "vit-train");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let steps_per_epoch = images.len().div_ceil(hyper.batch);
    let total = steps_per_epoch * hyper.epochs;
    let mut grad = vec![0.0; model.params().len()];
    let mut report = TrainReport::default();
    let mut step = 0;
    let mut trace = Vec::new();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(hyper.batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let w = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let loss = model.loss_and_grad(images[i], labels[i], None, w, &mut grad)?;
                // exp(-loss) > 0.5 iff the true class has the larger probability.
                if loss < std::f64::consts::LN_2 {
                    correct += 1;
                }
                batch_loss += loss;
            }
            trace.push(batch_loss * w);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, trace });
            }
            loss_sum += batch_loss;
            let lr = lr_at(hyper, step, total);
            opt.step(model.params_mut(), &grad, &decay, lr);
            step += 1;
        }
        let n = images.len() as f64;
        report.epoch_loss.push(loss_sum / n);
        report.epoch_accuracy.push(correct as f64 / n);
        log::debug!("epoch {epoch}: loss {:.4} acc {:.3}", loss_sum / n, correct as f64 / n);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let h = TrainHyper {
            lr: 1.0,
            warmup_frac: 0.1,
            ..Default::default()
        };
        assert!((lr_at(&h, 0, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&h, 9, 100) - 1.0).abs() < 1e-12);
        assert!(lr_at(&h, 99, 100) < 0.01);
    }
}
