use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Arch, ModelConfig};
use super::model::{Batch, VictimModel};
use crate::corpus::{TextRecord, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Encoder-decoder only: probability of replacing an encoder input
    /// token with UNK.
    pub noise_prob: f64,
}

impl Default for VictimTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 50,
            noise_prob: 0.15,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VictimTrainLog {
    pub epoch_losses: Vec<f64>,
    pub val_ce_initial: f64,
    pub val_ce_final: f64,
    pub steps: usize,
    pub final_loss: f64,
}

fn labels_of(cfg: &ModelConfig, recs: &[&TextRecord]) -> Result<Vec<u32>> {
    if cfg.arch != Arch::EncoderMlp {
        return Ok(Vec::new());
    }
    recs.iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::invalid(format!("record {} has no class label", r.id)))
        })
        .collect()
}

fn noised(tokens: &[u32], p: f64, rng: &mut ChaCha8Rng) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| {
            if t != BOS && t != EOS && rng.gen::<f64>() < p {
                UNK
            } else {
                t
            }
        })
        .collect()
}

/// Train a victim from `config.seed` with Adam, linear warmup and linear
/// decay to 10% of the peak rate. Parameters are rounded to f32 at the
/// end so the in-memory model matches its checkpoint exactly.
pub fn train_victim(
    config: ModelConfig,
    train: &[&TextRecord],
    val: &[&TextRecord],
    opts: &VictimTraining,
) -> Result<(VictimModel, VictimTrainLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput);
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut model = VictimModel::new(config.clone())?;
    let train_labels = labels_of(&config, train)?;
    let val_tokens: Vec<Vec<u32>> = val.iter().map(|r| r.tokens.clone()).collect();
    let val_labels = labels_of(&config, val)?;

    let mut log = VictimTrainLog {
        val_ce_initial: model.eval_ce(&val_tokens, &val_labels)?,
        ..Default::default()
    };
    info!("victim {:?}: initial val CE {:.4}", config.arch, log.val_ce_initial);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00);
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), model.store().len());
    let steps_per_epoch = train.len().div_ceil(opts.batch_size);
    let total_steps = (steps_per_epoch * opts.epochs).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let tokens: Vec<Vec<u32>> = chunk.iter().map(|&i| train[i].tokens.clone()).collect();
            let labels: Vec<u32> = if train_labels.is_empty() {
                Vec::new()
            } else {
                chunk.iter().map(|&i| train_labels[i]).collect()
            };
            let mut batch = Batch::new(tokens, labels);
            if config.arch == Arch::EncoderDecoder {
                batch.encoder_inputs = Some(
                    batch
                        .tokens
                        .iter()
                        .map(|t| noised(t, opts.noise_prob, &mut rng))
                        .collect(),
                );
            }
            let (value, mut grads) = {
                let mut g = Graph::new(model.store());
                let l = model.loss(&mut g, &batch)?;
                (g.value(l).item(), g.backward(l))
            };
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "victim loss {value} at epoch {epoch}, step {step} (grad norm {:.3e})",
                    grads.global_norm()
                )));
            }
            adam.set_lr(lr_at(opts, step, total_steps));
            adam.step(model.store_mut(), &mut grads, |_| true);
            sum += value;
            log.final_loss = value;
            step += 1;
        }
        let mean = sum / steps_per_epoch as f64;
        debug!("victim epoch {epoch}: mean loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    model.store_mut().round_to_f32();
    log.steps = step;
    log.val_ce_final = model.eval_ce(&val_tokens, &val_labels)?;
    info!("victim trained: val CE {:.4} after {} steps", log.val_ce_final, step);
    Ok((model, log))
}

pub(crate) fn lr_at(opts: &VictimTraining, step: usize, total: usize) -> f64 {
    if step < opts.warmup_steps {
        return opts.lr * (step + 1) as f64 / opts.warmup_steps as f64;
    }
    let span = total.saturating_sub(opts.warmup_steps).max(1);
    let frac = (step - opts.warmup_steps) as f64 / span as f64;
    opts.lr * (1.0 - 0.9 * frac.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let o = VictimTraining {
            warmup_steps: 10,
            lr: 1.0,
            ..Default::default()
        };
        assert!((lr_at(&o, 0, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&o, 10, 100) - 1.0).abs() < 1e-12);
        assert!((lr_at(&o, 100, 100) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn noise_keeps_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = noised(&[BOS, 5, 6, 7, EOS], 1.0, &mut rng);
        assert_eq!(n, vec![BOS, UNK, UNK, UNK, EOS]);
    }
}
