//! Mini-batch training loop shared by the generator and the ranker.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{arg_err, CoreError, Result};
use crate::nn::{clip_grad_norm, Adam, Scalar, Transformer};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Linear learning-rate warm-up length in optimiser steps.
    pub warmup_steps: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { epochs: 1, batch_size: 32, learning_rate: 1e-3, seed: 0, grad_clip: 1.0, warmup_steps: 20 }
    }
}

impl TrainHyper {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return arg_err("epochs and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return arg_err("learning rate must be positive");
        }
        Ok(())
    }
}

/// Mean training loss of every epoch, weighted the way the model's loss is
/// (per target token for the generator, per segment for the ranker).
#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossTrace {
    pub epoch_losses: Vec<f64>,
}

impl LossTrace {
    pub fn last(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Linear warm-up over `warmup_steps`, then linear decay to zero at the
/// final step.
pub fn scheduled_lr(hyper: &TrainHyper, step: usize, total_steps: usize) -> f64 {
    let warmup = hyper.warmup_steps.min(total_steps);
    if step < warmup {
        hyper.learning_rate * (step + 1) as f64 / warmup as f64
    } else {
        let rest = (total_steps - warmup).max(1) as f64;
        hyper.learning_rate * (total_steps.saturating_sub(step)) as f64 / rest
    }
}

/// Runs `hyper.epochs` passes over `n` examples in seeded random order.
/// `batch_grad` fills the gradient of the batch's mean loss and returns
/// `(summed loss, loss weight)` for the trace.
pub(crate) fn fit<F: Scalar>(
    net: &mut Transformer<F>,
    n: usize,
    hyper: &TrainHyper,
    mut batch_grad: impl FnMut(&Transformer<F>, &[usize], &mut [F]) -> Result<(f64, f64)>,
) -> Result<LossTrace> {
    hyper.validate()?;
    if n == 0 {
        return arg_err("training set is empty");
    }
    let mut rng = crate::seeded_rng(hyper.seed);
    let mut adam = Adam::<F>::new(net.num_params(), hyper.learning_rate);
    let mut grads = vec![F::zero(); net.num_params()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = LossTrace::default();
    let steps_per_epoch = n.div_ceil(hyper.batch_size);
    let total_steps = steps_per_epoch * hyper.epochs;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut weight) = (0.0, 0.0);
        for (step, batch) in order.chunks(hyper.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = F::zero());
            let (l, w) = batch_grad(net, batch, &mut grads)?;
            if !l.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch, step });
            }
            loss_sum += l;
            weight += w;
            let norm = clip_grad_norm(&mut grads, hyper.grad_clip);
            if !norm.is_finite() {
                return Err(CoreError::NonFiniteLoss { epoch, step });
            }
            let global = adam.steps() as usize;
            adam.lr = scheduled_lr(hyper, global, total_steps);
            adam.step(net.params_mut(), &grads);
            if (step + 1) % 100 == 0 {
                log::debug!("epoch {epoch} step {}/{steps_per_epoch} loss {:.4}", step + 1, l / w.max(1.0));
            }
        }
        let mean = loss_sum / weight.max(f64::MIN_POSITIVE);
        log::info!("epoch {} mean loss {mean:.4}", epoch + 1);
        trace.epoch_losses.push(mean);
    }
    Ok(trace)
}
