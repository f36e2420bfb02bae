use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    /// Loss of every optimizer step.
    pub curve: Vec<f64>,
    /// Mean loss over the whole training set before any update.
    pub initial_loss: f64,
    /// Mean loss over the whole training set after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

impl TrainOutcome {
    /// First epoch (1-based) whose loss is below `fraction` of the initial
    /// loss.
    pub fn epochs_to_reach(&self, fraction: f64) -> Option<usize> {
        self.epoch_losses
            .iter()
            .position(|&l| l < fraction * self.initial_loss)
            .map(|i| i + 1)
    }
}

/// Shuffled minibatch AdamW training of whatever `loss_fn` marks trainable.
pub fn fit<T, F, R>(store: &mut ParamStore, items: &[T], config: &TrainConfig, rng: &mut R, loss_fn: F) -> Result<TrainOutcome>
where
    T: Sync,
    F: Fn(&mut Tape, &ParamStore, &T, bool) -> Result<Var> + Sync,
    R: Rng + ?Sized,
{
    if items.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let eval = |store: &ParamStore| mean_loss(store, items, |tape, p, item| loss_fn(tape, p, item, false));
    let initial_loss = eval(store)?;
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&T> = chunk.iter().map(|&i| &items[i]).collect();
            curve.push(minibatch_step(store, &mut opt, &batch, |tape, p, item| loss_fn(tape, p, item, true))?);
        }
        epoch_losses.push(eval(store)?);
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(initial_loss);
    Ok(TrainOutcome {
        curve,
        initial_loss,
        epoch_losses,
        final_loss,
    })
}

/// One optimizer step on the mean loss of `batch`.
///
/// Each item gets its own tape; per-item gradients are summed in batch order
/// so the update does not depend on thread scheduling. Returns the mean loss.
pub fn minibatch_step<T, F>(store: &mut ParamStore, opt: &mut AdamW, batch: &[T], loss_fn: F) -> Result<f64>
where
    T: Sync,
    F: Fn(&mut Tape, &ParamStore, &T) -> Result<Var> + Sync,
{
    let frozen: &ParamStore = store;
    let results: Vec<(f64, BTreeMap<String, Tensor>)> = batch
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, frozen, item)?;
            let value = tape.value(loss).item();
            Ok((value, tape.backward(loss)?.into_named()))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for (value, g) in results {
        total += value;
        for (name, t) in g {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&t),
                None => {
                    grads.insert(name, t);
                }
            }
        }
    }
    grads.values_mut().for_each(|g| g.scale_in_place(scale));
    opt.step(store, &grads)?;
    Ok(total * scale)
}

/// Mean loss over `items` without updating anything.
pub fn mean_loss<T, F>(store: &ParamStore, items: &[T], loss_fn: F) -> Result<f64>
where
    T: Sync,
    F: Fn(&mut Tape, &ParamStore, &T) -> Result<Var> + Sync,
{
    let losses: Vec<f64> = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let loss = loss_fn(&mut tape, store, item)?;
            Ok(tape.value(loss).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / items.len().max(1) as f64)
}
