//! Adversaries and mutual-information estimators that police the common/salient split.

pub mod adversary;
pub mod digamma;
pub mod disc_mi;
pub mod knn;
pub mod mine;

pub use adversary::{
    derangement, disc_adversarial_loss, regressor_adversarial_loss, regressor_confusion_loss, regressor_pair_loss, shuffle_pairs, DiscSide, Discriminator, FoolD, FoolR,
    Regressor,
    RegressorSide,
};
pub use digamma::digamma;
pub use disc_mi::{disc_mi_estimate, disc_mi_train_loss, disc_mi_value};
pub use knn::{knn_mi_estimate, normalize_block, KnnNorm};
pub use mine::{mine_estimate, mine_objective, MineCritic};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{AdamState, Bind, Parameters, Tape, Var};
use crate::{CaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Knn,
    Mine,
    Disc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub estimator: Estimator,
    pub value_nats: f64,
    pub n: usize,
    /// `k` for kNN, batch size for MINE and Disc-MI.
    pub param: usize,
    #[serde(default)]
    pub jittered: bool,
}

/// Minibatch schedule for adversary training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f64,
    pub batch: usize,
}

/// Runs `epochs` shuffled passes over `n` samples; returns the mean loss of each epoch.
///
/// `loss` receives the tape, the network's parameter handles and the batch indices.
pub fn fit_epochs<N, R, F>(
    net: &mut N,
    adam: &mut AdamState,
    n: usize,
    batch: usize,
    epochs: usize,
    rng: &mut R,
    loss: F,
) -> Result<Vec<f64>>
where
    N: Parameters,
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &N, &[Var], &[usize]) -> Result<Var>,
{
    if batch == 0 || n == 0 {
        return Err(CaError::Contract("adversary training needs a non-empty pool and batch".into()));
    }
    let mut history = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(batch) {
            total += step(net, adam, idx, &loss)?;
            count += 1;
        }
        history.push(total / count as f64);
    }
    Ok(history)
}

/// Runs `steps` updates on random batches of `batch` distinct samples; returns the per-step losses.
pub fn fit_steps<N, R, F>(
    net: &mut N,
    adam: &mut AdamState,
    n: usize,
    batch: usize,
    steps: usize,
    rng: &mut R,
    loss: F,
) -> Result<Vec<f64>>
where
    N: Parameters,
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &N, &[Var], &[usize]) -> Result<Var>,
{
    if batch == 0 || batch > n {
        return Err(CaError::Contract(format!("batch {batch} does not fit a pool of {n}")));
    }
    (0..steps)
        .map(|_| {
            let idx = rand::seq::index::sample(rng, n, batch).into_vec();
            step(net, adam, &idx, &loss)
        })
        .collect()
}

fn step<N, F>(net: &mut N, adam: &mut AdamState, idx: &[usize], loss: &F) -> Result<f64>
where
    N: Parameters,
    F: Fn(&mut Tape, &N, &[Var], &[usize]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.bind(net, Bind::Train(0));
    let l = loss(&mut tape, net, &vars, idx)?;
    let value = tape.scalar(l);
    if !value.is_finite() {
        return Err(CaError::Numeric(format!("adversary loss became {value}")));
    }
    let grads = tape.backward(l)?.collect(0, &net.shapes());
    adam.step(&mut net.tensors_mut(), &grads)?;
    Ok(value)
}
