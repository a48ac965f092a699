use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::TrainingSet;
use crate::error::{Error, Result};
use crate::nn::{MlpNetwork, Optimizer, OptimizerKind, RandomState};

/// Minibatch schedule shared by every trainable model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            batch_size: 64,
            epochs: 2000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }
}

/// Mean loss of each epoch, in order.
pub type LossTrace = Vec<f64>;

/// Batch loss: given raw outputs and targets, return the mean loss and its gradient
/// with respect to the raw outputs (already divided by the batch size).
pub(crate) trait BatchLoss {
    fn loss_and_grad(
        &self,
        raw: ArrayView2<f64>,
        targets: ArrayView2<f64>,
    ) -> Result<(f64, Array2<f64>)>;
}

pub(crate) fn fit<L: BatchLoss>(
    net: &mut MlpNetwork,
    data: &TrainingSet,
    schedule: &TrainSchedule,
    loss: &L,
) -> Result<LossTrace> {
    if data.input_dim() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            got: data.input_dim(),
        });
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = Optimizer::new(schedule.optimizer, schedule.learning_rate)?;
    let mut rng = RandomState::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let batch = data.select(chunk);
            let raw = net.forward_train(batch.inputs().view(), Some(&mut rng))?;
            let (value, grad) = loss.loss_and_grad(raw.view(), batch.targets().view())?;
            if !value.is_finite() {
                net.clear_cache();
                return Err(Error::Divergence { epoch });
            }
            let grads = net.backward(grad.view())?;
            opt.apply(net, &grads)?;
            total += value * chunk.len() as f64;
        }
        if !net.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.push(total / data.len() as f64);
    }
    Ok(trace)
}
