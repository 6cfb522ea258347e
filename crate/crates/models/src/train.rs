//! Mini-batch training and the accuracy-table evaluation.

use rainsense_core::sim::derive_seed;
use rainsense_core::Record;
use rainsense_nn::{multistep_lr, Adam, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::nets::N_CLASSES;

const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecipe {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub seed: u64,
    /// Re-estimate BN running statistics over the training set after the
    /// last epoch.
    pub refresh_bn: bool,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            lr: 0.002,
            batch: 512,
            epochs: 30,
            weight_decay: 0.1,
            lr_milestones: vec![10, 20],
            lr_factor: 0.5,
            seed: 0,
            refresh_bn: true,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || self.batch == 0
            || !(self.weight_decay >= 0.0)
            || !(self.lr_factor > 0.0)
        {
            return Err(ModelError::Input(
                "training recipe values must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        multistep_lr(self.lr, &self.lr_milestones, self.lr_factor, epoch)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    /// Percent correct on the training batches, in training mode.
    pub accuracy: f64,
    pub steps: usize,
}

pub fn train(
    model: &mut Model,
    records: &[Record],
    recipe: &TrainRecipe,
) -> Result<Vec<EpochMetrics>> {
    train_with_progress(model, records, recipe, |_| {})
}

pub fn train_with_progress(
    model: &mut Model,
    records: &[Record],
    recipe: &TrainRecipe,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    let x = model.prepare(records)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    train_tensors(model, &x, &labels, recipe, on_epoch)
}

/// Training on an already prepared input tensor (first axis = samples).
pub fn train_tensors(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    recipe: &TrainRecipe,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    recipe.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(ModelError::Input("empty training set".into()));
    }
    if x.shape().first() != Some(&n) {
        return Err(ModelError::Input(format!(
            "{n} labels for input of shape {:?}",
            x.shape()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= N_CLASSES) {
        return Err(ModelError::Input(format!("label {l} out of range")));
    }
    let mut history = Vec::with_capacity(recipe.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..recipe.epochs {
        let lr = recipe.lr_at(epoch);
        let adam = Adam {
            lr,
            weight_decay: recipe.weight_decay,
            ..Adam::default()
        };
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            recipe.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut steps = 0;
        for idx in order.chunks(recipe.batch) {
            let xb = gather_rows(x, idx)?;
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.input(xb);
            let logits = model.forward(&mut g, xv, Mode::Train)?;
            let pred = g.value(logits).argmax_rows();
            correct += pred.iter().zip(&yb).filter(|(p, y)| p == y).count();
            let loss = g.softmax_cross_entropy(logits, &yb)?;
            loss_sum += g.value(loss).item() * idx.len() as f64;
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.store)?;
            adam.step(&mut model.store)?;
            steps += 1;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            accuracy: 100.0 * correct as f64 / n as f64,
            steps,
        };
        on_epoch(&m);
        history.push(m);
    }
    if recipe.refresh_bn && recipe.epochs > 0 {
        refresh_bn_stats(model, x, recipe.batch)?;
    }
    Ok(history)
}

/// Sets BN running statistics to the average batch statistics over `x`,
/// taken in sample order with the given batch size. Parameters are untouched.
pub fn refresh_bn_stats(model: &mut Model, x: &Tensor, batch: usize) -> Result<()> {
    let n = x.shape().first().copied().unwrap_or(0);
    let idx: Vec<usize> = (0..n).collect();
    for (k, part) in idx.chunks(batch.max(1)).enumerate() {
        let mut g = Graph::new();
        let xv = g.input(gather_rows(x, part)?);
        model.forward(&mut g, xv, Mode::Refresh { batch: k })?;
    }
    Ok(())
}

/// Rows `idx` of the first axis.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let n = x.shape()[0];
    let row = x.numel() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(ModelError::Input(format!("row {i} out of {n}")));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::new(&shape, data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub correct: [usize; N_CLASSES],
    pub total: [usize; N_CLASSES],
    /// Percent per class; NaN for a class absent from the test set.
    pub per_class: [f64; N_CLASSES],
    /// Unweighted mean of the per-class accuracies present.
    pub average: f64,
}

impl AccuracyTable {
    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(ModelError::Input(
                "labels and predictions differ in length".into(),
            ));
        }
        if labels.is_empty() {
            return Err(ModelError::Input("empty test set".into()));
        }
        let mut correct = [0; N_CLASSES];
        let mut total = [0; N_CLASSES];
        for (&y, &p) in labels.iter().zip(predictions) {
            if y >= N_CLASSES {
                return Err(ModelError::Input(format!("label {y} out of range")));
            }
            total[y] += 1;
            correct[y] += usize::from(y == p);
        }
        let per_class: [f64; N_CLASSES] = std::array::from_fn(|c| {
            if total[c] == 0 {
                f64::NAN
            } else {
                100.0 * correct[c] as f64 / total[c] as f64
            }
        });
        let present: Vec<f64> = per_class.iter().copied().filter(|v| !v.is_nan()).collect();
        let average = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Self {
            correct,
            total,
            per_class,
            average,
        })
    }
}

/// Eval-mode accuracy table over `records`.
pub fn evaluate(model: &mut Model, records: &[Record]) -> Result<AccuracyTable> {
    let labels: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
    let pred = model.predict(records, 256)?;
    AccuracyTable::from_predictions(&labels, &pred)
}
