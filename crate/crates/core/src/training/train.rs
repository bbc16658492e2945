use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, LabeledImage, Normalization};
use crate::error::{Error, Result};
use crate::model::GroupMambaModel;
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};
use crate::scalar::Scalar;

use super::loss::{argmax_rows, distilled_loss_node};
use super::optim::{AdamW, AdamWConfig, CosineSchedule};
use super::parallel::map_ordered;
use super::teacher::TeacherLogits;

/// Anything with a parameter store and a differentiable image → logits map.
pub trait Classifier<T: Scalar>: Sync {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn num_classes(&self) -> usize;
    /// Logits `(B, K)` for `(B, H, W, C)` images.
    fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var>;
}

impl<T: Scalar> Classifier<T> for GroupMambaModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        GroupMambaModel::forward(self, g, images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Warmup length as a fraction of all steps.
    pub warmup_fraction: f64,
    pub label_smoothing: f64,
    /// Weight of the ground-truth term when teacher logits are supplied.
    pub alpha: f64,
    /// Random horizontal flips.
    pub flip: bool,
    pub optimizer: AdamWConfig,
    /// Samples per gradient shard. Shards are reduced in index order, so
    /// results do not depend on `threads`.
    pub shard_size: usize,
    pub threads: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            min_lr_ratio: 0.01,
            warmup_fraction: 0.1,
            label_smoothing: 0.1,
            alpha: 0.5,
            flip: true,
            optimizer: AdamWConfig::default(),
            shard_size: 8,
            threads: 1,
            eval_batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shard_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch and shard sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("warmup fraction and min lr ratio must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n: usize) -> CosineSchedule {
        let total = self.epochs * self.steps_per_epoch(n);
        CosineSchedule {
            peak: self.lr,
            min: self.lr * self.min_lr_ratio,
            warmup_steps: (self.warmup_fraction * total as f64).round() as usize,
            total_steps: total,
        }
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss_mean: f64,
    pub train_loss_std: f64,
    /// Held-out accuracy, when an eval split was given.
    pub eval_acc: Option<f64>,
    /// Accuracy of the training forward passes (augmented inputs).
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Steps whose gradient norm exceeded the clip threshold.
    pub clipped_steps: usize,
}

struct ShardOut<T> {
    loss: f64,
    correct: usize,
    grads: Vec<Option<Tensor<T>>>,
}

fn shard_step<T: Scalar, M: Classifier<T>>(
    model: &M,
    images: &[&LabeledImage],
    flips: Option<&[bool]>,
    teacher: Option<&[usize]>,
    norm: &Normalization,
    cfg: &TrainConfig,
    batch_len: usize,
) -> Result<ShardOut<T>> {
    let labels: Vec<usize> = images.iter().map(|i| i.label).collect();
    let mut g = Graph::new();
    let x = g.constant(batch_tensor(images, norm, flips)?);
    let logits = model.forward(&mut g, x)?;
    let loss = distilled_loss_node(&mut g, logits, &labels, teacher, cfg.alpha, cfg.label_smoothing, batch_len)?;
    let correct = argmax_rows(g.value(logits))?
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count();
    let grads = g.backward(loss)?.params(model.store().len());
    Ok(ShardOut {
        loss: g.value(loss).data()[0].f64(),
        correct,
        grads,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains `model` in place.
///
/// With `teacher` the objective is the `alpha`-weighted mix of ground-truth
/// and teacher-argmax cross-entropy; `teacher` rows follow `train` order.
/// `on_epoch` runs after every epoch and may write checkpoints.
pub fn train<T, M, F>(
    model: &mut M,
    train: &[LabeledImage],
    eval: Option<&[LabeledImage]>,
    teacher: Option<&TeacherLogits>,
    norm: &Normalization,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    T: Scalar,
    M: Classifier<T>,
    F: FnMut(&EpochRecord, &M) -> Result<()>,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    if let Some(k) = train.iter().map(|i| i.label).find(|&y| y >= model.num_classes()) {
        return Err(Error::config(format!("label {k} >= {} classes", model.num_classes())));
    }
    let teacher_labels = match teacher {
        Some(t) => {
            if t.len() != train.len() || t.classes() != model.num_classes() {
                return Err(Error::shape(format!(
                    "teacher cache is {}×{}, training set is {}×{}",
                    t.len(),
                    t.classes(),
                    train.len(),
                    model.num_classes()
                )));
            }
            Some(t.argmax())
        }
        None => None,
    };

    let schedule = cfg.schedule(train.len());
    let mut opt = AdamW::new(model.store(), cfg.optimizer.clone());
    let root = Rng::new(cfg.seed);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let order = root.fork(2 * epoch as u64).permutation(train.len());
        let mut flip_rng = root.fork(2 * epoch as u64 + 1);
        let flips: Vec<bool> = (0..train.len()).map(|_| cfg.flip && flip_rng.uniform() < 0.5).collect();
        let mut losses = Vec::new();
        let mut correct = 0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let shards: Vec<&[usize]> = batch.chunks(cfg.shard_size).collect();
            let m: &M = model;
            let outs = map_ordered(shards.len(), cfg.threads, |s| {
                let idx = shards[s];
                let images: Vec<&LabeledImage> = idx.iter().map(|&i| &train[i]).collect();
                let f: Vec<bool> = idx.iter().map(|&i| flips[i]).collect();
                let t: Option<Vec<usize>> = teacher_labels.as_ref().map(|tl| idx.iter().map(|&i| tl[i]).collect());
                shard_step(m, &images, Some(&f), t.as_deref(), norm, cfg, batch.len())
            });
            let mut loss = 0.0;
            let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.store().len()];
            for out in outs {
                let out = out?;
                loss += out.loss;
                correct += out.correct;
                for (acc, g) in grads.iter_mut().zip(out.grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                        (None, g) => *acc = g,
                        (Some(_), None) => {}
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: report.steps,
                    loss,
                });
            }
            lr = schedule.lr(report.steps);
            let stats = opt.update(model.store_mut(), &grads, lr)?;
            report.clipped_steps += stats.clipped as usize;
            report.steps += 1;
            losses.push(loss);
        }
        let eval_acc = match eval {
            Some(e) if !e.is_empty() => Some(evaluate(model, e, norm, cfg.eval_batch_size, cfg.threads)?),
            _ => None,
        };
        let (train_loss_mean, train_loss_std) = mean_std(&losses);
        let record = EpochRecord {
            epoch,
            lr,
            train_loss_mean,
            train_loss_std,
            eval_acc,
            train_acc: correct as f64 / train.len() as f64,
        };
        on_epoch(&record, model)?;
        report.epochs.push(record);
    }
    Ok(report)
}

/// Logits `(N, K)` of `data` in order, without augmentation.
pub fn predict<T: Scalar, M: Classifier<T>>(
    model: &M,
    data: &[LabeledImage],
    norm: &Normalization,
    batch_size: usize,
    threads: usize,
) -> Result<Tensor<T>> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::config("predict needs data and a positive batch size"));
    }
    let batches: Vec<&[LabeledImage]> = data.chunks(batch_size).collect();
    let outs = map_ordered(batches.len(), threads, |b| -> Result<Tensor<T>> {
        let images: Vec<&LabeledImage> = batches[b].iter().collect();
        let mut g = Graph::inference();
        let x = g.constant(batch_tensor(&images, norm, None)?);
        let y = model.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    });
    let k = model.num_classes();
    let mut all = Vec::with_capacity(data.len() * k);
    for out in outs {
        all.extend_from_slice(out?.data());
    }
    Tensor::new(&[data.len(), k], all)
}

/// Top-1 accuracy on `data`.
pub fn evaluate<T: Scalar, M: Classifier<T>>(
    model: &M,
    data: &[LabeledImage],
    norm: &Normalization,
    batch_size: usize,
    threads: usize,
) -> Result<f64> {
    let logits = predict(model, data, norm, batch_size, threads)?;
    let hits = argmax_rows(&logits)?
        .iter()
        .zip(data)
        .filter(|(p, img)| **p == img.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
