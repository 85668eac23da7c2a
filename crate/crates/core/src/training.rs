//! SGD with momentum, reduce-on-plateau scheduling, and the epoch loop.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{augment_batch, LabeledImageSet};
use crate::error::{Error, Result};
use crate::metrics::{model_account, topk_accuracy};
use crate::model::{Model, ParamId};
use crate::pruning::{prune_step, PruneEvent};
use crate::regularization::{total_loss, LossBreakdown, LossConfig};
use crate::tensor::{Precision, Tensor};

/// Optimizer and loop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "SgdConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "SgdConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "SgdConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "SgdConfig::default_batch_size")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SgdConfig {
    fn default_lr() -> f64 {
        0.1
    }
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_weight_decay() -> f64 {
        1e-4
    }
    fn default_batch_size() -> usize {
        32
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 1,
            seed: 0,
        }
    }
}

/// Momentum buffers keyed by parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub momentum: BTreeMap<ParamId, Tensor>,
}

impl SgdState {
    /// Keeps the leading `cols` columns of a matrix buffer, if one exists.
    pub fn truncate_columns(&mut self, id: ParamId, cols: usize) -> Result<()> {
        if let Some(v) = self.momentum.get_mut(&id) {
            *v = v.take_columns(cols)?;
        }
        Ok(())
    }

    /// Keeps the leading `len` entries of a vector buffer, if one exists.
    pub fn truncate_prefix(&mut self, id: ParamId, len: usize) -> Result<()> {
        if let Some(v) = self.momentum.get_mut(&id) {
            *v = v.take_prefix(len)?;
        }
        Ok(())
    }
}

/// One momentum-SGD update of a single tensor.
///
/// `g ← grad + wd·p; v ← m·v + g; p ← p − lr·v`, each result rounded to `precision`.
pub fn sgd_update(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    precision: Precision,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    if param.shape() != velocity.shape() {
        return Err(Error::shape("sgd_step", param.shape(), velocity.shape()));
    }
    let r = |v: f64| precision.round(v);
    for ((p, &dg), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        let g = r(dg + r(weight_decay * *p));
        *v = r(r(momentum * *v) + g);
        *p = r(*p - r(lr * *v));
    }
    Ok(())
}

/// Applies one update to every parameter that has a gradient; momentum buffers start at zero.
pub fn sgd_step(
    model: &mut Model,
    grads: &[(ParamId, Tensor)],
    state: &mut SgdState,
    cfg: &SgdConfig,
    lr: f64,
    precision: Precision,
) -> Result<()> {
    for (id, grad) in grads {
        let param = model
            .param_mut(*id)
            .ok_or_else(|| Error::Usage(format!("model has no parameter {id}")))?;
        let velocity = state
            .momentum
            .entry(*id)
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        sgd_update(param, grad, velocity, lr, cfg.momentum, cfg.weight_decay, precision)?;
        if !param.is_finite() {
            return Err(Error::Numeric(format!("parameter {id} became non-finite after the update")));
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    /// Best monitored loss so far (`None` before the first observation).
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            best: None,
            bad_epochs: 0,
            factor: 0.1,
            patience: 10,
            min_lr: 1e-5,
            threshold: 1e-8,
        }
    }
}

impl PlateauState {
    /// Observes one epoch's loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best - self.threshold => self.bad_epochs += 1,
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub sgd: SgdState,
    pub plateau: PlateauState,
    pub lr: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

/// Stream of the training generator; initialization draws from stream 0.
pub const TRAIN_STREAM: u64 = 1;

impl TrainState {
    pub fn new(model: Model, cfg: &SgdConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        TrainState {
            model,
            sgd: SgdState::default(),
            plateau: PlateauState::default(),
            lr: cfg.lr,
            epoch: 0,
            rng,
        }
    }
}

/// Per-epoch accounting row. Epoch 0 describes the model at initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's minibatches (epoch 0: one pass without updates).
    pub losses: LossBreakdown,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub ranks: Vec<usize>,
    pub sigma: Vec<Vec<f64>>,
    pub params: usize,
    pub dense_params: usize,
    pub compression: f64,
    pub macs: u64,
    /// Held-out top-1 accuracy after the epoch's pruning step.
    pub top1: f64,
    pub events: Vec<PruneEvent>,
}

/// Where and how often `fit` writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub dir: PathBuf,
    pub every: usize,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub precision: Precision,
    pub augment: bool,
    /// Batch prefetch helper threads (0 builds batches inline).
    pub threads: usize,
    pub eval_chunk: usize,
    pub checkpoint: Option<CheckpointPlan>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            precision: Precision::F32,
            augment: false,
            threads: 0,
            eval_chunk: 256,
            checkpoint: None,
        }
    }
}

/// Directory name of the checkpoint written after `epoch`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}")
}

struct Batch {
    x: Tensor,
    labels: Vec<usize>,
}

fn build_batches(
    data: &LabeledImageSet,
    order: &[usize],
    batch_size: usize,
    augment: Option<u64>,
    mut sink: impl FnMut(Batch) -> bool,
) {
    let mut aug_rng = augment.map(ChaCha8Rng::seed_from_u64);
    for idx in order.chunks(batch_size) {
        let (mut x, labels) = data.gather(idx);
        if let Some(rng) = aug_rng.as_mut() {
            augment_batch(&mut x, rng);
        }
        if !sink(Batch { x, labels }) {
            return;
        }
    }
}

/// One optimizer step on one batch; returns the loss breakdown.
fn train_batch(state: &mut TrainState, batch: Batch, loss_cfg: &LossConfig, sgd: &SgdConfig, precision: Precision) -> Result<LossBreakdown> {
    let mut g = Graph::new(precision);
    let x = g.constant(batch.x);
    let fwd = state.model.forward(&mut g, x)?;
    let app = g.cross_entropy(fwd.logits, &batch.labels)?;
    let (total, parts) = total_loss(&mut g, app, &fwd.factors, loss_cfg)?;
    g.check_finite()?;
    let grads = g.backward(total)?;
    let grads: Vec<(ParamId, Tensor)> = fwd
        .bindings
        .iter()
        .map(|&(id, v)| {
            let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()));
            (id, t)
        })
        .collect();
    if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for {id}")));
    }
    sgd_step(&mut state.model, &grads, &mut state.sgd, sgd, state.lr, precision)?;
    Ok(parts)
}

fn accumulate(acc: &mut LossBreakdown, parts: &LossBreakdown, weight: f64) {
    acc.app += weight * parts.app;
    acc.orth += weight * parts.orth;
    acc.sort += weight * parts.sort;
    acc.comp += weight * parts.comp;
    acc.reg += weight * parts.reg;
    acc.total += weight * parts.total;
}

/// Loss breakdown of the current model over a whole set, without updates.
pub fn evaluate_losses(model: &Model, data: &LabeledImageSet, loss_cfg: &LossConfig, precision: Precision, chunk: usize) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let n = data.len();
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (x, labels) = data.gather(part);
        let mut g = Graph::new(precision);
        let x = g.constant(x);
        let fwd = model.forward(&mut g, x)?;
        let app = g.cross_entropy(fwd.logits, &labels)?;
        let (_, parts) = total_loss(&mut g, app, &fwd.factors, loss_cfg)?;
        g.check_finite()?;
        accumulate(&mut acc, &parts, part.len() as f64 / n as f64);
    }
    Ok(acc)
}

/// Top-1 accuracy of `model` on `data`.
pub fn accuracy(model: &Model, data: &LabeledImageSet, precision: Precision, chunk: usize) -> Result<f64> {
    let logits = model.predict(&data.images, precision, chunk)?;
    topk_accuracy(&logits, &data.labels, 1)
}

fn snapshot(model: &Model, epoch: usize, losses: LossBreakdown, lr: f64, top1: f64, events: Vec<PruneEvent>) -> Result<EpochRecord> {
    let account = model_account(model)?;
    Ok(EpochRecord {
        epoch,
        losses,
        lr,
        ranks: model.ranks(),
        sigma: model.factors().map(|p| p.sigma.data().to_vec()).collect(),
        params: model.trainable_param_count(),
        dense_params: account.dense_params,
        compression: account.compression,
        macs: account.macs,
        top1,
        events,
    })
}

fn check_data(model: &Model, data: &LabeledImageSet, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input(format!("{what} set is empty")));
    }
    let [c, h, w] = data.sample_shape();
    if (c, h, w) != (model.input.channels, model.input.height, model.input.width) {
        return Err(Error::Input(format!(
            "{what} images are {c}×{h}×{w} but the model expects {}×{}×{}",
            model.input.channels, model.input.height, model.input.width
        )));
    }
    let nc = model.num_classes()?;
    if data.num_classes != nc {
        return Err(Error::Input(format!("{what} set has {} classes, model outputs {nc}", data.num_classes)));
    }
    Ok(())
}

/// Runs epochs `state.epoch + 1 ..= sgd.epochs`, returning one record per epoch.
///
/// A fresh state (epoch 0) also yields the initialization record first.
pub fn fit(
    state: &mut TrainState,
    train: &LabeledImageSet,
    heldout: &LabeledImageSet,
    loss_cfg: &LossConfig,
    sgd: &SgdConfig,
    opts: &FitOptions,
) -> Result<Vec<EpochRecord>> {
    loss_cfg.validate()?;
    sgd.validate()?;
    check_data(&state.model, train, "training")?;
    check_data(&state.model, heldout, "held-out")?;
    let precision = opts.precision;
    let mut records = Vec::new();
    if state.epoch == 0 {
        let losses = evaluate_losses(&state.model, train, loss_cfg, precision, opts.eval_chunk)?;
        let top1 = accuracy(&state.model, heldout, precision, opts.eval_chunk)?;
        records.push(snapshot(&state.model, 0, losses, state.lr, top1, Vec::new())?);
    }
    while state.epoch < sgd.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut state.rng);
        let aug_seed = state.rng.random::<u64>();
        let augment = opts.augment.then_some(aug_seed);

        let mut acc = LossBreakdown::default();
        let n = train.len() as f64;
        let lr = state.lr;
        if opts.threads == 0 {
            let mut result = Ok(());
            build_batches(train, &order, sgd.batch_size, augment, |b| {
                let w = b.labels.len() as f64 / n;
                match train_batch(state, b, loss_cfg, sgd, precision) {
                    Ok(parts) => {
                        accumulate(&mut acc, &parts, w);
                        true
                    }
                    Err(e) => {
                        result = Err(e);
                        false
                    }
                }
            });
            result?;
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Batch>(2 * opts.threads);
                let order = &order;
                s.spawn(move || build_batches(train, order, sgd.batch_size, augment, |b| tx.send(b).is_ok()));
                for b in rx {
                    let w = b.labels.len() as f64 / n;
                    let parts = train_batch(state, b, loss_cfg, sgd, precision)?;
                    accumulate(&mut acc, &parts, w);
                }
                Ok(())
            })?;
        }

        let events = prune_step(&mut state.model, Some(&mut state.sgd), loss_cfg, epoch)?;
        state.lr = state.plateau.step(acc.app, state.lr);
        state.epoch = epoch;
        let top1 = accuracy(&state.model, heldout, precision, opts.eval_chunk)?;
        let record = snapshot(&state.model, epoch, acc, lr, top1, events)?;
        log::info!(
            "epoch {epoch}: app {:.4} total {:.4} params {} ranks {:?} top1 {:.3}",
            record.losses.app,
            record.losses.total,
            record.params,
            record.ranks,
            record.top1
        );
        records.push(record);
        if let Some(plan) = &opts.checkpoint {
            if plan.every > 0 && epoch.is_multiple_of(plan.every) {
                checkpoint::save(&plan.dir.join(checkpoint_name(epoch)), state, &plan.meta)?;
            }
        }
    }
    Ok(records)
}
