//! Focal loss, Adam, minority oversampling and cross-validated training.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use diffcore::{Array, Mode, Tape, Var};
use ndarray::{ArrayD, IxDyn};

use crate::cohort::SplitPlan;
use crate::error::{contract, Error, Result};
use crate::evaluation::average_precision;
use crate::models::{build_model, ArchSpec, Model, ModalityBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_budget: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub batch_size: usize,
    pub oversample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_budget: 60,
            lr_start: 1e-5,
            lr_peak: 1e-4,
            warmup_epochs: 5.0,
            weight_decay: 1e-4,
            focal_gamma: 2.0,
            batch_size: 16,
            oversample: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            return Err(contract("need 0 < lr_start <= lr_peak"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(contract("focal_gamma must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be >= 1"));
        }
        if !(self.warmup_epochs >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(contract("warmup_epochs and weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Independent sub-seed for `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

fn check_targets(b: usize, targets: &[u8]) -> Result<()> {
    if b == 0 {
        return Err(Error::EmptyDataset("focal loss on an empty batch".into()));
    }
    if targets.len() != b {
        return Err(contract(format!("{} targets for batch of {b}", targets.len())));
    }
    if targets.iter().any(|&t| t > 1) {
        return Err(contract("targets must be 0 or 1"));
    }
    Ok(())
}

/// Focal loss node on `tape` for logits `[B, 2]`.
pub fn focal_loss_graph(tape: &mut Tape, logits: Var, targets: &[u8], gamma: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(contract(format!("logits must be [B, 2], got {shape:?}")));
    }
    check_targets(shape[0], targets)?;
    let mut onehot = ArrayD::zeros(IxDyn(&shape));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t as usize]] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let logpt = tape.sum_axis(picked, 1)?;
    let nll = if gamma == 0.0 {
        tape.neg(logpt)?
    } else {
        let pt = tape.exp(logpt)?;
        let q = tape.neg(pt)?;
        let q = tape.add_scalar(q, 1.0)?;
        let w = tape.pow_scalar(q, gamma)?;
        let wl = tape.mul(w, logpt)?;
        tape.neg(wl)?
    };
    Ok(tape.mean(nll)?)
}

/// Mean of −(1−p_t)^γ·log p_t over the batch.
pub fn focal_loss(logits: &Array, targets: &[u8], gamma: f64) -> Result<f64> {
    if logits.ndim() != 2 || logits.shape()[1] != 2 {
        return Err(contract(format!("logits must be [B, 2], got {:?}", logits.shape())));
    }
    check_targets(logits.shape()[0], targets)?;
    let total: f64 = logits
        .outer_iter()
        .zip(targets)
        .map(|(row, &t)| {
            let m = row[0].max(row[1]);
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            let logpt = row[t as usize] - lse;
            let w = if gamma == 0.0 { 1.0 } else { (1.0 - logpt.exp()).powf(gamma) };
            -w * logpt
        })
        .sum();
    Ok(total / targets.len() as f64)
}

/// Linear warmup from `lr_start` to `lr_peak`, then constant.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_epochs <= 0.0 || epoch >= cfg.warmup_epochs {
        return cfg.lr_peak;
    }
    let f = epoch.max(0.0) / cfg.warmup_epochs;
    cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * f
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Array]) -> Self {
        Self {
            m: params.iter().map(|p| Array::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array::zeros(p.raw_dim())).collect(),
            step: 0,
        }
    }
}

/// One Adam update with coupled L2 (`weight_decay·param` added to the gradient).
pub fn adam_step(params: &mut [Array], grads: &[Array], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(contract(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(contract(format!(
                "adam_step: param {i} shape {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            let g = g + weight_decay * *p;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        });
    }
    Ok(())
}

/// Shuffled epoch indices with the minority class repeated up to the
/// majority count.
pub fn oversample_minority(labels: &[u8], seed: u64) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(contract("oversampling needs both classes"));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = majority.clone();
    let reps = majority.len() / minority.len();
    for _ in 0..reps {
        out.extend_from_slice(&minority);
    }
    let extra = majority.len() % minority.len();
    if extra > 0 {
        let mut pool = minority.clone();
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..extra]);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Aligned inputs for a set of subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub ids: Vec<String>,
    pub batch: ModalityBatch,
    pub labels: Vec<u8>,
}

impl TrainData {
    pub fn new(ids: Vec<String>, batch: ModalityBatch, labels: Vec<u8>) -> Result<Self> {
        let b = batch.batch_size()?;
        if b != ids.len() || b != labels.len() {
            return Err(contract(format!(
                "{} ids, {} labels, batch of {b}",
                ids.len(),
                labels.len()
            )));
        }
        Ok(Self { ids, batch, labels })
    }

    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| contract(format!("subject {id} missing from training data")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Best-validation-AP model, or the initial model when no epoch ran.
    pub checkpoint: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl FoldResult {
    pub fn best_val_ap(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history[e].val_ap)
    }
}

const PREDICT_CHUNK: usize = 64;

/// Eval-mode class-1 probabilities for `idx`, in chunks.
pub fn predict_indices(model: &Model, batch: &ModalityBatch, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(PREDICT_CHUNK) {
        out.extend(model.predict_proba(&batch.select(chunk))?);
    }
    Ok(out)
}

/// One training step; returns the batch loss.
fn train_step(model: &mut Model, state: &mut AdamState, batch: &ModalityBatch, targets: &[u8], cfg: &TrainConfig, lr: f64, seed: u64) -> Result<f64> {
    let mut tape = Tape::new(Mode::Train, seed);
    let vars = model.bind(&mut tape, true);
    let logits = model.logits_graph(&mut tape, &vars, batch)?;
    let loss = focal_loss_graph(&mut tape, logits, targets, cfg.focal_gamma)?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss)?;
    let g: Vec<Array> = vars
        .iter()
        .zip(model.params.values())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Array::zeros(p.raw_dim())))
        .collect();
    adam_step(model.params.values_mut(), &g, state, lr, cfg.weight_decay)?;
    Ok(value)
}

/// Trains one fold; see [`train_cv`].
pub fn train_fold(data: &TrainData, train_idx: &[usize], val_idx: &[usize], spec: &ArchSpec, cfg: &TrainConfig, fold: usize) -> Result<FoldResult> {
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| data.labels[i]).collect();
    for (name, l) in [("training", &train_labels), ("validation", &val_labels)] {
        if !l.contains(&0) || !l.contains(&1) {
            return Err(Error::Stratification(format!("fold {fold}: {name} data has a single class")));
        }
    }
    let fold_seed = derive_seed(cfg.seed, fold as u64 + 1);
    let mut model = build_model(spec, derive_seed(fold_seed, 0))?;
    let mut state = AdamState::new(model.params.values());
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(cfg.epochs_budget);
    let mut step_counter = 0u64;
    for epoch in 0..cfg.epochs_budget {
        let epoch_seed = derive_seed(fold_seed, 1 + epoch as u64);
        let order: Vec<usize> = if cfg.oversample {
            oversample_minority(&train_labels, epoch_seed)?
        } else {
            let mut o: Vec<usize> = (0..train_idx.len()).collect();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
            o
        };
        let n_steps = order.len().div_ceil(cfg.batch_size);
        let mut loss_sum = 0.0;
        for (s, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at(epoch as f64 + s as f64 / n_steps as f64, cfg);
            let rows: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let targets: Vec<u8> = chunk.iter().map(|&k| train_labels[k]).collect();
            let b = data.batch.select(&rows);
            step_counter += 1;
            let step_seed = derive_seed(fold_seed ^ 0x5eed, step_counter);
            loss_sum += train_step(&mut model, &mut state, &b, &targets, cfg, lr, step_seed)?;
        }
        let probs = predict_indices(&model, &data.batch, val_idx)?;
        let val_ap = average_precision(&probs, &val_labels)?;
        history.push(EpochRecord {
            epoch,
            lr: lr_at(epoch as f64, cfg),
            train_loss: loss_sum / n_steps as f64,
            val_ap,
        });
        if best_epoch.is_none_or(|e: usize| val_ap > history[e].val_ap) {
            best_epoch = Some(epoch);
            best = model.clone();
        }
    }
    Ok(FoldResult {
        fold,
        checkpoint: best,
        history,
        best_epoch,
    })
}

/// One model per fold of `split`, keeping each fold's best-validation-AP
/// checkpoint. Folds train in parallel; results are seed-deterministic.
pub fn train_cv(data: &TrainData, split: &SplitPlan, spec: &ArchSpec, cfg: &TrainConfig) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    spec.validate()?;
    let folds: Vec<(Vec<usize>, Vec<usize>)> = split
        .folds
        .iter()
        .map(|f| Ok((data.indices_of(&f.train_ids)?, data.indices_of(&f.val_ids)?)))
        .collect::<Result<_>>()?;
    folds
        .par_iter()
        .enumerate()
        .map(|(k, (tr, va))| train_fold(data, tr, va, spec, cfg, k))
        .collect()
}

/// Mean over models of the class-1 softmax probability.
pub fn ensemble_predict(models: &[Model], batch: &ModalityBatch) -> Result<Vec<f64>> {
    let first = models.first().ok_or_else(|| contract("ensemble needs at least one model"))?;
    let n = batch.batch_size()?;
    let idx: Vec<usize> = (0..n).collect();
    let mut acc = predict_indices(first, batch, &idx)?;
    for m in &models[1..] {
        for (a, p) in acc.iter_mut().zip(predict_indices(m, batch, &idx)?) {
            *a += p;
        }
    }
    let k = models.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}
