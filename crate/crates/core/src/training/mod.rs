//! Parameter-efficient fine-tuning harness.

mod freeze;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use freeze::{apply_freeze, count_trainable, FreezeMode, FreezePolicy, ParamCount};
pub use optim::{clip_grad_norm, schedule_lr, AdamW};

use crate::datagen::PairedSplit;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, RetrievalMetrics};
use crate::losses::{total_loss_node, LossBreakdown, LossConfig};
use crate::numerics::{ParamId, Tape, Tensor};

/// Loss of one batch of aligned pairs, with parameter gradients when `with_grad` is set.
pub fn batch_loss(
    model: &DualEncoder,
    images: &[Tensor],
    texts: &[Vec<usize>],
    loss: &LossConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<(ParamId, Tensor)>)> {
    let mut tape = Tape::new(&model.store);
    let collect_aux = loss.aux_weight > 0.0;
    let out = model.forward(&mut tape, Some(images), Some(texts), collect_aux)?;
    let v = out.image.expect("image stream").pooled;
    let t = out.text.expect("text stream").pooled;
    let s = tape.matmul(v, t, true)?;
    let (total, parts) = total_loss_node(&mut tape, s, &out.aux_similarities, loss)?;
    if !with_grad || !parts.total.is_finite() {
        return Ok((parts, Vec::new()));
    }
    let grads = tape.backward(total)?;
    Ok((parts, grads.params().to_vec()))
}

/// One optimizer update from a batch. The model is left untouched when the loss or any
/// gradient is non-finite.
pub fn train_step(
    model: &mut DualEncoder,
    opt: &mut AdamW,
    images: &[Tensor],
    texts: &[Vec<usize>],
    loss: &LossConfig,
    grad_clip: f64,
) -> Result<(LossBreakdown, f64)> {
    let step = opt.steps_taken();
    let (parts, grads) = batch_loss(model, images, texts, loss, true)?;
    if !parts.total.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {}", parts.total),
        });
    }
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite gradient for {}", model.store.get(*id).name),
        });
    }
    model.store.zero_grad();
    model.store.accumulate(&grads);
    if grad_clip > 0.0 {
        clip_grad_norm(&mut model.store, grad_clip);
    }
    let before: Vec<(ParamId, Tensor)> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.clone()))
        .collect();
    let lr = opt.step(&mut model.store);
    if let Some(&(id, _)) = before.iter().find(|(id, _)| !model.store.value(*id).is_finite()) {
        let name = model.store.get(id).name.clone();
        for (id, v) in before {
            *model.store.value_mut(id) = v;
        }
        return Err(Error::Diverged {
            step,
            detail: format!("update made {name} non-finite"),
        });
    }
    Ok((parts, lr))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 0.04,
            grad_clip: 0.0,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub triplet: f64,
    pub contrastive: f64,
    pub aux: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean total loss over the epoch's optimizer steps.
    pub mean_step_loss: f64,
    /// Loss over the fixed evaluation batches after the epoch.
    pub train_loss: f64,
    pub val: Option<RetrievalMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneReport {
    /// Loss over the fixed evaluation batches before any update.
    pub initial_train_loss: f64,
    pub initial_val: Option<RetrievalMetrics>,
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
}

/// Each image paired with one caption drawn by `rng`, in shuffled order.
fn sample_pairs<R: Rng>(split: &PairedSplit, rng: &mut R) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..split.num_images()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|i| {
            let caps = &split.image_captions[i];
            (i, caps[rng.gen_range(0..caps.len())])
        })
        .collect()
}

fn gather(split: &PairedSplit, pairs: &[(usize, usize)]) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    pairs
        .iter()
        .map(|&(i, c)| (split.images[i].clone(), split.captions[c].clone()))
        .unzip()
}

fn batches(pairs: &[(usize, usize)], batch_size: usize) -> impl Iterator<Item = &[(usize, usize)]> {
    pairs.chunks(batch_size.max(2)).filter(|b| b.len() >= 2)
}

/// Mean loss over fixed batches: image order as stored, each image with its first caption.
pub fn evaluation_loss(model: &DualEncoder, split: &PairedSplit, cfg: &FinetuneConfig) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = (0..split.num_images())
        .map(|i| (i, split.image_captions[i][0]))
        .collect();
    let mut sum = 0.0;
    let mut n = 0;
    for b in batches(&pairs, cfg.batch_size) {
        let (imgs, caps) = gather(split, b);
        sum += batch_loss(model, &imgs, &caps, &cfg.loss, false)?.0.total;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("training split needs at least 2 images".into()));
    }
    Ok(sum / n as f64)
}

pub fn steps_per_epoch(num_images: usize, batch_size: usize) -> usize {
    let b = batch_size.max(2);
    num_images / b + usize::from(num_images % b >= 2)
}

/// Fine-tunes the currently trainable parameters. On divergence the model keeps the last
/// finite state and the error names the step.
pub fn finetune(
    model: &mut DualEncoder,
    train: &PairedSplit,
    val: Option<&PairedSplit>,
    cfg: &FinetuneConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<FinetuneReport> {
    cfg.loss.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2".into()));
    }
    let mut report = FinetuneReport {
        initial_train_loss: f64::NAN,
        initial_val: None,
        epochs: Vec::new(),
        steps: 0,
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }
    report.initial_train_loss = evaluation_loss(model, train, cfg)?;
    report.initial_val = val.map(|v| evaluate(model, v)).transpose()?;
    let total_steps = cfg.epochs * steps_per_epoch(train.num_images(), cfg.batch_size);
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay, total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for epoch in 1..=cfg.epochs {
        let pairs = sample_pairs(train, &mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for b in batches(&pairs, cfg.batch_size) {
            let (imgs, caps) = gather(train, b);
            let (parts, lr) = train_step(model, &mut opt, &imgs, &caps, &cfg.loss, cfg.grad_clip)?;
            log(&StepLog {
                step: opt.steps_taken(),
                total: parts.total,
                triplet: parts.triplet,
                contrastive: parts.contrastive,
                aux: parts.aux,
                lr,
            });
            sum += parts.total;
            n += 1;
        }
        report.epochs.push(EpochLog {
            epoch,
            mean_step_loss: sum / n.max(1) as f64,
            train_loss: evaluation_loss(model, train, cfg)?,
            val: val.map(|v| evaluate(model, v)).transpose()?,
        });
    }
    report.steps = opt.steps_taken();
    Ok(report)
}

/// `k` seeded (train, held-out) partitions of `0..n`. With `k == 1` the whole range is
/// the training side and the held-out side is empty.
pub fn k_fold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k == 0 || (k > 1 && k > n) {
        return Err(Error::Config(format!("k_folds {k} invalid for {n} items")));
    }
    if k == 1 {
        return Ok(vec![((0..n).collect(), Vec::new())]);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let held = order[lo..hi].to_vec();
            let rest = order[..lo].iter().chain(&order[hi..]).copied().collect();
            (rest, held)
        })
        .collect())
}
