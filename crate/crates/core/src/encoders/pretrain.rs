use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::PairedSplit;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::training::{batch_loss, train_step, AdamW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.04,
            tau: 0.07,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Contrastive loss of the first batch before any update.
    pub initial_loss: f64,
    /// Per-step contrastive loss, measured before each update.
    pub losses: Vec<f64>,
}

/// Trains both towers jointly with the contrastive objective. Every parameter is marked
/// trainable. On divergence the model keeps its last finite state.
pub fn pretrain_backbone(
    model: &mut DualEncoder,
    pairs: &PairedSplit,
    cfg: &PretrainConfig,
    log: &mut dyn FnMut(usize, f64),
) -> Result<PretrainReport> {
    model.store.set_all_trainable(true);
    let mut report = PretrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if pairs.num_images() < 2 || cfg.batch_size < 2 {
        return Err(Error::Input("pretraining needs at least 2 images per batch".into()));
    }
    let loss = LossConfig {
        alpha_triplet: 0.0,
        alpha_contrastive: 1.0,
        aux_weight: 0.0,
        tau: cfg.tau,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay, cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let batch = cfg.batch_size.min(pairs.num_images());
    for step in 0..cfg.steps {
        if order.len() < batch {
            order = (0..pairs.num_images()).collect();
            order.shuffle(&mut rng);
        }
        let idx = order.split_off(order.len() - batch);
        let (imgs, caps): (Vec<_>, Vec<_>) = idx
            .iter()
            .map(|&i| {
                let c = &pairs.image_captions[i];
                (pairs.images[i].clone(), pairs.captions[c[rng.gen_range(0..c.len())]].clone())
            })
            .unzip();
        if step == 0 {
            report.initial_loss = batch_loss(model, &imgs, &caps, &loss, false)?.0.total;
        }
        let (parts, _) = train_step(model, &mut opt, &imgs, &caps, &loss, 0.0)?;
        report.losses.push(parts.total);
        log(step, parts.total);
    }
    Ok(report)
}
