use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, EpochRecord};
use super::model::{Params, SiameseNet};
use crate::error::{Error, Result};
use crate::sampler::{PairDataset, PairLabel, PatchPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub early_stop_patience: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 20,
            val_fraction: 0.1,
            early_stop_patience: 3,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return bad("val_fraction must lie in (0, 0.5)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Params, grad: &Params, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let lr_t = (cfg.learning_rate * (1.0 - b2.powi(self.step)).sqrt() / (1.0 - b1.powi(self.step))) as f32;
        let eps = cfg.epsilon as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

fn batch_views<'a>(pairs: &[&'a PatchPair]) -> (Vec<&'a ndarray::Array2<u8>>, Vec<&'a ndarray::Array2<u8>>, Vec<f32>) {
    (
        pairs.iter().map(|p| &p.left.pixels).collect(),
        pairs.iter().map(|p| &p.right.pixels).collect(),
        pairs.iter().map(|p| p.label.target()).collect(),
    )
}

/// Mean loss over `pairs`, weighted by batch size.
pub fn mean_loss(net: &SiameseNet, pairs: &[&PatchPair], batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size) {
        let (l, r, t) = batch_views(chunk);
        total += net.loss(&l, &r, &t)? * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Train with binary cross-entropy and Adam; keeps the weights of the epoch
/// with the lowest validation loss. Epoch 0 in the history is the untrained
/// network.
pub fn train(mut net: SiameseNet, dataset: &PairDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let (similar, different) = dataset.label_counts();
    if similar == 0 || different == 0 {
        return Err(Error::DegenerateLabels);
    }
    if dataset.patch_size != net.patch_size {
        return Err(Error::SizeMismatch {
            expected: net.patch_size,
            actual: dataset.patch_size,
            index: None,
        });
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.rng_seed));
    let n_val = ((dataset.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let val: Vec<&PatchPair> = order[..n_val].iter().map(|&i| &dataset.pairs[i]).collect();
    let mut train_set: Vec<&PatchPair> = order[n_val..].iter().map(|&i| &dataset.pairs[i]).collect();

    let check = |epoch: usize, loss: f64| {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::Diverged { epoch, loss })
        }
    };

    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: check(0, mean_loss(&net, &train_set, cfg.batch_size)?)?,
        val_loss: check(0, mean_loss(&net, &val, cfg.batch_size)?)?,
    }];
    log::info!("epoch 0: train {:.4} val {:.4}", history[0].train_loss, history[0].val_loss);
    let mut best = (history[0].val_loss, 0usize, net.params.clone());
    let mut adam = Adam::new(&net.params);

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(epoch as u64);
        train_set.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_set.chunks(cfg.batch_size) {
            let (l, r, t) = batch_views(chunk);
            let (loss, grad) = net.loss_and_grad(&l, &r, &t)?;
            total += check(epoch, loss)? * chunk.len() as f64;
            adam.update(&mut net.params, &grad, cfg);
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: check(epoch, mean_loss(&net, &val, cfg.batch_size)?)?,
        };
        log::info!("epoch {epoch}: train {:.4} val {:.4}", record.train_loss, record.val_loss);
        if record.val_loss < best.0 {
            best = (record.val_loss, epoch, net.params.clone());
        }
        history.push(record);
        if epoch - best.1 >= cfg.early_stop_patience.max(1) {
            log::info!("early stop after epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }

    net.params = best.2;
    Ok(Checkpoint {
        net,
        train_config: cfg.clone(),
        history,
        best_epoch: best.1,
        manifest_digest: dataset.digest(),
    })
}

/// Fraction of pairs whose predicted class matches the label.
pub fn accuracy(net: &SiameseNet, pairs: &[&PatchPair]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in pairs.chunks(64) {
        let (l, r, _) = batch_views(chunk);
        for (p, pair) in net.classify(&l, &r)?.iter().zip(chunk) {
            let predicted = if *p >= 0.5 { PairLabel::Similar } else { PairLabel::Different };
            correct += (predicted == pair.label) as usize;
        }
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}
