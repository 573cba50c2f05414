use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::prune::evaluate_accuracy;
use crate::tensor::{Mode, Rng, Sgd, SgdConfig, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f32,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !self.lr0.is_finite() || self.lr0 < 0.0 {
            return fail(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if let Some(&m) = self.milestones.last() {
            if m >= self.epochs {
                return fail(format!("milestone {m} is not below epochs {}", self.epochs));
            }
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^(number of milestones ≤ epoch)`; epochs are 0-indexed.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f32 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
    (0..passed).fold(cfg.lr0, |lr, _| lr * cfg.decay_factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetunePreset {
    Cifar,
    Imagenet,
    Desk,
}

impl FinetunePreset {
    pub fn config(self, seed: u64) -> TrainConfig {
        let (epochs, lr0, batch_size, milestones) = match self {
            FinetunePreset::Cifar => (50, 0.001, 128, vec![20, 30, 40]),
            FinetunePreset::Imagenet => (10, 0.0001, 128, vec![5, 8]),
            FinetunePreset::Desk => (30, 0.01, 32, vec![15, 25]),
        };
        TrainConfig {
            epochs,
            lr0,
            weight_decay: 0.005,
            momentum: 0.9,
            batch_size,
            milestones,
            decay_factor: 0.5,
            seed,
        }
    }
}

impl FromStr for FinetunePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar" => Ok(FinetunePreset::Cifar),
            "imagenet" => Ok(FinetunePreset::Imagenet),
            "desk" => Ok(FinetunePreset::Desk),
            _ => Err(Error::Config(format!(
                "unknown fine-tune preset {s:?} (expected cifar, imagenet or desk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_val_acc: f64,
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_acc).unwrap();
        }
        out
    }
}

fn check_shapes(net: &Network, ds: &Dataset, what: &str) -> Result<()> {
    let want = net.spec().input_shape;
    if ds.sample_shape() != want {
        return Err(Error::Dataset(format!(
            "{what} samples are {:?} but the network expects {want:?}",
            ds.sample_shape()
        )));
    }
    if ds.num_classes() > net.spec().num_classes {
        return Err(Error::Dataset(format!(
            "{what} has {} classes but the network predicts {}",
            ds.num_classes(),
            net.spec().num_classes
        )));
    }
    Ok(())
}

/// Minibatch SGD with cross-entropy loss. Epoch `e` visits the training set
/// in an order drawn from `Rng::derive(seed, e + 1)`.
pub fn train(net: &mut Network, train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_shapes(net, train_ds, "training set")?;
    check_shapes(net, val_ds, "validation set")?;
    let start = Instant::now();
    let mut opt = Sgd::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let step = SgdConfig {
            lr,
            weight_decay: cfg.weight_decay,
            momentum: cfg.momentum,
        };
        let order_seed = Rng::derive(cfg.seed, epoch as u64 + 1).next_u64();
        let mut loss_sum = 0.0f64;
        for (images, labels) in batches(train_ds, cfg.batch_size, Some(order_seed))? {
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let f = net.record(&mut tape, x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(f.logits, &labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            loss_sum += value as f64 * labels.len() as f64;
            tape.backward(loss)?;
            net.accumulate_grads(&tape, &f.params)?;
            net.apply_norm_updates(f.norm_updates);
            opt.step(net.params_mut(), step)?;
        }
        epochs.push(EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / train_ds.len() as f64,
            val_acc: evaluate_accuracy(net, val_ds)?,
        });
    }
    Ok(TrainReport {
        final_val_acc: epochs.last().map(|e| e.val_acc).unwrap_or(0.0),
        epochs,
        wall_time: start.elapsed(),
    })
}

pub fn finetune(
    net: &mut Network,
    train_ds: &Dataset,
    val_ds: &Dataset,
    preset: FinetunePreset,
    seed: u64,
) -> Result<TrainReport> {
    train(net, train_ds, val_ds, &preset.config(seed))
}
