use serde::{Deserialize, Serialize};

use super::{EncodedSample, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{streams, Rng, ScalarMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the type loss for the multi-task model; ignored otherwise.
    pub lambda: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub scalar_mode: ScalarMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            lambda: 0.2,
            seed: 0,
            scalar_mode: ScalarMode::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { kind, lr, m, v, t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        if self.lr == 0.0 {
            return;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Trains `model` in place on a dataset split and returns the mean training
/// loss of every epoch.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let encoded = model.encode(dataset)?;
    train_with(model, &encoded, cfg, |_, _, _| Ok(()))
}

/// Like [`train`] on pre-encoded samples, calling `on_epoch(epoch, loss,
/// model)` after every epoch.
pub fn train_with<F>(model: &mut Model, data: &[EncodedSample], cfg: &TrainConfig, mut on_epoch: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64, &Model) -> Result<()>,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut flat = model.params().flatten();
    if cfg.scalar_mode == ScalarMode::F32 {
        round_f32(&mut flat);
        model.params_mut().assign_flat(&flat)?;
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, flat.len());
    let shuffle_root = Rng::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffle_root.split(streams::SHUFFLE, epoch as u64).permutation(data.len());
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = match model.loss_and_grads(&batch, cfg.lambda) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!("non-finite value in {what}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {loss}, gradient finite: {}", grads.iter().all(|g| g.is_finite())),
                });
            }
            total += loss * batch.len() as f64;
            opt.step(&mut flat, &grads);
            if cfg.scalar_mode == ScalarMode::F32 {
                round_f32(&mut flat);
            }
            model.params_mut().assign_flat(&flat)?;
        }
        let mean = total / data.len() as f64;
        curve.push(mean);
        on_epoch(epoch, mean, model)?;
    }
    Ok(curve)
}
