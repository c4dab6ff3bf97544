//! Minibatch Adam with early stopping on the test loss.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Architecture, BnStats, LossWeights, Mode, Net, DEFAULT_DROPOUT};
use super::{eval_loss, Model, Prepared, Standardizer};
use crate::error::{Error, Result};
use crate::features::{WindowConfig, WindowSample};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub window: WindowConfig,
    pub blocks: Vec<usize>,
    pub dropout: f64,
    pub weights: LossWeights,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            window: WindowConfig::default(),
            blocks: vec![128, 128, 64, 8],
            dropout: DEFAULT_DROPOUT,
            weights: LossWeights::default(),
            max_epochs: 40,
            patience: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Binary variant: the three-class term is dropped.
    pub fn binary(mut self) -> Self {
        self.weights.ce = 0.0;
        self
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::for_window(&self.window, self.blocks.clone(), self.dropout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.binary < 0.0 || self.weights.aux < 0.0 || self.weights.ce < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch norm needs batches of at least 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        self.architecture().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: f64,
    pub test: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curves: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_loss: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub lr: f64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

fn class_freq(samples: &[&WindowSample]) -> [f64; 3] {
    let mut f = [0.0; 3];
    for s in samples {
        f[s.label.index()] += 1.0;
    }
    let n = samples.len().max(1) as f64;
    f.map(|c| c / n)
}

/// Fits a model on `train`, keeping the parameters of the epoch with the
/// lowest eval-mode loss on `test`.
pub fn train(config: &TrainConfig, train: &[&WindowSample], test: &[&WindowSample], validation: &[&WindowSample]) -> Result<(Model, TrainReport)> {
    config.validate()?;
    if train.len() < 2 || test.is_empty() {
        return Err(Error::InsufficientData(format!("{} training and {} test samples", train.len(), test.len())));
    }
    let net = Net::new(config.architecture())?;
    let standardizer = Standardizer::fit(train);
    let tr = Prepared::new(train, &standardizer);
    let te = Prepared::new(test, &standardizer);
    let va = Prepared::new(validation, &standardizer);
    net.check_batch(&tr.batch())?;
    net.check_batch(&te.batch())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut theta = net.init(rng.random());
    let mut bn = BnStats::new(&net.arch);
    let mut adam = Adam::new(theta.len(), config.lr);
    let mut order: Vec<usize> = (0..tr.n).collect();
    let mut batch = Prepared::default();

    let mut best = (f64::INFINITY, 0usize, theta.clone(), bn.clone());
    let mut curves = Vec::new();
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for rows in order.chunks(config.batch_size) {
            if rows.len() < 2 {
                continue;
            }
            tr.gather(rows, &mut batch);
            let (loss, grad, trace) = net.loss_grad(&theta, &batch.batch(), &config.weights, Mode::Train { dropout_seed: rng.random() });
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, detail: format!("batch loss {loss}") });
            }
            net.update_running(&mut bn, &trace);
            adam.step(&mut theta, &grad);
            sum += loss * rows.len() as f64;
            count += rows.len();
        }
        let test_loss = eval_loss(&net, &theta, &bn, &te, &config.weights)?;
        if !test_loss.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("test loss {test_loss}") });
        }
        let validation = if va.n > 0 { Some(eval_loss(&net, &theta, &bn, &va, &config.weights)?) } else { None };
        curves.push(EpochRecord { epoch, train: sum / count.max(1) as f64, test: test_loss, validation });
        if test_loss < best.0 {
            best = (test_loss, epoch, theta.clone(), bn.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (best_test_loss, best_epoch, theta, bn) = best;
    let model = Model { net, theta, bn, standardizer, config: config.clone(), class_freq: class_freq(train) };
    let report = TrainReport { curves, best_epoch, best_test_loss, n_train: tr.n, n_test: te.n };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut theta = vec![1.0, -1.0];
        let mut adam = Adam::new(2, 0.01);
        adam.step(&mut theta, &[3.0, -0.5]);
        assert!((theta[0] - 0.99).abs() < 1e-9);
        assert!((theta[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.weights.binary = -1.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::default().binary().weights.ce, 0.0);
    }
}
