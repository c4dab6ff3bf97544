//! Reaction mapping: windows of facial features to reward-class
//! probabilities.

pub mod checkpoint;
pub mod net;
pub mod search;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{WindowConfig, WindowSample, FAU_DIM, HEAD_DIM};
pub use net::{Architecture, Batch, BnStats, LossWeights, Mode, Net, Prediction};
pub use train::{train, EpochRecord, TrainConfig, TrainReport};

/// Per base feature centering and scaling, shared by every window position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub fau_mean: Vec<f64>,
    pub fau_scale: Vec<f64>,
    pub head_mean: Vec<f64>,
    pub head_scale: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = f64>, count: &mut f64, sum: &mut f64, sq: &mut f64) {
    for v in rows {
        *count += 1.0;
        *sum += v;
        *sq += v * v;
    }
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { fau_mean: vec![0.0; FAU_DIM], fau_scale: vec![1.0; FAU_DIM], head_mean: vec![0.0; HEAD_DIM], head_scale: vec![1.0; HEAD_DIM] }
    }

    pub fn fit(samples: &[&WindowSample]) -> Self {
        let fit_block = |dim: usize, pick: &dyn Fn(&WindowSample) -> &[f64]| {
            let mut mean = vec![0.0; dim];
            let mut scale = vec![1.0; dim];
            for d in 0..dim {
                let (mut n, mut s, mut q) = (0.0, 0.0, 0.0);
                for smp in samples {
                    moments(pick(smp).iter().skip(d).step_by(dim).copied(), &mut n, &mut s, &mut q);
                }
                if n > 0.0 {
                    let m = s / n;
                    let var = (q / n - m * m).max(0.0);
                    mean[d] = m;
                    scale[d] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
                }
            }
            (mean, scale)
        };
        let (fau_mean, fau_scale) = fit_block(FAU_DIM, &|s| &s.fau);
        let (head_mean, head_scale) = fit_block(HEAD_DIM, &|s| &s.head);
        Self { fau_mean, fau_scale, head_mean, head_scale }
    }

    pub fn apply_fau(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().enumerate().map(|(i, v)| (v - self.fau_mean[i % FAU_DIM]) / self.fau_scale[i % FAU_DIM]));
    }

    pub fn apply_head(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().enumerate().map(|(i, v)| (v - self.head_mean[i % HEAD_DIM]) / self.head_scale[i % HEAD_DIM]));
    }
}

/// Standardized, row-major copy of a sample set.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub n: usize,
    pub fau: Vec<f64>,
    pub head: Vec<f64>,
    pub labels: Vec<usize>,
    pub aux: Vec<f64>,
    fau_w: usize,
    head_w: usize,
    aux_w: usize,
}

impl Prepared {
    pub fn new(samples: &[&WindowSample], std: &Standardizer) -> Self {
        let mut p = Prepared::default();
        if let Some(s) = samples.first() {
            p.fau_w = s.fau.len();
            p.head_w = s.head.len();
            p.aux_w = s.aux.len();
        }
        for s in samples {
            std.apply_fau(&s.fau, &mut p.fau);
            std.apply_head(&s.head, &mut p.head);
            p.labels.push(s.label.index());
            p.aux.extend_from_slice(&s.aux);
        }
        p.n = samples.len();
        p
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch { n: self.n, fau: &self.fau, head: &self.head, labels: &self.labels, aux: &self.aux }
    }

    /// Gathers the given rows into `out`.
    pub fn gather(&self, rows: &[usize], out: &mut Prepared) {
        out.n = rows.len();
        out.fau_w = self.fau_w;
        out.head_w = self.head_w;
        out.aux_w = self.aux_w;
        out.fau.clear();
        out.head.clear();
        out.labels.clear();
        out.aux.clear();
        for &r in rows {
            out.fau.extend_from_slice(&self.fau[r * self.fau_w..(r + 1) * self.fau_w]);
            out.head.extend_from_slice(&self.head[r * self.head_w..(r + 1) * self.head_w]);
            out.labels.push(self.labels[r]);
            out.aux.extend_from_slice(&self.aux[r * self.aux_w..(r + 1) * self.aux_w]);
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Batch<'_> {
        Batch {
            n: end - start,
            fau: &self.fau[start * self.fau_w..end * self.fau_w],
            head: &self.head[start * self.head_w..end * self.head_w],
            labels: &self.labels[start..end],
            aux: &self.aux[start * self.aux_w..end * self.aux_w],
        }
    }
}

/// A trained reaction mapping with everything needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Net,
    pub theta: Vec<f64>,
    pub bn: BnStats,
    pub standardizer: Standardizer,
    pub config: TrainConfig,
    /// Training-set frequencies of -5, -1, +6.
    pub class_freq: [f64; 3],
}

const EVAL_CHUNK: usize = 256;

impl Model {
    pub fn window(&self) -> WindowConfig {
        self.config.window
    }

    pub fn predict(&self, sample: &WindowSample) -> Result<Prediction> {
        Ok(self.predict_many(&[sample])?.remove(0))
    }

    pub fn predict_many(&self, samples: &[&WindowSample]) -> Result<Vec<Prediction>> {
        let data = Prepared::new(samples, &self.standardizer);
        self.predict_prepared(&data)
    }

    pub fn predict_prepared(&self, data: &Prepared) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(data.n);
        let mut start = 0;
        while start < data.n {
            let end = (start + EVAL_CHUNK).min(data.n);
            let b = data.range(start, end);
            self.net.check_batch(&b)?;
            let t = self.net.forward(&self.theta, b.fau, b.head, b.n, Mode::Eval(&self.bn));
            out.extend(t.predictions(self.net.arch.aux_out));
            start = end;
        }
        Ok(out)
    }

    /// Mean eval-mode loss over a prepared set.
    pub fn eval_loss(&self, data: &Prepared) -> Result<f64> {
        eval_loss(&self.net, &self.theta, &self.bn, data, &self.config.weights)
    }

    /// Predictions for raw (unstandardized) window inputs.
    pub fn predict_raw(&self, fau: &[f64], head: &[f64]) -> Result<Prediction> {
        let mut f = Vec::with_capacity(fau.len());
        let mut h = Vec::with_capacity(head.len());
        self.standardizer.apply_fau(fau, &mut f);
        self.standardizer.apply_head(head, &mut h);
        if f.len() != self.net.arch.fau_in || h.len() != self.net.arch.head_in {
            return Err(Error::Shape(format!(
                "window widths {}/{} do not match the model's {}/{}",
                f.len(),
                h.len(),
                self.net.arch.fau_in,
                self.net.arch.head_in
            )));
        }
        let t = self.net.forward(&self.theta, &f, &h, 1, Mode::Eval(&self.bn));
        Ok(t.predictions(self.net.arch.aux_out).remove(0))
    }
}

pub fn eval_loss(net: &Net, theta: &[f64], bn: &BnStats, data: &Prepared, w: &LossWeights) -> Result<f64> {
    if data.n == 0 {
        return Err(Error::InsufficientData("empty evaluation set".into()));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < data.n {
        let end = (start + EVAL_CHUNK).min(data.n);
        let b = data.range(start, end);
        net.check_batch(&b)?;
        let t = net.forward(theta, b.fau, b.head, b.n, Mode::Eval(bn));
        total += net.batch_loss(&t, &b, w).0 * b.n as f64;
        start = end;
    }
    Ok(total / data.n as f64)
}
