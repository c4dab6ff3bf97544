//! Random hyperparameter search over cross-validation folds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};

/// Candidate values. Ranges are inclusive; a range with equal ends is a
/// fixed value. The learning rate is drawn log-uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub k: Vec<usize>,
    pub l: Vec<usize>,
    pub dropout: (f64, f64),
    pub lambda1: (f64, f64),
    pub lambda2: (f64, f64),
    pub trunks: Vec<Vec<usize>>,
}

impl Default for SearchSpace {
    /// Window offsets cover 2.8 s before to 3.6 s after the labeled frame
    /// in 0.3 s aggregated frames.
    fn default() -> Self {
        Self {
            lr: (1e-4, 1e-2),
            batch_sizes: vec![8, 16, 32],
            k: (0..=9).collect(),
            l: (0..=12).collect(),
            dropout: (0.0, 0.7),
            lambda1: (0.0, 4.0),
            lambda2: (0.0, 2.0),
            trunks: vec![vec![128, 128, 64, 8], vec![128, 64, 8], vec![64, 32, 8], vec![128, 128, 64, 32, 8]],
        }
    }
}

impl SearchSpace {
    /// The single point `cfg`.
    pub fn point(cfg: &TrainConfig) -> Self {
        Self {
            lr: (cfg.lr, cfg.lr),
            batch_sizes: vec![cfg.batch_size],
            k: vec![cfg.window.k],
            l: vec![cfg.window.l],
            dropout: (cfg.dropout, cfg.dropout),
            lambda1: (cfg.weights.binary, cfg.weights.binary),
            lambda2: (cfg.weights.aux, cfg.weights.aux),
            trunks: vec![cfg.blocks.clone()],
        }
    }

    pub fn sample<R: Rng>(&self, base: &TrainConfig, rng: &mut R) -> Result<TrainConfig> {
        fn pick<'a, T, R: Rng>(v: &'a [T], rng: &mut R, what: &str) -> Result<&'a T> {
            if v.is_empty() {
                return Err(Error::InvalidArgument(format!("empty candidate list for {what}")));
            }
            Ok(&v[rng.random_range(0..v.len())])
        }
        fn uniform<R: Rng>(r: (f64, f64), rng: &mut R) -> f64 {
            if r.0 == r.1 {
                r.0
            } else {
                rng.random_range(r.0..=r.1)
            }
        }
        let mut c = base.clone();
        c.lr = if self.lr.0 == self.lr.1 { self.lr.0 } else { uniform((self.lr.0.ln(), self.lr.1.ln()), rng).exp() };
        c.batch_size = *pick(&self.batch_sizes, rng, "batch size")?;
        c.window.k = *pick(&self.k, rng, "k")?;
        c.window.l = *pick(&self.l, rng, "l")?;
        c.dropout = uniform(self.dropout, rng);
        c.weights.binary = uniform(self.lambda1, rng);
        c.weights.aux = uniform(self.lambda2, rng);
        c.blocks = pick(&self.trunks, rng, "trunk")?.clone();
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub config: TrainConfig,
    pub fold_losses: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub draws: Vec<Draw>,
}

/// Draws `n_draws` configurations and returns the one with the lowest mean
/// fold loss. `evaluate` returns one test loss per fold.
pub fn random_search<F>(space: &SearchSpace, base: &TrainConfig, n_draws: usize, seed: u64, mut evaluate: F) -> Result<SearchResult>
where
    F: FnMut(&TrainConfig) -> Result<Vec<f64>>,
{
    if n_draws == 0 {
        return Err(Error::InvalidArgument("n_draws must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<Draw> = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let config = space.sample(base, &mut rng)?;
        let fold_losses = evaluate(&config)?;
        if fold_losses.is_empty() {
            return Err(Error::InsufficientData("evaluator returned no folds".into()));
        }
        let mean_loss = fold_losses.iter().sum::<f64>() / fold_losses.len() as f64;
        draws.push(Draw { config, fold_losses, mean_loss });
    }
    let best = draws
        .iter()
        .min_by(|a, b| a.mean_loss.total_cmp(&b.mean_loss))
        .expect("at least one draw")
        .config
        .clone();
    Ok(SearchResult { best, draws })
}
