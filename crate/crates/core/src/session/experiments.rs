//! Headless experiments and their JSON/CSV reports.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::online::{run_online_episode, MetricsRow, SessionConfig};
use crate::dataset::{build_dataset, derive_seed, Dataset, DatasetConfig};
use crate::error::{Error, Result};
use crate::features::{make_splits, partition, Splits, WindowSample};
use crate::gridworld::{EnvState, RewardSpec};
use crate::inference::{rank_episode, Predictor, RankConfig};
use crate::model::{train, Model, TrainConfig, TrainReport};
use crate::observer::ObserverProfile;
use crate::planning::{run_episode, RandomPolicy};
use crate::robotic::{evaluate_transfer, TrajectorySet, TransferReport};
use crate::stats::{binomial_test, wilcoxon_signed_rank, Alternative, WilcoxonResult};

/// Fits a model on the non-holdout data of `ds`.
pub fn train_final(ds: &Dataset, splits: &Splits, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let parts = partition(&ds.samples, &splits.final_fold, ds.episode_ticks());
    let pick = |k: &str| parts[k].iter().map(|i| &ds.samples[*i]).collect::<Vec<&WindowSample>>();
    train(cfg, &pick("train"), &pick("test"), &pick("validation"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub rank: RankConfig,
    /// Independent trainings; their per-subject taus are averaged.
    pub reps: usize,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self { dataset: DatasetConfig::default(), train: TrainConfig::default(), rank: RankConfig::default(), reps: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTau {
    pub subject: usize,
    pub holdout_episode: usize,
    /// One per repetition; `None` when the episode gave no evidence.
    pub taus: Vec<Option<f64>>,
    pub mean_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepSummary {
    pub train_seed: u64,
    pub best_epoch: usize,
    pub best_test_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub subjects: Vec<SubjectTau>,
    /// Per-subject mean taus, descending.
    pub sorted_taus: Vec<f64>,
    pub mean_tau: f64,
    /// Standard error of the mean over all subject-repetition taus.
    pub se_tau: f64,
    /// One-sided test of the per-subject means against zero.
    pub wilcoxon: Option<WilcoxonResult>,
    pub reps: Vec<RepSummary>,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn holdout_ranking(cfg: &HoldoutConfig) -> Result<HoldoutReport> {
    let ds = build_dataset(&cfg.dataset)?;
    holdout_ranking_on(&ds, cfg)
}

/// Trains `reps` models on the non-holdout data and ranks every subject's
/// holdout episode with each.
pub fn holdout_ranking_on(ds: &Dataset, cfg: &HoldoutConfig) -> Result<HoldoutReport> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("at least one repetition required".into()));
    }
    let splits = make_splits(&ds.episodes_per_subject(), ds.config.seed)?;
    let truth = RewardSpec::ground_truth();
    let mut subjects: Vec<SubjectTau> = splits
        .holdout
        .iter()
        .enumerate()
        .map(|(subject, &holdout_episode)| SubjectTau { subject, holdout_episode, taus: Vec::new(), mean_tau: 0.0 })
        .collect();
    let mut reps = Vec::new();
    for rep in 0..cfg.reps {
        let train_seed = derive_seed(cfg.train.seed, &[rep as u64]);
        let (model, report) = train_final(ds, &splits, &TrainConfig { seed: train_seed, ..cfg.train.clone() })?;
        reps.push(RepSummary { train_seed, best_epoch: report.best_epoch, best_test_loss: report.best_test_loss, epochs: report.curves.len() });
        for s in &mut subjects {
            let out = rank_episode(&model, &ds.sessions[s.subject][s.holdout_episode], &truth, &cfg.rank)?;
            s.taus.push(out.map(|o| o.tau));
        }
    }
    let mut all = Vec::new();
    for s in &mut subjects {
        // an episode without evidence counts as the random baseline
        let t: Vec<f64> = s.taus.iter().map(|t| t.unwrap_or(0.0)).collect();
        s.mean_tau = t.iter().sum::<f64>() / t.len() as f64;
        all.extend(t);
    }
    let means: Vec<f64> = subjects.iter().map(|s| s.mean_tau).collect();
    let mut sorted_taus = means.clone();
    sorted_taus.sort_by(|a, b| b.total_cmp(a));
    let (mean_tau, se_tau) = mean_se(&all);
    let wilcoxon = match wilcoxon_signed_rank(&means, 0.0, Alternative::Greater) {
        Ok(w) => Some(w),
        Err(Error::InsufficientData(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(HoldoutReport { subjects, sorted_taus, mean_tau, se_tau, wilcoxon, reps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub confusion: f64,
    pub mean_tau: f64,
    pub se_tau: f64,
    pub report: HoldoutReport,
}

/// Holdout ranking at each confusion rate of the base profile.
pub fn noise_sweep(base: &HoldoutConfig, levels: &[f64]) -> Result<Vec<SweepPoint>> {
    levels
        .iter()
        .map(|&c| {
            let mut cfg = base.clone();
            cfg.dataset.profile = cfg.dataset.profile.clone().with_confusion(c);
            let report = holdout_ranking(&cfg)?;
            Ok(SweepPoint { confusion: c, mean_tau: report.mean_tau, se_tau: report.se_tau, report })
        })
        .collect()
}

/// Whether each mean is at most the previous one plus the standard error
/// of their difference.
pub fn non_increasing_within_se(points: &[SweepPoint]) -> bool {
    points.windows(2).all(|w| w[1].mean_tau <= w[0].mean_tau + (w[0].se_tau.powi(2) + w[1].se_tau.powi(2)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineBatchConfig {
    pub session: SessionConfig,
    pub seeds: Vec<u64>,
    pub baseline_episodes: usize,
    pub baseline_seed: u64,
}

impl Default for OnlineBatchConfig {
    fn default() -> Self {
        Self { session: SessionConfig::default(), seeds: (0..10).collect(), baseline_episodes: 100, baseline_seed: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRun {
    pub seed: u64,
    pub final_return: i64,
    pub final_map: RewardSpec,
    pub final_posterior: Vec<f64>,
    pub passenger_highest: bool,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub episodes: usize,
    pub mean_return: f64,
    pub se_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub runs: Vec<OnlineRun>,
    pub n_positive: usize,
    /// One-sided binomial test of `n_positive` against one half.
    pub binomial_p: f64,
    pub n_passenger_highest: usize,
    pub mean_return: f64,
    pub random_baseline: Baseline,
    #[serde(skip)]
    pub metrics: Vec<(u64, Vec<MetricsRow>)>,
}

/// Mean return of the uniformly random policy.
pub fn random_baseline(truth: RewardSpec, episodes: usize, seed: u64) -> Result<Baseline> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("at least one baseline episode required".into()));
    }
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let s = derive_seed(seed, &[i as u64]);
        let env = EnvState::new_episode(derive_seed(s, &[1]), truth);
        let (log, _) = run_episode(env, &mut RandomPolicy::new(derive_seed(s, &[4])))?;
        returns.push(log.total_reward() as f64);
    }
    let (mean_return, se_return) = mean_se(&returns);
    Ok(Baseline { episodes, mean_return, se_return })
}

pub fn online_batch(cfg: &OnlineBatchConfig, predictor: Arc<dyn Predictor + Send + Sync>) -> Result<OnlineReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed required".into()));
    }
    let mut runs = Vec::new();
    let mut metrics = Vec::new();
    for &seed in &cfg.seeds {
        let (_, o) = run_online_episode(SessionConfig { seed, ..cfg.session.clone() }, predictor.clone())?;
        runs.push(OnlineRun {
            seed,
            final_return: o.final_return,
            final_map: o.final_map,
            final_posterior: o.final_posterior,
            passenger_highest: o.passenger_highest,
            updates: o.updates,
        });
        metrics.push((seed, o.metrics));
    }
    let n = runs.len();
    let n_positive = runs.iter().filter(|r| r.final_return > 0).count();
    Ok(OnlineReport {
        n_positive,
        binomial_p: binomial_test(n_positive as u64, n as u64, 0.5, Alternative::Greater)?,
        n_passenger_highest: runs.iter().filter(|r| r.passenger_highest).count(),
        mean_return: runs.iter().map(|r| r.final_return as f64).sum::<f64>() / n as f64,
        random_baseline: random_baseline(cfg.session.truth, cfg.baseline_episodes, cfg.baseline_seed)?,
        runs,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub dataset: DatasetConfig,
    /// Trained with the three-class term switched off.
    pub train: TrainConfig,
    pub subjects: usize,
    pub profile: ObserverProfile,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default().binary(),
            subjects: 8,
            profile: ObserverProfile::clean(),
            seed: 0,
        }
    }
}

pub fn robotic_transfer(cfg: &TransferConfig, set: &TrajectorySet) -> Result<(TransferReport, TrainReport)> {
    let ds = build_dataset(&cfg.dataset)?;
    let splits = make_splits(&ds.episodes_per_subject(), ds.config.seed)?;
    let (model, train_report) = train_final(&ds, &splits, &cfg.train)?;
    Ok((evaluate_transfer(&model, set, &cfg.profile, cfg.subjects, cfg.seed)?, train_report))
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `subject,holdout_episode,rep_0..,mean_tau`.
pub fn holdout_csv(r: &HoldoutReport) -> Result<String> {
    csv_bytes(|w| {
        let reps = r.subjects.first().map_or(0, |s| s.taus.len());
        let mut header = vec!["subject".to_string(), "holdout_episode".into()];
        header.extend((0..reps).map(|i| format!("rep_{i}")));
        header.push("mean_tau".into());
        w.write_record(&header)?;
        for s in &r.subjects {
            let mut row = vec![s.subject.to_string(), s.holdout_episode.to_string()];
            row.extend(s.taus.iter().map(|t| t.map_or(String::new(), |t| t.to_string())));
            row.push(s.mean_tau.to_string());
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// One row per seed and tick.
pub fn metrics_csv(metrics: &[(u64, Vec<MetricsRow>)]) -> Result<String> {
    csv_bytes(|w| {
        let n = metrics.first().and_then(|m| m.1.first()).map_or(6, |r| r.posterior.len());
        let mut header = vec!["seed".to_string(), "tick".into(), "frame".into()];
        header.extend((0..n).map(|i| format!("p_{i}")));
        header.extend(["entropy", "cumulative_return", "map", "tau", "updates"].map(String::from));
        w.write_record(&header)?;
        for (seed, rows) in metrics {
            for r in rows {
                let mut row = vec![seed.to_string(), r.tick.to_string(), r.frame.to_string()];
                row.extend(r.posterior.iter().map(|p| p.to_string()));
                let v = r.map.values();
                row.extend([
                    r.entropy.to_string(),
                    r.cumulative_return.to_string(),
                    format!("{} {} {}", v[0], v[1], v[2]),
                    r.tau.to_string(),
                    r.updates.to_string(),
                ]);
                w.write_record(&row)?;
            }
        }
        Ok(())
    })
}

/// `rank,name,return,mean_positivity`.
pub fn transfer_csv(r: &TransferReport) -> Result<String> {
    csv_bytes(|w| {
        w.write_record(["rank", "name", "return", "mean_positivity"])?;
        for row in &r.rows {
            w.write_record([row.rank.to_string(), row.name.clone(), row.ret.to_string(), row.mean_positivity.to_string()])?;
        }
        Ok(())
    })
}
