//! Posterior over reward rankings from per-event class predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{make_samples, WindowConfig, WindowSample};
use crate::gridworld::{ObjectType, RewardSpec};
use crate::model::net::{logsumexp, Prediction};
use crate::model::Model;
use crate::observer::SessionRecording;
use crate::stats::{kendall_tau, TauVariant};

/// Smallest class probability a single event can contribute.
pub const LIKELIHOOD_FLOOR: f64 = 1e-6;
/// Log-posterior gap under which two rankings count as tied for the MAP.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// All six rankings, ordered lexicographically by their
/// `[Passenger, Roadblock, ParkedCar]` values. This order breaks MAP ties.
pub fn all_rankings() -> [RewardSpec; 6] {
    [[-5, -1, 6], [-5, 6, -1], [-1, -5, 6], [-1, 6, -5], [6, -5, -1], [6, -1, -5]]
        .map(|v| RewardSpec::new(v).expect("permutation"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisSpace {
    #[default]
    Permutations,
    /// The three mappings the data-collection agent follows.
    BehaviorMappings,
}

impl HypothesisSpace {
    pub fn rankings(self) -> Vec<RewardSpec> {
        match self {
            Self::Permutations => all_rankings().to_vec(),
            Self::BehaviorMappings => {
                let order = all_rankings();
                let mut m = RewardSpec::behavior_mappings().to_vec();
                m.sort_by_key(|s| order.iter().position(|o| o == s));
                m
            }
        }
    }
}

/// How several aggregated-frame predictions of one event are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Normalized geometric mean; the event is counted once.
    #[default]
    GeometricMean,
    /// Each aggregated frame is an independent observation.
    PerFrame,
}

/// What the posterior treats as `P(q | x, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// The predicted class probability itself.
    #[default]
    Predicted,
    /// Predicted probability divided by the training class frequency.
    PriorCorrected,
}

/// Unnormalized log-posterior over a fixed list of rankings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    hypotheses: Vec<RewardSpec>,
    log_post: Vec<f64>,
}

impl Belief {
    pub fn uniform(space: HypothesisSpace) -> Self {
        Self::over(space.rankings())
    }

    pub fn over(hypotheses: Vec<RewardSpec>) -> Self {
        let log_post = vec![0.0; hypotheses.len()];
        Self { hypotheses, log_post }
    }

    pub fn hypotheses(&self) -> &[RewardSpec] {
        &self.hypotheses
    }

    pub fn log_posterior(&self) -> &[f64] {
        &self.log_post
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let z = logsumexp(&self.log_post);
        self.log_post.iter().map(|l| (l - z).exp()).collect()
    }

    pub fn probability_of(&self, spec: &RewardSpec) -> Option<f64> {
        let i = self.hypotheses.iter().position(|h| h == spec)?;
        Some(self.probabilities()[i])
    }

    /// Natural-log entropy of the normalized posterior.
    pub fn entropy(&self) -> f64 {
        self.probabilities().iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }

    /// Multiplies in `P(class = m(object))` for every ranking `m`, with the
    /// probability floored at [`LIKELIHOOD_FLOOR`].
    pub fn update(&mut self, object: ObjectType, class_probs: &[f64; 3]) {
        for (h, lp) in self.hypotheses.iter().zip(&mut self.log_post) {
            *lp += class_probs[h.class(object).index()].max(LIKELIHOOD_FLOOR).ln();
        }
        // keep the largest entry at zero so long episodes cannot underflow
        let max = self.log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for lp in &mut self.log_post {
            *lp -= max;
        }
    }

    pub fn map_index(&self) -> usize {
        let mut best = 0;
        for i in 1..self.log_post.len() {
            if self.log_post[i] > self.log_post[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self) -> RewardSpec {
        self.hypotheses[self.map_index()]
    }

    /// Indices within [`TIE_TOLERANCE`] of the MAP, in canonical order.
    pub fn map_ties(&self) -> Vec<usize> {
        let best = self.log_post[self.map_index()];
        (0..self.log_post.len()).filter(|i| best - self.log_post[*i] <= TIE_TOLERANCE).collect()
    }
}

/// Plain Kendall tau between two rankings' object values.
pub fn ranking_tau(a: &RewardSpec, b: &RewardSpec) -> f64 {
    kendall_tau(&a.values_f64(), &b.values_f64(), TauVariant::Plain).expect("three untied values").tau
}

/// Anything that turns window samples into predictions.
pub trait Predictor {
    fn window(&self) -> WindowConfig;
    fn predict_batch(&self, samples: &[&WindowSample]) -> Result<Vec<Prediction>>;
    /// Class frequencies the predictor was fit on.
    fn class_prior(&self) -> Option<[f64; 3]> {
        None
    }
}

impl Predictor for Model {
    fn window(&self) -> WindowConfig {
        Model::window(self)
    }

    fn predict_batch(&self, samples: &[&WindowSample]) -> Result<Vec<Prediction>> {
        self.predict_many(samples)
    }

    fn class_prior(&self) -> Option<[f64; 3]> {
        Some(self.class_freq)
    }
}

/// Equal logits for every sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPredictor {
    pub window: WindowConfig,
}

impl Predictor for UniformPredictor {
    fn window(&self) -> WindowConfig {
        self.window
    }

    fn predict_batch(&self, samples: &[&WindowSample]) -> Result<Vec<Prediction>> {
        Ok(samples.iter().map(|_| Prediction::from_logits([0.0; 3], Vec::new())).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankConfig {
    pub space: HypothesisSpace,
    pub pooling: Pooling,
    pub likelihood: Likelihood,
}

/// Applies `likelihood` to a class-probability vector.
pub fn adjust(probs: &[f64; 3], likelihood: Likelihood, prior: Option<[f64; 3]>) -> [f64; 3] {
    match (likelihood, prior) {
        (Likelihood::PriorCorrected, Some(f)) => {
            let r = [0, 1, 2].map(|c| probs[c] / f[c].max(LIKELIHOOD_FLOOR));
            let s: f64 = r.iter().sum();
            r.map(|v| v / s)
        }
        _ => *probs,
    }
}

/// Normalized geometric mean of probability vectors.
pub fn geometric_pool(probs: &[[f64; 3]]) -> Result<[f64; 3]> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("nothing to pool".into()));
    }
    let n = probs.len() as f64;
    let logs = [0, 1, 2].map(|c| probs.iter().map(|p| p[c].max(LIKELIHOOD_FLOOR).ln()).sum::<f64>() / n);
    let z = logsumexp(&logs);
    Ok(logs.map(|l| (l - z).exp()))
}

/// One pickup's evidence: the object and the class-probability vectors of
/// its aggregated frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EventEvidence {
    pub tick: u32,
    pub object: ObjectType,
    pub probs: Vec<[f64; 3]>,
}

/// Folds one event into `belief` according to `cfg`.
pub fn apply_event(belief: &mut Belief, ev: &EventEvidence, cfg: &RankConfig, prior: Option<[f64; 3]>) -> Result<()> {
    let adjusted: Vec<[f64; 3]> = ev.probs.iter().map(|p| adjust(p, cfg.likelihood, prior)).collect();
    match cfg.pooling {
        Pooling::GeometricMean => belief.update(ev.object, &geometric_pool(&adjusted)?),
        Pooling::PerFrame => {
            for p in &adjusted {
                belief.update(ev.object, p);
            }
        }
    }
    Ok(())
}

/// Groups predictions of a session's pickup windows by tick.
pub fn session_evidence(predictor: &dyn Predictor, session: &SessionRecording) -> Result<Vec<EventEvidence>> {
    let samples = make_samples(session, &predictor.window(), 0, 0);
    let refs: Vec<&WindowSample> = samples.iter().collect();
    let preds = predictor.predict_batch(&refs)?;
    let mut by_tick: BTreeMap<u32, Vec<[f64; 3]>> = BTreeMap::new();
    for (s, p) in samples.iter().zip(preds) {
        by_tick.entry(s.key.tick).or_default().push(p.probs);
    }
    by_tick
        .into_iter()
        .map(|(tick, probs)| {
            let object = session.log.records[tick as usize]
                .event
                .ok_or_else(|| Error::Integrity(format!("sample at tick {tick} without a pickup")))?;
            Ok(EventEvidence { tick, object, probs })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub belief: Belief,
    pub map: RewardSpec,
    /// Tau of the MAP against the truth, averaged over exactly tied MAPs.
    pub tau: f64,
    pub n_events: usize,
}

/// Ranks one episode from a uniform prior. `None` when no pickup produced a
/// usable window.
pub fn rank_events(events: &[EventEvidence], truth: &RewardSpec, cfg: &RankConfig, prior: Option<[f64; 3]>) -> Result<Option<RankOutcome>> {
    if events.is_empty() {
        return Ok(None);
    }
    let mut belief = Belief::uniform(cfg.space);
    for ev in events {
        apply_event(&mut belief, ev, cfg, prior)?;
    }
    let ties = belief.map_ties();
    let tau = ties.iter().map(|i| ranking_tau(&belief.hypotheses()[*i], truth)).sum::<f64>() / ties.len() as f64;
    Ok(Some(RankOutcome { map: belief.map(), belief, tau, n_events: events.len() }))
}

pub fn rank_episode(predictor: &dyn Predictor, session: &SessionRecording, truth: &RewardSpec, cfg: &RankConfig) -> Result<Option<RankOutcome>> {
    let events = session_evidence(predictor, session)?;
    rank_events(&events, truth, cfg, predictor.class_prior())
}

/// Serialized ranking result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub rankings: Vec<RewardSpec>,
    pub posterior: Vec<f64>,
    pub map_ranking: RewardSpec,
    pub tau: f64,
    pub p_value: f64,
}

impl RankingReport {
    pub fn new(outcome: &RankOutcome, truth: &RewardSpec) -> Result<Self> {
        let stat = kendall_tau(&outcome.map.values_f64(), &truth.values_f64(), TauVariant::Plain)?;
        Ok(Self {
            rankings: outcome.belief.hypotheses().to_vec(),
            posterior: outcome.belief.probabilities(),
            map_ranking: outcome.map,
            tau: outcome.tau,
            p_value: stat.p_value,
        })
    }
}

/// Mean positivity of a trajectory's predictions.
pub fn trajectory_positivity(preds: &[Prediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(preds.iter().map(|p| p.positivity).sum::<f64>() / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSubjectRanking {
    /// Mean over subjects, per trajectory.
    pub mean_scores: Vec<f64>,
    /// Trajectory indices by descending mean score.
    pub order: Vec<usize>,
    /// `None` when either side is fully tied.
    pub tau_b: Option<f64>,
    pub p_value: Option<f64>,
}

/// `scores[subject][trajectory]`, compared against `returns[trajectory]`.
pub fn cross_subject_rank(scores: &[Vec<f64>], returns: &[f64]) -> Result<CrossSubjectRanking> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::InvalidArgument("at least two trajectories required".into()));
    }
    if scores.is_empty() || scores.iter().any(|s| s.len() != n) {
        return Err(Error::Shape(format!("expected at least one row of {n} scores")));
    }
    let mean_scores: Vec<f64> = (0..n).map(|t| scores.iter().map(|s| s[t]).sum::<f64>() / scores.len() as f64).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| mean_scores[*b].total_cmp(&mean_scores[*a]).then(a.cmp(b)));
    let (tau_b, p_value) = match kendall_tau(&mean_scores, returns, TauVariant::TieCorrected) {
        Ok(s) => (Some(s.tau), Some(s.p_value)),
        Err(Error::Undefined(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(CrossSubjectRanking { mean_scores, order, tau_b, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: ObjectType = ObjectType::Passenger;

    #[test]
    fn canonical_order_ends_with_truth() {
        let r = all_rankings();
        assert_eq!(r[5], RewardSpec::ground_truth());
        assert_eq!(ranking_tau(&r[0], &r[5]), -1.0);
        let mut sorted = r.map(|s| s.values());
        sorted.sort();
        assert_eq!(sorted, r.map(|s| s.values()));
    }

    #[test]
    fn uninformative_prediction_leaves_belief_uniform() {
        let mut b = Belief::uniform(HypothesisSpace::Permutations);
        b.update(P, &[1.0 / 3.0; 3]);
        for p in b.probabilities() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(b.map(), all_rankings()[0]);
    }

    #[test]
    fn eight_to_one_odds() {
        let mut b = Belief::uniform(HypothesisSpace::Permutations);
        b.update(P, &[0.8, 0.1, 0.1]);
        let p = b.probabilities();
        let r = all_rankings();
        let i = r.iter().position(|s| s.reward(P) == -5).unwrap();
        let j = r.iter().position(|s| s.reward(P) == -1).unwrap();
        assert!((p[i] / p[j] - 8.0).abs() < 1e-12);
        assert_eq!(b.map().reward(P), -5);
    }

    #[test]
    fn floor_keeps_posterior_positive() {
        let mut b = Belief::uniform(HypothesisSpace::Permutations);
        b.update(P, &[0.0, 0.0, 1.0]);
        assert!(b.probabilities().iter().all(|p| *p > 0.0));
    }

    #[test]
    fn entropy_of_even_split() {
        let mut b = Belief::over(all_rankings()[..2].to_vec());
        b.update(P, &[0.5, 0.5, 0.0]);
        assert!((b.entropy() - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn behavior_space_has_three_mappings() {
        let r = HypothesisSpace::BehaviorMappings.rankings();
        assert_eq!(r.len(), 3);
        assert!(r.contains(&RewardSpec::ground_truth()));
    }

    #[test]
    fn uniform_stub_expected_tau_is_zero() {
        let ev = EventEvidence { tick: 3, object: P, probs: vec![[1.0 / 3.0; 3]; 5] };
        let out = rank_events(&[ev], &RewardSpec::ground_truth(), &RankConfig::default(), None).unwrap().unwrap();
        assert_eq!(out.tau, 0.0);
        assert!(rank_events(&[], &RewardSpec::ground_truth(), &RankConfig::default(), None).unwrap().is_none());
    }

    #[test]
    fn geometric_pool_of_identical_vectors() {
        let p = geometric_pool(&[[0.2, 0.3, 0.5]; 4]).unwrap();
        for (a, b) in p.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_correction_cancels_prior_shaped_predictions() {
        let f = [0.5, 0.3, 0.2];
        let a = adjust(&f, Likelihood::PriorCorrected, Some(f));
        for v in a {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trajectory_scores() {
        let mut p = Prediction::from_logits([0.0, 0.0, 0.0], vec![]);
        p.positivity = 0.7;
        assert!((trajectory_positivity(&[p.clone(), p]).unwrap() - 0.7).abs() < 1e-15);
        assert!(trajectory_positivity(&[]).is_err());
    }

    #[test]
    fn cross_subject_with_ties() {
        let returns = [2.0, 2.0, 2.0, 0.0, 0.0, -1.0, -1.0, -1.0];
        let faithful = vec![vec![0.9, 0.9, 0.9, 0.5, 0.5, 0.1, 0.1, 0.1]];
        assert!((cross_subject_rank(&faithful, &returns).unwrap().tau_b.unwrap() - 1.0).abs() < 1e-12);
        // untied scores in the right order: 21 concordant pairs of 28
        let ordered = vec![vec![0.9, 0.8, 0.85, 0.5, 0.55, 0.2, 0.1, 0.15]];
        let t = cross_subject_rank(&ordered, &returns).unwrap().tau_b.unwrap();
        assert!((t - 21.0 / (28.0f64 * 21.0).sqrt()).abs() < 1e-12);
        let flat = vec![vec![0.5; 8]];
        assert_eq!(cross_subject_rank(&flat, &returns).unwrap().tau_b, None);
        assert!(cross_subject_rank(&faithful, &returns[..3]).is_err());
    }
}
