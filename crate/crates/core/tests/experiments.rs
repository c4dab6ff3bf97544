mod common;

use empathic::dataset::{build_dataset, DatasetConfig};
use empathic::inference::{cross_subject_rank, rank_episode, RankConfig};
use empathic::gridworld::RewardSpec;
use empathic::robotic::TrajectorySet;
use empathic::session::experiments::*;
use empathic::stats::{binomial_test, Alternative};

fn point(confusion: f64, mean_tau: f64, se_tau: f64) -> SweepPoint {
    let report = HoldoutReport { subjects: vec![], sorted_taus: vec![], mean_tau, se_tau, wilcoxon: None, reps: vec![] };
    SweepPoint { confusion, mean_tau, se_tau, report }
}

#[test]
fn monotonicity_allows_one_se_of_difference() {
    // sqrt(0.03^2 + 0.04^2) = 0.05
    assert!(non_increasing_within_se(&[point(0.0, 0.9, 0.03), point(0.1, 0.949, 0.04)]));
    assert!(!non_increasing_within_se(&[point(0.0, 0.9, 0.03), point(0.1, 0.951, 0.04)]));
    assert!(non_increasing_within_se(&[point(0.0, 1.0, 0.0), point(0.1, 0.5, 0.0), point(0.2, 0.0, 0.0)]));
}

#[test]
fn random_baseline_is_reproducible() {
    let a = random_baseline(RewardSpec::ground_truth(), 20, 7).unwrap();
    let b = random_baseline(RewardSpec::ground_truth(), 20, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.se_return > 0.0);
    assert!(random_baseline(RewardSpec::ground_truth(), 0, 7).is_err());
}

#[test]
fn online_batch_with_label_oracle() {
    let cfg = OnlineBatchConfig { seeds: vec![0, 1, 2], baseline_episodes: 10, ..Default::default() };
    let r = online_batch(&cfg, common::oracle()).unwrap();
    assert_eq!(r.runs.len(), 3);
    assert_eq!(r.n_passenger_highest, 3);
    assert_eq!(r.binomial_p, binomial_test(r.n_positive as u64, 3, 0.5, Alternative::Greater).unwrap());
    assert!(r.mean_return > r.random_baseline.mean_return);
    let csv = metrics_csv(&r.metrics).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 201);
    assert!(csv.starts_with("seed,tick,frame,p_0,p_1,p_2,p_3,p_4,p_5,entropy,"));
}

#[test]
fn oracle_ranks_every_episode_correctly() {
    let ds = build_dataset(&DatasetConfig { subjects: 2, episodes: 3, ..Default::default() }).unwrap();
    let truth = RewardSpec::ground_truth();
    for row in &ds.sessions {
        for rec in row {
            let out = rank_episode(common::oracle().as_ref(), rec, &truth, &RankConfig::default()).unwrap().unwrap();
            assert_eq!(out.map, truth);
            assert_eq!(out.tau, 1.0);
        }
    }
}

#[test]
fn builtin_trajectories_allow_the_target() {
    let set = TrajectorySet::builtin();
    set.validate().unwrap();
    assert_eq!(set.trajectories.len(), 8);
    // scores that follow the returns exactly reach the ceiling the ties allow
    let returns = set.returns();
    let r = cross_subject_rank(&[returns.clone(), returns.clone()], &returns).unwrap();
    assert_eq!(r.tau_b, Some(1.0));
    assert!(r.p_value.unwrap() < 0.05);
}
