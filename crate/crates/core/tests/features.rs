use std::collections::BTreeSet;

use empathic::dataset::behavior_episode;
use empathic::features::*;
use empathic::frame::{read_feature_csv, write_feature_csv, FrameFeatures, SUCCESS};
use empathic::gridworld::RewardClass;
use empathic::observer::{generate_session, ObserverProfile, Timing};
use proptest::prelude::*;

fn session(seed: u64) -> empathic::observer::SessionRecording {
    let log = behavior_episode(seed, 0.1).unwrap();
    generate_session(&ObserverProfile::clean(), &log, Timing::default(), seed)
}

#[test]
fn full_episode_aggregates_to_1000_frames() {
    let rec = session(1);
    assert_eq!(rec.frames.len(), 9000);
    assert_eq!(aggregate(&rec.frames, 9).len(), 1000);
}

#[test]
fn samples_per_pickup_and_shapes() {
    let rec = session(2);
    let cfg = WindowConfig::default();
    let samples = make_samples(&rec, &cfg, 0, 0);
    let n_agg = 1000usize;
    let per_tick = 45 / 9;
    let expected: usize = rec
        .log
        .pickups()
        .map(|(tick, _)| (0..per_tick).filter(|i| tick as usize * per_tick + i + cfg.l < n_agg).count())
        .sum();
    assert_eq!(samples.len(), expected);
    for s in &samples {
        assert_eq!((s.fau.len(), s.head.len(), s.aux.len()), (455, 702, 130));
        let y = s.one_hot();
        assert_eq!(y.iter().sum::<f64>(), 1.0);
        assert_eq!(s.is_positive(), s.label == RewardClass::Plus6);
        let rec_tick = &rec.log.records[s.key.tick as usize];
        assert_eq!(RewardClass::from_value(rec_tick.reward), Some(s.label));
    }
}

#[test]
fn newest_input_frame_is_l_times_a_after_label() {
    let rec = session(3);
    let cfg = WindowConfig::default();
    let agg = aggregate(&rec.frames, cfg.pool);
    for s in make_samples(&rec, &cfg, 0, 0) {
        let label_first = agg[s.key.frame].first as usize;
        let newest_first = agg[s.key.frame + cfg.l].first as usize;
        assert_eq!(newest_first - label_first, cfg.delay_frames());
        let tail = &s.fau[s.fau.len() - FAU_DIM..];
        assert_eq!(tail, &agg[s.key.frame + cfg.l].fau[..]);
    }
}

#[test]
fn pickup_at_tick_zero_is_kept_with_k_zero() {
    let mut rec = session(4);
    rec.log.records[0].event = Some(empathic::gridworld::ObjectType::Passenger);
    rec.log.records[0].reward = 6;
    let samples = make_samples(&rec, &WindowConfig::default(), 0, 0);
    assert_eq!(samples.iter().filter(|s| s.key.tick == 0).count(), 5);
    let with_past = WindowConfig { k: 2, ..Default::default() };
    let kept: Vec<usize> = make_samples(&rec, &with_past, 0, 0).iter().filter(|s| s.key.tick == 0).map(|s| s.key.frame).collect();
    assert_eq!(kept, vec![2, 3, 4]);
}

#[test]
fn exported_stream_round_trips() {
    let rec = session(5);
    let mut buf = Vec::new();
    write_feature_csv(&rec.frames[..500], &mut buf).unwrap();
    let back = read_feature_csv(&buf[..]).unwrap();
    assert_eq!(back.frames, rec.frames[..500]);
}

#[test]
fn failed_frames_are_carried_and_flagged() {
    let rec = session(6);
    let mut frames = rec.frames[..100].to_vec();
    for f in frames.iter_mut().skip(10).step_by(7) {
        f.0[SUCCESS] = 0.0;
    }
    let mut buf = Vec::new();
    write_feature_csv(&frames, &mut buf).unwrap();
    let back = read_feature_csv(&buf[..]).unwrap();
    assert_eq!(back.frames.len(), 100);
    assert_eq!(back.valid.iter().filter(|v| !**v).count(), frames.iter().filter(|f| !f.success()).count());
}

#[test]
fn parseval_holds_for_full_spectrum() {
    let mut sp = Spectrum::default();
    let window: Vec<f64> = (0..FFT_WINDOW).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
    let bins = sp.full(&window);
    let spec_energy: f64 = bins.iter().map(|c| c.norm_sqr()).sum::<f64>() / FFT_WINDOW as f64;
    let time_energy: f64 = window.iter().map(|x| x * x).sum();
    assert!((spec_energy - time_energy).abs() < 1e-9);
}

#[test]
fn splits_for_17_subjects() {
    let episodes = vec![3; 17];
    let s = make_splits(&episodes, 9).unwrap();
    assert_eq!(s.folds.len(), 17);
    assert_eq!(s.holdout.len(), 17);
    for fold in &s.folds {
        for role in [Role::Train, Role::Test, Role::Validation, Role::Holdout] {
            assert!(fold.segments(role).next().is_some());
        }
        assert_eq!(fold.segments(Role::Holdout).count(), 34);
        assert_eq!(fold.segments(Role::Validation).count(), 2);
        assert_eq!(fold.segments(Role::Test).count(), 17);
        assert!(fold.segments(Role::Validation).all(|seg| seg.subject == fold.target));
        let subjects: BTreeSet<usize> = fold.segments(Role::Test).map(|seg| seg.subject).collect();
        assert_eq!(subjects.len(), 17);
    }
    assert_eq!(s, make_splits(&episodes, 9).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fold_roles_partition_every_segment(n in 2usize..10, seed in any::<u64>()) {
        let episodes = vec![3; n];
        let s = make_splits(&episodes, seed).unwrap();
        for fold in s.folds.iter().chain(std::iter::once(&s.final_fold)) {
            prop_assert_eq!(fold.roles.len(), n * 3 * 2);
            for (seg, role) in &fold.roles {
                let held = s.holdout[seg.subject] == seg.episode;
                prop_assert_eq!(held, *role == Role::Holdout);
            }
        }
    }

    #[test]
    fn pooling_with_one_is_identity(vals in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let rows: Vec<[f64; 1]> = vals.iter().map(|v| [*v]).collect();
        prop_assert_eq!(max_pool(&rows, 1), rows.clone());
        prop_assert_eq!(max_pool(&max_pool(&rows, 1), 1), rows);
    }

    #[test]
    fn pooled_value_is_block_max(vals in prop::collection::vec(-5.0f64..5.0, 1..60), a in 1usize..10) {
        let rows: Vec<[f64; 1]> = vals.iter().map(|v| [*v]).collect();
        let pooled = max_pool(&rows, a);
        prop_assert_eq!(pooled.len(), vals.len().div_ceil(a));
        for (i, p) in pooled.iter().enumerate() {
            let m = vals[i * a..((i + 1) * a).min(vals.len())].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(p[0], m);
        }
    }

    #[test]
    fn detrend_matches_closed_form(vals in prop::collection::vec(-100.0f64..100.0, 1..60)) {
        let frames: Vec<FrameFeatures> = vals.iter().map(|v| {
            let mut f = FrameFeatures::default();
            f.pose_mut()[0] = *v;
            f
        }).collect();
        let d = pose_detrend(&frames);
        for i in 0..vals.len() {
            let mean = vals[..=i].iter().sum::<f64>() / (i + 1) as f64;
            prop_assert!((d[i][0] - (vals[i] - mean)).abs() < 1e-9);
        }
    }
}
