//! Scripted non-gridworld trajectories for the transfer evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{aggregate, pool_annotations, window_at, WindowConfig};
use crate::frame::FrameFeatures;
use crate::gridworld::RewardClass;
use crate::inference::{cross_subject_rank, trajectory_positivity, CrossSubjectRanking};
use crate::model::Model;
use crate::observer::{react_to_event, synthesize_frames, Annotation, GestureEvent, ObserverProfile, RewardEvent};

const DEFAULT_SET: &str = include_str!("../data/trajectories.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub time_s: f64,
    pub class: RewardClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub name: String,
    #[serde(rename = "return")]
    pub ret: f64,
    pub duration_s: f64,
    pub events: Vec<ScriptedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub fps: f64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_SET).expect("bundled trajectory set parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps {} must be positive", self.fps)));
        }
        if self.trajectories.len() < 2 {
            return Err(Error::InvalidArgument("at least two trajectories required".into()));
        }
        for t in &self.trajectories {
            if !(t.duration_s > 0.0) {
                return Err(Error::InvalidArgument(format!("trajectory {} has no duration", t.name)));
            }
            if let Some(e) = t.events.iter().find(|e| !(0.0..t.duration_s).contains(&e.time_s)) {
                return Err(Error::InvalidArgument(format!("event at {} s outside trajectory {}", e.time_s, t.name)));
            }
        }
        Ok(())
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.ret).collect()
    }
}

/// One observer's reaction to one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecording {
    /// Trajectory frames followed by a neutral tail so late windows fit.
    pub frames: Vec<FrameFeatures>,
    pub annotations: Vec<Annotation>,
    pub gestures: Vec<GestureEvent>,
    pub duration_frames: usize,
}

pub fn observe_trajectory(traj: &Trajectory, profile: &ObserverProfile, window: &WindowConfig, fps: f64, seed: u64) -> TrajectoryRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gestures: Vec<GestureEvent> = traj
        .events
        .iter()
        .flat_map(|e| react_to_event(profile, RewardEvent { time_s: e.time_s, class: e.class, tick: None }, fps, &mut rng))
        .collect();
    let duration_frames = (traj.duration_s * fps).round() as usize;
    let total = duration_frames + window.delay_frames() + window.pool;
    let (frames, annotations) = synthesize_frames(&gestures, total as u32, profile, fps, seed ^ 0x5eed_f4ce);
    TrajectoryRecording { frames, annotations, gestures, duration_frames }
}

/// Mean positivity over every aggregated frame that starts inside the
/// trajectory.
pub fn score_trajectory(model: &Model, rec: &TrajectoryRecording) -> Result<f64> {
    let cfg = model.window();
    let agg = aggregate(&rec.frames, cfg.pool);
    let ann = pool_annotations(&rec.annotations, cfg.pool);
    let mut preds = Vec::new();
    for t in 0..agg.len() {
        if agg[t].first as usize >= rec.duration_frames {
            break;
        }
        if let Some((fau, head, _)) = window_at(&agg, &ann, t, &cfg) {
            preds.push(model.predict_raw(&fau, &head)?);
        }
    }
    trajectory_positivity(&preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub name: String,
    #[serde(rename = "return")]
    pub ret: f64,
    pub mean_positivity: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Sorted by descending mean positivity.
    pub rows: Vec<TransferRow>,
    /// `scores[subject][trajectory]`.
    pub scores: Vec<Vec<f64>>,
    pub ranking: CrossSubjectRanking,
}

/// Scores every trajectory for `subjects` observers with seeds derived
/// from `seed`, then ranks by the cross-subject mean.
pub fn evaluate_transfer(model: &Model, set: &TrajectorySet, profile: &ObserverProfile, subjects: usize, seed: u64) -> Result<TransferReport> {
    set.validate()?;
    if subjects == 0 {
        return Err(Error::InvalidArgument("at least one subject required".into()));
    }
    let window = model.window();
    let mut scores = Vec::with_capacity(subjects);
    for s in 0..subjects {
        let mut row = Vec::with_capacity(set.trajectories.len());
        for (i, traj) in set.trajectories.iter().enumerate() {
            let rec = observe_trajectory(traj, profile, &window, set.fps, crate::dataset::derive_seed(seed, &[s as u64, i as u64]));
            row.push(score_trajectory(model, &rec)?);
        }
        scores.push(row);
    }
    let ranking = cross_subject_rank(&scores, &set.returns())?;
    let rows = ranking
        .order
        .iter()
        .enumerate()
        .map(|(rank, &i)| TransferRow {
            name: set.trajectories[i].name.clone(),
            ret: set.trajectories[i].ret,
            mean_positivity: ranking.mean_scores[i],
            rank: rank + 1,
        })
        .collect();
    Ok(TransferReport { rows, scores, ranking })
}
