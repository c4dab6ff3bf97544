//! The online loop: act under the MAP ranking, watch the observer, update
//! the belief once a pickup's windows are complete.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::derive_seed;
use crate::error::{Error, Result};
use crate::features::{pool_annotations, window_at, AggregatedFrame, Aggregator, SampleKey, WindowConfig, WindowSample};
use crate::frame::FrameFeatures;
use crate::gridworld::{Action, EnvState, EpisodeLog, ObjectType, RewardClass, RewardSpec, EPISODE_LEN};
use crate::inference::{apply_event, ranking_tau, Belief, EventEvidence, Predictor, RankConfig};
use crate::observer::{Annotation, GestureEvent, GestureKind, Observer, ObserverProfile, RewardEvent, Timing};
use crate::planning::{GreedyPolicy, Policy, RandomPolicy};

const ENV: u64 = 1;
const OBSERVER: u64 = 3;
const WARMUP: u64 = 4;

/// Where reactions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionSource {
    /// The observer profile reacts to every pickup.
    #[default]
    Synthetic,
    /// Only gestures and frames pushed from outside.
    Live,
}

/// When the acting policy adopts the current MAP ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanTrigger {
    #[default]
    BeliefUpdate,
    Pickup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub seed: u64,
    pub timing: Timing,
    pub episode_len: u32,
    /// Synthesizes frames, and reactions when `reactions` is synthetic.
    pub profile: ObserverProfile,
    pub reactions: ReactionSource,
    pub rank: RankConfig,
    pub replan: ReplanTrigger,
    /// Ticks acted by a uniformly random policy before the MAP policy.
    pub warmup_ticks: u32,
    /// Truth the environment pays out.
    pub truth: RewardSpec,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            timing: Timing::default(),
            episode_len: EPISODE_LEN,
            profile: ObserverProfile::clean(),
            reactions: ReactionSource::Synthetic,
            rank: RankConfig::default(),
            replan: ReplanTrigger::BeliefUpdate,
            warmup_ticks: 0,
            truth: RewardSpec::ground_truth(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timing.step_period_s > 0.0) || !(self.timing.fps > 0.0) {
            return Err(Error::InvalidArgument("step period and fps must be positive".into()));
        }
        if self.timing.frames_per_tick() == 0 {
            return Err(Error::InvalidArgument("a tick must span at least one frame".into()));
        }
        if self.episode_len == 0 {
            return Err(Error::InvalidArgument("episode length must be positive".into()));
        }
        self.profile.validate()
    }
}

/// One row per tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tick: u32,
    /// Frames synthesized so far.
    pub frame: u32,
    pub posterior: Vec<f64>,
    pub entropy: f64,
    pub cumulative_return: i64,
    pub map: RewardSpec,
    /// MAP against the truth.
    pub tau: f64,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub pickup_tick: u32,
    pub object: ObjectType,
    /// Last frame of the pickup's labeled aggregated frames.
    pub pickup_frame: u32,
    /// Newest frame when the update ran.
    pub applied_at_frame: u32,
    pub probs: Vec<[f64; 3]>,
    pub map_before: RewardSpec,
    pub map_after: RewardSpec,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    tick: u32,
    object: ObjectType,
    class: RewardClass,
    first_agg: usize,
    last_agg: usize,
}

/// What one call to [`OnlineSession::step`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub tick: u32,
    pub action: Action,
    pub reward: i32,
    pub event: Option<ObjectType>,
    pub updates: Vec<UpdateRecord>,
}

pub struct OnlineSession {
    cfg: SessionConfig,
    predictor: Arc<dyn Predictor + Send + Sync>,
    window: WindowConfig,
    env: EnvState,
    log: EpisodeLog,
    observer: Observer,
    external: VecDeque<FrameFeatures>,
    aggregator: Aggregator,
    agg: Vec<AggregatedFrame>,
    raw_ann: Vec<Annotation>,
    ann: Vec<Annotation>,
    frames_seen: u32,
    pending: VecDeque<Pending>,
    belief: Belief,
    acting_spec: RewardSpec,
    policy: GreedyPolicy,
    warmup: RandomPolicy,
    just_picked_up: bool,
    metrics: Vec<MetricsRow>,
    updates: Vec<UpdateRecord>,
    external_active: bool,
    starved_frames: u32,
    /// Raw frames that came from the external feed.
    external_used: Vec<bool>,
    live_gestures: Vec<GestureEvent>,
    skipped: Vec<u32>,
}

impl OnlineSession {
    pub fn new(cfg: SessionConfig, predictor: Arc<dyn Predictor + Send + Sync>) -> Result<Self> {
        cfg.validate()?;
        let window = predictor.window();
        let mut env = EnvState::new_episode(derive_seed(cfg.seed, &[ENV]), cfg.truth);
        env.episode_len = cfg.episode_len;
        let mut observer = Observer::new(cfg.profile.clone(), cfg.timing.fps, derive_seed(cfg.seed, &[OBSERVER]));
        if cfg.reactions == ReactionSource::Synthetic {
            observer.schedule_background(cfg.episode_len * cfg.timing.frames_per_tick());
        }
        let belief = Belief::uniform(cfg.rank.space);
        let acting_spec = belief.map();
        Ok(Self {
            predictor,
            window,
            env,
            log: EpisodeLog::default(),
            observer,
            external: VecDeque::new(),
            aggregator: Aggregator::new(window.pool),
            agg: Vec::new(),
            raw_ann: Vec::new(),
            ann: Vec::new(),
            frames_seen: 0,
            pending: VecDeque::new(),
            policy: GreedyPolicy::new(&acting_spec),
            acting_spec,
            belief,
            warmup: RandomPolicy::new(derive_seed(cfg.seed, &[WARMUP])),
            just_picked_up: false,
            metrics: Vec::new(),
            updates: Vec::new(),
            external_active: false,
            starved_frames: 0,
            external_used: Vec::new(),
            live_gestures: Vec::new(),
            skipped: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn env(&self) -> &EnvState {
        &self.env
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn belief(&self) -> &Belief {
        &self.belief
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn updates(&self) -> &[UpdateRecord] {
        &self.updates
    }

    pub fn gestures(&self) -> &[GestureEvent] {
        self.observer.gestures()
    }

    /// Spec the acting policy currently plans for.
    pub fn acting_spec(&self) -> RewardSpec {
        self.acting_spec
    }

    pub fn frame_index(&self) -> u32 {
        self.observer.frame_index()
    }

    pub fn is_finished(&self) -> bool {
        self.env.is_finished()
    }

    /// Ticks of live-mode pickups skipped for lack of any live input.
    pub fn skipped_updates(&self) -> &[u32] {
        &self.skipped
    }

    /// Pickups whose update has not run yet.
    pub fn pending_updates(&self) -> usize {
        self.pending.len()
    }

    /// Synthesized frames used because an active external feed ran dry.
    pub fn starved_frames(&self) -> u32 {
        self.starved_frames
    }

    /// Adds a live gesture of `kind` starting at the next synthesized frame.
    pub fn push_gesture(&mut self, kind: GestureKind) -> GestureEvent {
        let g = live_gesture(kind, self.observer.frame_index(), &self.cfg.profile, self.cfg.timing.fps);
        let g = self.observer.push(g);
        self.live_gestures.push(g);
        g
    }

    /// Queues an externally extracted frame; it replaces the next
    /// synthesized one.
    pub fn push_frame(&mut self, frame: FrameFeatures) {
        self.external_active = true;
        self.external.push_back(frame);
    }

    /// Action the session would take now.
    pub fn next_action(&mut self) -> Action {
        if self.env.tick < self.cfg.warmup_ticks {
            self.warmup.act(&self.env, self.just_picked_up)
        } else {
            self.policy.act(&self.env, self.just_picked_up)
        }
    }

    /// Advances one tick with the session's own action.
    pub fn step(&mut self) -> Result<TickOutput> {
        let action = self.next_action();
        self.step_with(action)
    }

    /// Advances one tick with `action`; replays use this to pin the
    /// environment stream.
    pub fn step_with(&mut self, action: Action) -> Result<TickOutput> {
        if self.env.is_finished() {
            return Err(Error::EpisodeFinished { tick: self.env.tick });
        }
        let before = self.env.clone();
        let outcome = self.env.step(action)?;
        self.log.push(&before, action, outcome);
        let tick = before.tick;
        self.just_picked_up = outcome.event.is_some();
        if let Some(object) = outcome.event {
            let class = RewardClass::from_value(outcome.reward).expect("pickup pays a class reward");
            if self.cfg.reactions == ReactionSource::Synthetic {
                let time_s = tick as f64 * self.cfg.timing.step_period_s;
                self.observer.react(RewardEvent { time_s, class, tick: Some(tick) });
            }
            let fpt = self.cfg.timing.frames_per_tick() as usize;
            let pool = self.window.pool;
            let first_agg = (tick as usize * fpt).div_ceil(pool);
            let last_agg = ((tick as usize + 1) * fpt - 1) / pool;
            if first_agg <= last_agg && first_agg >= self.window.k {
                self.pending.push_back(Pending { tick, object, class, first_agg, last_agg });
            }
            if self.cfg.replan == ReplanTrigger::Pickup {
                self.adopt_map();
            }
        }
        let mut updates = Vec::new();
        for _ in 0..self.cfg.timing.frames_per_tick() {
            self.advance_frame(&mut updates)?;
        }
        self.push_metrics(tick);
        Ok(TickOutput { tick, action, reward: outcome.reward, event: outcome.event, updates })
    }

    /// Synthesizes frames past the last tick until every pending pickup has
    /// been applied, then records a final metrics row.
    pub fn flush(&mut self) -> Result<Vec<UpdateRecord>> {
        let mut updates = Vec::new();
        let limit = self.frames_seen + ((self.window.l + 2) * self.window.pool) as u32 + self.cfg.timing.frames_per_tick();
        while !self.pending.is_empty() && self.frames_seen < limit {
            self.advance_frame(&mut updates)?;
        }
        self.push_metrics(self.env.tick);
        Ok(updates)
    }

    /// Runs to the end of the episode and flushes.
    pub fn run(&mut self) -> Result<()> {
        while !self.env.is_finished() {
            self.step()?;
        }
        self.flush()?;
        Ok(())
    }

    fn adopt_map(&mut self) {
        let map = self.belief.map();
        if map != self.acting_spec {
            self.acting_spec = map;
            self.policy = GreedyPolicy::new(&map);
        }
    }

    fn advance_frame(&mut self, updates: &mut Vec<UpdateRecord>) -> Result<()> {
        let (synth, ann) = self.observer.next_frame();
        self.external_used.push(!self.external.is_empty());
        let frame = match self.external.pop_front() {
            Some(f) => f,
            None => {
                if self.external_active {
                    self.starved_frames += 1;
                }
                synth
            }
        };
        self.frames_seen += 1;
        self.raw_ann.push(ann);
        if let Some(a) = self.aggregator.push(&frame) {
            let start = a.first as usize;
            self.ann.extend(pool_annotations(&self.raw_ann[start..], self.window.pool));
            self.agg.push(a);
            while let Some(p) = self.pending.front().copied() {
                if p.last_agg + self.window.l >= self.agg.len() {
                    break;
                }
                self.pending.pop_front();
                if self.cfg.reactions == ReactionSource::Live && !self.has_live_input(&p) {
                    self.skipped.push(p.tick);
                    continue;
                }
                let rec = self.apply_pending(p)?;
                updates.push(rec.clone());
                self.updates.push(rec);
            }
        }
        Ok(())
    }

    /// Whether any frame of the pickup's windows carries live input.
    fn has_live_input(&self, p: &Pending) -> bool {
        let start = ((p.first_agg - self.window.k) * self.window.pool) as u32;
        let end = ((p.last_agg + self.window.l + 1) * self.window.pool) as u32;
        self.external_used[start as usize..end as usize].iter().any(|b| *b)
            || self.live_gestures.iter().any(|g| g.onset_frame < end && g.offset_frame > start)
    }

    fn apply_pending(&mut self, p: Pending) -> Result<UpdateRecord> {
        let samples: Vec<WindowSample> = (p.first_agg..=p.last_agg)
            .filter_map(|t| {
                let (fau, head, aux) = window_at(&self.agg, &self.ann, t, &self.window)?;
                let key = SampleKey { subject: 0, episode: 0, tick: p.tick, frame: t };
                Some(WindowSample { key, fau, head, aux, label: p.class })
            })
            .collect();
        let refs: Vec<&WindowSample> = samples.iter().collect();
        let probs: Vec<[f64; 3]> = self.predictor.predict_batch(&refs)?.into_iter().map(|p| p.probs).collect();
        let map_before = self.belief.map();
        let ev = EventEvidence { tick: p.tick, object: p.object, probs };
        apply_event(&mut self.belief, &ev, &self.cfg.rank, self.predictor.class_prior())?;
        if self.cfg.replan == ReplanTrigger::BeliefUpdate {
            self.adopt_map();
        }
        Ok(UpdateRecord {
            pickup_tick: p.tick,
            object: p.object,
            pickup_frame: ((p.last_agg + 1) * self.window.pool - 1) as u32,
            applied_at_frame: self.frames_seen - 1,
            probs: ev.probs,
            map_before,
            map_after: self.belief.map(),
        })
    }

    fn push_metrics(&mut self, tick: u32) {
        let map = self.belief.map();
        self.metrics.push(MetricsRow {
            tick,
            frame: self.frames_seen,
            posterior: self.belief.probabilities(),
            entropy: self.belief.entropy(),
            cumulative_return: self.log.total_reward(),
            map,
            tau: ranking_tau(&map, &self.cfg.truth),
            updates: self.updates.len(),
        });
    }
}

/// A live gesture lasting the profile's mean duration, at the strongest
/// intensity any reward class uses for `kind`.
pub fn live_gesture(kind: GestureKind, onset_frame: u32, profile: &ObserverProfile, fps: f64) -> GestureEvent {
    let intensity = profile
        .classes
        .iter()
        .filter(|c| c.gestures[kind.index()] > 0.0)
        .map(|c| c.intensity)
        .fold(f64::NAN, f64::max);
    let intensity = if intensity.is_nan() { 1.0 } else { intensity };
    let len = ((profile.duration_mean_s * fps).round() as u32).max(1);
    GestureEvent { kind, onset_frame, offset_frame: onset_frame + len, intensity, source_tick: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineOutcome {
    pub seed: u64,
    pub final_return: i64,
    pub final_map: RewardSpec,
    pub final_posterior: Vec<f64>,
    pub passenger_highest: bool,
    pub updates: usize,
    pub metrics: Vec<MetricsRow>,
}

/// One headless episode.
pub fn run_online_episode(cfg: SessionConfig, predictor: Arc<dyn Predictor + Send + Sync>) -> Result<(EpisodeLog, OnlineOutcome)> {
    let seed = cfg.seed;
    let mut s = OnlineSession::new(cfg, predictor)?;
    s.run()?;
    let map = s.belief().map();
    let outcome = OnlineOutcome {
        seed,
        final_return: s.log().total_reward(),
        final_map: map,
        final_posterior: s.belief().probabilities(),
        passenger_highest: map.class(ObjectType::Passenger) == RewardClass::Plus6,
        updates: s.updates().len(),
        metrics: s.metrics().to_vec(),
    };
    Ok((s.log, outcome))
}
