//! Synthetic observer: reward events in, facial-feature frames and gesture
//! annotations out.
//!
//! Each reward class sits on a (valence, magnitude) cell: +6 is positive and
//! strong, -5 negative and strong, -1 negative and weak. Confusion flips the
//! valence and the magnitude independently with probability `confusion_rate`.
//! Gesture kinds follow the valence (and, for negative valence, the
//! magnitude); reaction probability, intensity and the chance of a second
//! gesture follow the magnitude. At a confusion rate of one half the emitted
//! cell no longer depends on the class.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{self, au_c_index, au_r_index, FrameFeatures, POSE_RX, POSE_RY};
use crate::gridworld::{EpisodeLog, RewardClass};

pub const LATENCY_MIN_S: f64 = -2.8;
pub const LATENCY_MAX_S: f64 = 3.6;
pub const N_GESTURES: usize = 7;
pub const N_CHANNELS: usize = 10;
pub const CHANNEL_POSITIVE: usize = 7;
pub const CHANNEL_NEGATIVE: usize = 8;
pub const CHANNEL_NEUTRAL: usize = 9;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "smile",
    "pout",
    "eyebrow_raise",
    "eyebrow_frown",
    "head_nod",
    "head_shake",
    "eye_roll",
    "positive",
    "negative",
    "neutral",
];

/// Per-frame annotation: seven gesture channels then three sentiment channels.
pub type Annotation = [u8; N_CHANNELS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GestureKind {
    Smile,
    Pout,
    EyebrowRaise,
    EyebrowFrown,
    HeadNod,
    HeadShake,
    EyeRoll,
}

impl GestureKind {
    pub const ALL: [GestureKind; N_GESTURES] = [
        GestureKind::Smile,
        GestureKind::Pout,
        GestureKind::EyebrowRaise,
        GestureKind::EyebrowFrown,
        GestureKind::HeadNod,
        GestureKind::HeadShake,
        GestureKind::EyeRoll,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sentiment channel an annotator marks alongside the gesture.
    pub fn sentiment_channel(self) -> usize {
        match self {
            GestureKind::Smile | GestureKind::HeadNod => CHANNEL_POSITIVE,
            GestureKind::EyebrowRaise => CHANNEL_NEUTRAL,
            _ => CHANNEL_NEGATIVE,
        }
    }

    fn action_units(self) -> &'static [u8] {
        match self {
            GestureKind::Smile => &[6, 12],
            GestureKind::Pout => &[15, 17],
            GestureKind::EyebrowRaise => &[1, 2, 5],
            GestureKind::EyebrowFrown => &[4, 7],
            GestureKind::EyeRoll => &[5, 45],
            GestureKind::HeadNod | GestureKind::HeadShake => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    /// Categorical distribution over [`GestureKind::ALL`].
    pub gestures: [f64; N_GESTURES],
    pub reaction_prob: f64,
    /// Peak action-unit intensity, 0..=5.
    pub intensity: f64,
    pub intensity_sd: f64,
    /// Probability of a second gesture of a different kind.
    pub extra_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverProfile {
    /// Indexed by [`RewardClass::index`]: -5, -1, +6.
    pub classes: [ClassProfile; 3],
    pub latency_mean_s: f64,
    pub latency_sd_s: f64,
    pub duration_mean_s: f64,
    pub duration_sd_s: f64,
    pub background_per_min: f64,
    pub confusion_rate: f64,
    /// Scale of baseline intensity noise.
    pub au_noise: f64,
    /// Per-frame innovation of the slow pose drift (radians; translations x10 mm).
    pub pose_drift: f64,
    /// Peak head rotation per unit intensity for nods and shakes, radians.
    pub head_amplitude: f64,
    pub head_freq_hz: f64,
}

fn dist(pairs: &[(GestureKind, f64)]) -> [f64; N_GESTURES] {
    let mut d = [0.0; N_GESTURES];
    for (k, p) in pairs {
        d[k.index()] = *p;
    }
    d
}

impl ObserverProfile {
    /// Deterministic, valence-faithful observer for high-signal runs.
    pub fn clean() -> Self {
        use GestureKind::*;
        let plus6 = ClassProfile {
            gestures: dist(&[(Smile, 0.5), (HeadNod, 0.5)]),
            reaction_prob: 1.0,
            intensity: 3.0,
            intensity_sd: 0.0,
            extra_prob: 1.0,
        };
        let minus5 = ClassProfile {
            gestures: dist(&[(EyebrowFrown, 0.5), (HeadShake, 0.5)]),
            reaction_prob: 1.0,
            intensity: 4.0,
            intensity_sd: 0.0,
            extra_prob: 1.0,
        };
        let minus1 = ClassProfile {
            gestures: dist(&[(EyebrowFrown, 0.5), (Pout, 0.5)]),
            reaction_prob: 1.0,
            intensity: 1.5,
            intensity_sd: 0.0,
            extra_prob: 0.0,
        };
        Self {
            classes: [minus5, minus1, plus6],
            latency_mean_s: 1.47,
            latency_sd_s: 0.3,
            duration_mean_s: 1.2,
            duration_sd_s: 0.0,
            background_per_min: 0.0,
            confusion_rate: 0.0,
            au_noise: 0.05,
            pose_drift: 0.002,
            head_amplitude: 0.04,
            head_freq_hz: 2.0,
        }
    }

    /// Noisier observer: smiles under negative events, shared negative
    /// gestures for -5 and -1, background gestures.
    pub fn default_profile() -> Self {
        use GestureKind::*;
        let negative = dist(&[(Smile, 0.1), (EyebrowFrown, 0.3), (HeadShake, 0.25), (Pout, 0.2), (EyeRoll, 0.15)]);
        let plus6 = ClassProfile {
            gestures: dist(&[(Smile, 0.45), (HeadNod, 0.3), (EyebrowRaise, 0.25)]),
            reaction_prob: 0.85,
            intensity: 3.0,
            intensity_sd: 0.5,
            extra_prob: 0.4,
        };
        let minus5 = ClassProfile { gestures: negative, reaction_prob: 0.85, intensity: 4.0, intensity_sd: 0.5, extra_prob: 0.6 };
        let minus1 = ClassProfile { gestures: negative, reaction_prob: 0.7, intensity: 1.5, intensity_sd: 0.5, extra_prob: 0.1 };
        Self {
            classes: [minus5, minus1, plus6],
            latency_mean_s: 1.47,
            latency_sd_s: 0.8,
            duration_mean_s: 1.2,
            duration_sd_s: 0.3,
            background_per_min: 2.0,
            confusion_rate: 0.0,
            au_noise: 0.1,
            pose_drift: 0.002,
            head_amplitude: 0.04,
            head_freq_hz: 2.0,
        }
    }

    pub fn with_confusion(mut self, rate: f64) -> Self {
        self.confusion_rate = rate;
        self
    }

    pub fn class(&self, c: RewardClass) -> &ClassProfile {
        &self.classes[c.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64, what: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} must lie in [0, 1], got {x}")))
            }
        };
        for c in &self.classes {
            let sum: f64 = c.gestures.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || c.gestures.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidArgument(format!("gesture distribution sums to {sum}")));
            }
            unit(c.reaction_prob, "reaction_prob")?;
            unit(c.extra_prob, "extra_prob")?;
        }
        unit(self.confusion_rate, "confusion_rate")?;
        if self.latency_sd_s < 0.0 || self.duration_mean_s <= 0.0 || self.background_per_min < 0.0 {
            return Err(Error::InvalidArgument("negative spread or rate".into()));
        }
        Ok(())
    }

    /// Cells used for gesture kinds and for reaction parameters after
    /// confusion.
    fn emission_cells<R: Rng>(&self, class: RewardClass, rng: &mut R) -> (RewardClass, RewardClass) {
        let (mut positive, mut strong) = match class {
            RewardClass::Plus6 => (true, true),
            RewardClass::Minus5 => (false, true),
            RewardClass::Minus1 => (false, false),
        };
        if rng.random_bool(self.confusion_rate) {
            positive = !positive;
        }
        if rng.random_bool(self.confusion_rate) {
            strong = !strong;
        }
        let kinds = match (positive, strong) {
            (true, _) => RewardClass::Plus6,
            (false, true) => RewardClass::Minus5,
            (false, false) => RewardClass::Minus1,
        };
        let params = match (positive, strong) {
            (_, false) => RewardClass::Minus1,
            (true, true) => RewardClass::Plus6,
            (false, true) => RewardClass::Minus5,
        };
        (kinds, params)
    }
}

impl Default for ObserverProfile {
    fn default() -> Self {
        Self::default_profile()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestureEvent {
    pub kind: GestureKind,
    pub onset_frame: u32,
    /// Exclusive.
    pub offset_frame: u32,
    pub intensity: f64,
    /// Tick of the provoking reward event; `None` for background gestures.
    pub source_tick: Option<u32>,
}

impl GestureEvent {
    pub fn covers(&self, frame: u32) -> bool {
        (self.onset_frame..self.offset_frame).contains(&frame)
    }

    fn envelope(&self, frame: u32) -> f64 {
        let len = (self.offset_frame - self.onset_frame) as f64;
        let u = (frame - self.onset_frame) as f64 + 0.5;
        (std::f64::consts::PI * u / len).sin()
    }
}

/// A reward event presented to the observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardEvent {
    pub time_s: f64,
    pub class: RewardClass,
    pub tick: Option<u32>,
}

fn sample_categorical<R: Rng>(p: &[f64; N_GESTURES], exclude: Option<GestureKind>, rng: &mut R) -> Option<GestureKind> {
    let weight = |k: GestureKind| if Some(k) == exclude { 0.0 } else { p[k.index()] };
    let total: f64 = GestureKind::ALL.iter().map(|k| weight(*k)).sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for k in GestureKind::ALL {
        let w = weight(k);
        if w <= 0.0 {
            continue;
        }
        last = Some(k);
        if u < w {
            return Some(k);
        }
        u -= w;
    }
    last
}

fn truncated_normal<R: Rng>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if sd == 0.0 {
        return mean.clamp(lo, hi);
    }
    let n = Normal::new(mean, sd).expect("finite spread");
    for _ in 0..1000 {
        let x = n.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

fn sample_duration_frames<R: Rng>(profile: &ObserverProfile, fps: f64, rng: &mut R) -> u32 {
    let d = truncated_normal(profile.duration_mean_s, profile.duration_sd_s, 0.0, f64::INFINITY, rng);
    ((d * fps).round() as u32).max(2)
}

/// Gestures provoked by one reward event. Onsets before frame 0 are clipped.
pub fn react_to_event<R: Rng>(profile: &ObserverProfile, event: RewardEvent, fps: f64, rng: &mut R) -> Vec<GestureEvent> {
    let (kinds_from, params_from) = profile.emission_cells(event.class, rng);
    let params = profile.class(params_from);
    if !rng.random_bool(params.reaction_prob) {
        return Vec::new();
    }
    let kinds = &profile.class(kinds_from).gestures;
    let mut out = Vec::new();
    let mut first = None;
    let n = if rng.random_bool(params.extra_prob) { 2 } else { 1 };
    for _ in 0..n {
        let Some(kind) = sample_categorical(kinds, first, rng).or_else(|| sample_categorical(kinds, None, rng)) else {
            break;
        };
        first.get_or_insert(kind);
        let latency = truncated_normal(profile.latency_mean_s, profile.latency_sd_s, LATENCY_MIN_S, LATENCY_MAX_S, rng);
        let duration = sample_duration_frames(profile, fps, rng);
        let intensity = truncated_normal(params.intensity, params.intensity_sd, 0.2, 5.0, rng);
        let onset = ((event.time_s + latency) * fps).round().max(0.0) as u32;
        out.push(GestureEvent { kind, onset_frame: onset, offset_frame: onset + duration, intensity, source_tick: event.tick });
    }
    out
}

/// Poisson background gestures of uniform kind over `[0, total_frames)`.
pub fn background_gestures<R: Rng>(profile: &ObserverProfile, total_frames: u32, fps: f64, rng: &mut R) -> Vec<GestureEvent> {
    let minutes = total_frames as f64 / fps / 60.0;
    let lambda = profile.background_per_min * minutes;
    if lambda <= 0.0 || total_frames < 2 {
        return Vec::new();
    }
    let count = Poisson::new(lambda).expect("positive rate").sample(rng) as usize;
    (0..count)
        .map(|_| {
            let kind = GestureKind::ALL[rng.random_range(0..N_GESTURES)];
            let duration = sample_duration_frames(profile, fps, rng).min(total_frames);
            let onset = rng.random_range(0..=total_frames - duration);
            let intensity = truncated_normal(2.0, 0.5, 0.2, 5.0, rng);
            GestureEvent { kind, onset_frame: onset, offset_frame: onset + duration, intensity, source_tick: None }
        })
        .collect()
}

/// Streaming frame generator. Gestures may be added at any time; onsets
/// already in the past are moved to the next frame.
#[derive(Debug, Clone)]
pub struct FrameSynth {
    fps: f64,
    au_noise: f64,
    pose_drift: f64,
    head_amplitude: f64,
    head_freq_hz: f64,
    rng: ChaCha8Rng,
    frame: u32,
    drift: [f64; 6],
    active: Vec<GestureEvent>,
}

const POSE_BASE: [f64; 6] = [0.0, 0.0, 500.0, 0.0, 0.0, 0.0];
const DRIFT_PULL: f64 = 0.01;

impl FrameSynth {
    pub fn new(profile: &ObserverProfile, fps: f64, seed: u64) -> Self {
        Self {
            fps,
            au_noise: profile.au_noise,
            pose_drift: profile.pose_drift,
            head_amplitude: profile.head_amplitude,
            head_freq_hz: profile.head_freq_hz,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frame: 0,
            drift: [0.0; 6],
            active: Vec::new(),
        }
    }

    /// Index of the frame the next call to [`FrameSynth::next_frame`] emits.
    pub fn frame_index(&self) -> u32 {
        self.frame
    }

    /// Adds a gesture and returns it as it will be rendered.
    pub fn add(&mut self, mut g: GestureEvent) -> GestureEvent {
        if g.onset_frame < self.frame {
            let len = g.offset_frame - g.onset_frame;
            g.onset_frame = self.frame;
            g.offset_frame = self.frame + len;
        }
        self.active.push(g);
        g
    }

    pub fn next_frame(&mut self) -> (FrameFeatures, Annotation) {
        let f = self.frame;
        let mut x = FrameFeatures::default();
        let mut ann = [0u8; N_CHANNELS];
        for v in &mut x.0[frame::AU_R_START..frame::POSE_START] {
            *v = (self.rng.random::<f64>() * self.au_noise).min(5.0);
        }
        for (i, d) in self.drift.iter_mut().enumerate() {
            let scale = if i < 3 { 10.0 * self.pose_drift } else { self.pose_drift };
            let step: f64 = self.rng.random::<f64>() - 0.5;
            *d += -DRIFT_PULL * *d + scale * step;
        }
        let mut pose = [0.0; 6];
        for i in 0..6 {
            pose[i] = POSE_BASE[i] + self.drift[i];
        }
        for g in self.active.iter().filter(|g| g.covers(f)) {
            ann[g.kind.index()] = 1;
            ann[g.kind.sentiment_channel()] = 1;
            let w = g.envelope(f);
            for &au in g.kind.action_units() {
                if let Some(c) = au_c_index(au) {
                    x.0[c] = 1.0;
                }
                if let Some(r) = au_r_index(au) {
                    x.0[r] = x.0[r].max((g.intensity * w).min(5.0));
                }
            }
            let phase = 2.0 * std::f64::consts::PI * self.head_freq_hz * (f - g.onset_frame) as f64 / self.fps;
            let swing = self.head_amplitude * g.intensity * w * phase.sin();
            match g.kind {
                GestureKind::HeadNod => pose[POSE_RX] += swing,
                GestureKind::HeadShake => pose[POSE_RY] += swing,
                _ => {}
            }
        }
        x.pose_mut().copy_from_slice(&pose);
        self.active.retain(|g| g.offset_frame > f + 1);
        self.frame += 1;
        (x, ann)
    }
}

/// Frames for a fixed gesture list; equivalent to adding every gesture to a
/// fresh [`FrameSynth`] up front.
pub fn synthesize_frames(
    gestures: &[GestureEvent],
    total_frames: u32,
    profile: &ObserverProfile,
    fps: f64,
    seed: u64,
) -> (Vec<FrameFeatures>, Vec<Annotation>) {
    let mut synth = FrameSynth::new(profile, fps, seed);
    for g in gestures {
        synth.add(*g);
    }
    (0..total_frames).map(|_| synth.next_frame()).unzip()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fps: f64,
    pub step_period_s: f64,
    /// Neutral frames appended after the last tick.
    pub tail_frames: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Self { fps: 30.0, step_period_s: 1.5, tail_frames: 0 }
    }
}

impl Timing {
    pub fn frames_per_tick(&self) -> u32 {
        (self.step_period_s * self.fps).round() as u32
    }
}

/// The observer as a whole: a reaction RNG and a frame stream.
#[derive(Debug, Clone)]
pub struct Observer {
    pub profile: ObserverProfile,
    pub fps: f64,
    rng: ChaCha8Rng,
    synth: FrameSynth,
    gestures: Vec<GestureEvent>,
}

impl Observer {
    pub fn new(profile: ObserverProfile, fps: f64, seed: u64) -> Self {
        let synth = FrameSynth::new(&profile, fps, seed ^ 0x5eed_f4ce);
        Self { profile, fps, rng: ChaCha8Rng::seed_from_u64(seed), synth, gestures: Vec::new() }
    }

    pub fn react(&mut self, event: RewardEvent) -> Vec<GestureEvent> {
        let gs = react_to_event(&self.profile, event, self.fps, &mut self.rng);
        gs.into_iter().map(|g| self.push(g)).collect()
    }

    pub fn schedule_background(&mut self, total_frames: u32) {
        for g in background_gestures(&self.profile, total_frames, self.fps, &mut self.rng) {
            self.push(g);
        }
    }

    /// Adds an externally produced gesture, e.g. one keyed in by a live
    /// observer.
    pub fn push(&mut self, g: GestureEvent) -> GestureEvent {
        let g = self.synth.add(g);
        self.gestures.push(g);
        g
    }

    pub fn next_frame(&mut self) -> (FrameFeatures, Annotation) {
        self.synth.next_frame()
    }

    pub fn frame_index(&self) -> u32 {
        self.synth.frame_index()
    }

    pub fn gestures(&self) -> &[GestureEvent] {
        &self.gestures
    }
}

/// An episode together with the time-aligned observer recording.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecording {
    pub log: EpisodeLog,
    pub frames: Vec<FrameFeatures>,
    pub annotations: Vec<Annotation>,
    pub gestures: Vec<GestureEvent>,
    pub timing: Timing,
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    timing: Timing,
    gestures: Vec<GestureEvent>,
}

impl SessionRecording {
    pub fn frames_per_tick(&self) -> u32 {
        self.timing.frames_per_tick()
    }

    /// Tick containing `frame`, or `None` in the trailing neutral tail.
    pub fn tick_of_frame(&self, frame: u32) -> Option<u32> {
        let t = frame / self.frames_per_tick();
        (t < self.log.len() as u32).then_some(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.log.write_jsonl(std::io::BufWriter::new(std::fs::File::create(dir.join("episode.jsonl"))?))?;
        frame::save_feature_csv(&self.frames, &dir.join("features.csv"))?;
        let mut w = csv::Writer::from_path(dir.join("annotations.csv"))?;
        let mut header = vec!["frame".to_string()];
        header.extend(CHANNEL_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for (i, a) in self.annotations.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(a.iter().map(|b| b.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        let meta = SessionMeta { timing: self.timing, gestures: self.gestures.clone() };
        std::fs::write(dir.join("session.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let log = EpisodeLog::read_jsonl(std::io::BufReader::new(std::fs::File::open(dir.join("episode.jsonl"))?))?;
        let stream = frame::load_feature_csv(&dir.join("features.csv"))?;
        let mut annotations = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("annotations.csv"))?;
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let mut a = [0u8; N_CHANNELS];
            for (j, slot) in a.iter_mut().enumerate() {
                let cell = rec.get(j + 1).unwrap_or("");
                *slot = cell.parse().map_err(|_| Error::Parse {
                    row: row + 1,
                    column: CHANNEL_NAMES[j].to_string(),
                    message: format!("not a 0/1 flag: {cell:?}"),
                })?;
            }
            annotations.push(a);
        }
        let meta: SessionMeta = serde_json::from_slice(&std::fs::read(dir.join("session.json"))?)?;
        if annotations.len() != stream.frames.len() {
            return Err(Error::Shape(format!(
                "{} annotation rows for {} feature rows",
                annotations.len(),
                stream.frames.len()
            )));
        }
        Ok(Self { log, frames: stream.frames, annotations, gestures: meta.gestures, timing: meta.timing })
    }
}

/// Runs the observer over a logged episode: one reaction per pickup, timed
/// at the start of the pickup's tick, plus background gestures.
pub fn generate_session(profile: &ObserverProfile, log: &EpisodeLog, timing: Timing, seed: u64) -> SessionRecording {
    let fpt = timing.frames_per_tick();
    let total = log.len() as u32 * fpt + timing.tail_frames;
    let mut obs = Observer::new(profile.clone(), timing.fps, seed);
    for r in &log.records {
        if let (Some(_), Some(class)) = (r.event, RewardClass::from_value(r.reward)) {
            obs.react(RewardEvent { time_s: r.tick as f64 * timing.step_period_s, class, tick: Some(r.tick) });
        }
    }
    obs.schedule_background(total);
    let (frames, annotations) = (0..total).map(|_| obs.next_frame()).unzip();
    SessionRecording { log: log.clone(), frames, annotations, gestures: obs.gestures().to_vec(), timing }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn event(class: RewardClass) -> RewardEvent {
        RewardEvent { time_s: 10.0, class, tick: Some(4) }
    }

    #[test]
    fn profiles_validate() {
        ObserverProfile::clean().validate().unwrap();
        ObserverProfile::default_profile().validate().unwrap();
        let mut bad = ObserverProfile::clean();
        bad.classes[0].gestures[0] += 0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn degenerate_profile_gives_single_smile_on_time() {
        let mut p = ObserverProfile::clean();
        p.latency_sd_s = 0.0;
        p.classes[RewardClass::Plus6.index()].gestures = dist(&[(GestureKind::Smile, 1.0)]);
        p.classes[RewardClass::Plus6.index()].extra_prob = 0.0;
        let gs = react_to_event(&p, event(RewardClass::Plus6), 30.0, &mut rng(1));
        assert_eq!(gs.len(), 1);
        assert_eq!(gs[0].kind, GestureKind::Smile);
        assert_eq!(gs[0].onset_frame, ((10.0 + 1.47) * 30.0_f64).round() as u32);
    }

    #[test]
    fn no_reaction_when_probability_zero() {
        let mut p = ObserverProfile::default_profile();
        for c in &mut p.classes {
            c.reaction_prob = 0.0;
        }
        let mut r = rng(2);
        for class in RewardClass::ALL {
            for _ in 0..100 {
                assert!(react_to_event(&p, event(class), 30.0, &mut r).is_empty());
            }
        }
    }

    #[test]
    fn second_gesture_differs_in_kind() {
        let p = ObserverProfile::clean();
        let mut r = rng(3);
        for _ in 0..200 {
            let gs = react_to_event(&p, event(RewardClass::Plus6), 30.0, &mut r);
            assert_eq!(gs.len(), 2);
            assert_ne!(gs[0].kind, gs[1].kind);
        }
    }

    #[test]
    fn half_confusion_halves_positive_gestures() {
        let p = ObserverProfile::clean().with_confusion(0.5);
        let mut r = rng(4);
        let n = 10_000;
        let positive = (0..n)
            .filter(|_| {
                let gs = react_to_event(&p, event(RewardClass::Plus6), 30.0, &mut r);
                matches!(gs[0].kind, GestureKind::Smile | GestureKind::HeadNod)
            })
            .count();
        let f = positive as f64 / n as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn latency_window_is_respected() {
        let mut p = ObserverProfile::default_profile();
        p.latency_sd_s = 5.0;
        let mut r = rng(5);
        for _ in 0..2000 {
            for g in react_to_event(&p, event(RewardClass::Minus5), 30.0, &mut r) {
                let lat = g.onset_frame as f64 / 30.0 - 10.0;
                assert!((LATENCY_MIN_S - 1.0 / 30.0..=LATENCY_MAX_S + 1.0 / 30.0).contains(&lat), "{lat}");
                assert!(g.offset_frame >= g.onset_frame + 2);
            }
        }
    }

    #[test]
    fn no_gestures_means_neutral_stream() {
        let (frames, ann) = synthesize_frames(&[], 300, &ObserverProfile::default_profile(), 30.0, 1);
        assert_eq!(frames.len(), 300);
        assert!(ann.iter().all(|a| a.iter().all(|b| *b == 0)));
        assert!(frames.iter().all(|f| f.au_c().iter().all(|c| *c == 0.0)));
    }

    #[test]
    fn smile_annotation_covers_exact_span() {
        let g = GestureEvent { kind: GestureKind::Smile, onset_frame: 30, offset_frame: 60, intensity: 3.0, source_tick: None };
        let (frames, ann) = synthesize_frames(&[g], 100, &ObserverProfile::clean(), 30.0, 1);
        for (f, a) in ann.iter().enumerate() {
            let on = (30..60).contains(&f);
            assert_eq!(a[GestureKind::Smile.index()] == 1, on, "frame {f}");
            assert_eq!(a[CHANNEL_POSITIVE] == 1, on);
            assert_eq!(frames[f].0[au_c_index(12).unwrap()] == 1.0, on);
        }
    }

    #[test]
    fn overlapping_gestures_combine_by_max() {
        let a = GestureEvent { kind: GestureKind::EyebrowRaise, onset_frame: 0, offset_frame: 40, intensity: 1.0, source_tick: None };
        let b = GestureEvent { kind: GestureKind::EyeRoll, onset_frame: 0, offset_frame: 40, intensity: 4.0, source_tick: None };
        let mut p = ObserverProfile::clean();
        p.au_noise = 0.0;
        let (only_b, _) = synthesize_frames(&[b], 40, &p, 30.0, 1);
        let (both, _) = synthesize_frames(&[a, b], 40, &p, 30.0, 1);
        let au05 = au_r_index(5).unwrap();
        for f in 0..40 {
            assert_eq!(both[f].0[au05], only_b[f].0[au05]);
        }
    }

    #[test]
    fn streaming_matches_batch() {
        let p = ObserverProfile::default_profile();
        let gs = vec![
            GestureEvent { kind: GestureKind::HeadNod, onset_frame: 10, offset_frame: 50, intensity: 3.0, source_tick: Some(0) },
            GestureEvent { kind: GestureKind::Pout, onset_frame: 40, offset_frame: 70, intensity: 2.0, source_tick: None },
        ];
        let batch = synthesize_frames(&gs, 120, &p, 30.0, 9);
        let mut s = FrameSynth::new(&p, 30.0, 9);
        let mut out = Vec::new();
        for f in 0..120u32 {
            for g in gs.iter().filter(|g| g.onset_frame == f) {
                s.add(*g);
            }
            out.push(s.next_frame());
        }
        let (frames, ann): (Vec<_>, Vec<_>) = out.into_iter().unzip();
        assert_eq!(frames, batch.0);
        assert_eq!(ann, batch.1);
    }
}
