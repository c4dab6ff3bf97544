//! Frame features to model inputs: pose detrending, head-motion spectra,
//! max-pool aggregation, labeled windows and the cross-validation splits.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{FrameFeatures, N_AU_C, N_AU_R, N_POSE};
use crate::gridworld::RewardClass;
use crate::observer::{Annotation, SessionRecording, N_CHANNELS};

pub const FAU_DIM: usize = N_AU_C + N_AU_R;
pub const FFT_WINDOW: usize = 50;
pub const FFT_BINS: usize = 9;
pub const HEAD_DIM: usize = N_POSE * FFT_BINS;
pub const FRAME_FEATURE_DIM: usize = FAU_DIM + HEAD_DIM;
pub const DEFAULT_POOL: usize = 9;

/// Pose minus its running mean over frames `0..=i`.
pub fn pose_detrend(frames: &[FrameFeatures]) -> Vec<[f64; N_POSE]> {
    let mut mean = [0.0; N_POSE];
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut out = [0.0; N_POSE];
            for d in 0..N_POSE {
                mean[d] += (f.pose()[d] - mean[d]) / (i + 1) as f64;
                out[d] = f.pose()[d] - mean[d];
            }
            out
        })
        .collect()
}

/// Fixed-size DFT over the trailing window.
#[derive(Clone)]
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
}

impl std::fmt::Debug for Spectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectrum").field("len", &self.buf.len()).finish()
    }
}

impl Default for Spectrum {
    fn default() -> Self {
        Self::new(FFT_WINDOW)
    }
}

impl Spectrum {
    pub fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self { fft, buf: vec![Complex::default(); len] }
    }

    /// Every complex bin of the window.
    pub fn full(&mut self, window: &[f64]) -> Vec<Complex<f64>> {
        assert_eq!(window.len(), self.buf.len());
        for (b, x) in self.buf.iter_mut().zip(window) {
            *b = Complex::new(*x, 0.0);
        }
        self.fft.process(&mut self.buf);
        self.buf.clone()
    }

    /// Magnitudes of bins `0..FFT_BINS`.
    pub fn magnitudes(&mut self, window: &[f64]) -> [f64; FFT_BINS] {
        let bins = self.full(window);
        std::array::from_fn(|k| bins[k].norm())
    }
}

/// Head-motion features of the last frame of `history` (oldest first): the
/// trailing `FFT_WINDOW` detrended pose values of each dimension, zero-padded
/// at the front, transformed dimension by dimension.
pub fn head_motion_fft(history: &[[f64; N_POSE]], spectrum: &mut Spectrum) -> [f64; HEAD_DIM] {
    let start = history.len().saturating_sub(FFT_WINDOW);
    let tail = &history[start..];
    let pad = FFT_WINDOW - tail.len();
    let mut out = [0.0; HEAD_DIM];
    let mut window = [0.0; FFT_WINDOW];
    for d in 0..N_POSE {
        window[..pad].fill(0.0);
        for (w, h) in window[pad..].iter_mut().zip(tail) {
            *w = h[d];
        }
        out[d * FFT_BINS..(d + 1) * FFT_BINS].copy_from_slice(&spectrum.magnitudes(&window));
    }
    out
}

/// Per-frame model features, one frame at a time. Frames the tracker lost
/// repeat the last valid frame.
#[derive(Debug, Clone, Default)]
pub struct FeatureExtractor {
    last_valid: Option<FrameFeatures>,
    pose_mean: [f64; N_POSE],
    count: usize,
    history: VecDeque<[f64; N_POSE]>,
    spectrum: Spectrum,
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, raw: &FrameFeatures) -> [f64; FRAME_FEATURE_DIM] {
        let f = if raw.success() {
            self.last_valid = Some(*raw);
            *raw
        } else {
            self.last_valid.unwrap_or_else(|| {
                let mut z = FrameFeatures::default();
                z.pose_mut().fill(0.0);
                z
            })
        };
        self.count += 1;
        let mut detrended = [0.0; N_POSE];
        for d in 0..N_POSE {
            self.pose_mean[d] += (f.pose()[d] - self.pose_mean[d]) / self.count as f64;
            detrended[d] = f.pose()[d] - self.pose_mean[d];
        }
        if self.history.len() == FFT_WINDOW {
            self.history.pop_front();
        }
        self.history.push_back(detrended);
        let hist: Vec<[f64; N_POSE]> = self.history.iter().copied().collect();
        let head = head_motion_fft(&hist, &mut self.spectrum);
        let mut out = [0.0; FRAME_FEATURE_DIM];
        out[..FAU_DIM].copy_from_slice(f.fau());
        out[FAU_DIM..].copy_from_slice(&head);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFrame {
    pub fau: [f64; FAU_DIM],
    pub head: [f64; HEAD_DIM],
    /// First and last source frame, inclusive.
    pub first: u32,
    pub last: u32,
}

/// Per-dimension max over consecutive blocks of `pool` rows; a trailing
/// partial block is pooled as is.
pub fn max_pool<const W: usize>(rows: &[[f64; W]], pool: usize) -> Vec<[f64; W]> {
    assert!(pool >= 1, "pool size must be positive");
    rows.chunks(pool)
        .map(|block| {
            let mut m = block[0];
            for r in &block[1..] {
                for (a, b) in m.iter_mut().zip(r) {
                    *a = a.max(*b);
                }
            }
            m
        })
        .collect()
}

pub fn pool_annotations(ann: &[Annotation], pool: usize) -> Vec<Annotation> {
    assert!(pool >= 1, "pool size must be positive");
    ann.chunks(pool)
        .map(|block| {
            let mut m = [0u8; N_CHANNELS];
            for a in block {
                for (x, y) in m.iter_mut().zip(a) {
                    *x = (*x).max(*y);
                }
            }
            m
        })
        .collect()
}

/// Streaming aggregation: feed raw frames, receive an aggregated frame every
/// `pool` frames.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub pool: usize,
    extractor: FeatureExtractor,
    block: Vec<[f64; FRAME_FEATURE_DIM]>,
    next_frame: u32,
}

impl Aggregator {
    pub fn new(pool: usize) -> Self {
        assert!(pool >= 1, "pool size must be positive");
        Self { pool, extractor: FeatureExtractor::new(), block: Vec::with_capacity(pool), next_frame: 0 }
    }

    pub fn push(&mut self, raw: &FrameFeatures) -> Option<AggregatedFrame> {
        self.block.push(self.extractor.push(raw));
        self.next_frame += 1;
        (self.block.len() == self.pool).then(|| self.flush_block())
    }

    /// Pools a trailing partial block, if any.
    pub fn finish(&mut self) -> Option<AggregatedFrame> {
        (!self.block.is_empty()).then(|| self.flush_block())
    }

    fn flush_block(&mut self) -> AggregatedFrame {
        let pooled = max_pool(&self.block, self.block.len())[0];
        let n = self.block.len() as u32;
        self.block.clear();
        let mut fau = [0.0; FAU_DIM];
        let mut head = [0.0; HEAD_DIM];
        fau.copy_from_slice(&pooled[..FAU_DIM]);
        head.copy_from_slice(&pooled[FAU_DIM..]);
        AggregatedFrame { fau, head, first: self.next_frame - n, last: self.next_frame - 1 }
    }
}

pub fn aggregate(frames: &[FrameFeatures], pool: usize) -> Vec<AggregatedFrame> {
    let mut agg = Aggregator::new(pool);
    let mut out: Vec<AggregatedFrame> = frames.iter().filter_map(|f| agg.push(f)).collect();
    out.extend(agg.finish());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Aggregated frames before the labeled frame.
    pub k: usize,
    /// Aggregated frames after the labeled frame.
    pub l: usize,
    pub pool: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { k: 0, l: 12, pool: DEFAULT_POOL }
    }
}

impl WindowConfig {
    pub fn len(&self) -> usize {
        self.k + self.l + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fau_width(&self) -> usize {
        FAU_DIM * self.len()
    }

    pub fn head_width(&self) -> usize {
        HEAD_DIM * self.len()
    }

    pub fn aux_width(&self) -> usize {
        N_CHANNELS * self.len()
    }

    /// Raw frames between a label frame and the newest frame its window needs.
    pub fn delay_frames(&self) -> usize {
        self.l * self.pool
    }
}

/// Identifies the provenance of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleKey {
    pub subject: usize,
    pub episode: usize,
    pub tick: u32,
    /// Index of the labeled aggregated frame.
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub key: SampleKey,
    /// Frame-major flattening of the window's facial-unit vectors.
    pub fau: Vec<f64>,
    pub head: Vec<f64>,
    pub aux: Vec<f64>,
    pub label: RewardClass,
}

impl WindowSample {
    pub fn one_hot(&self) -> [f64; 3] {
        let mut y = [0.0; 3];
        y[self.label.index()] = 1.0;
        y
    }

    pub fn is_positive(&self) -> bool {
        self.label == RewardClass::Plus6
    }
}

/// Assembles the window around aggregated frame `t`; `None` when it runs
/// past either edge.
pub fn window_at(agg: &[AggregatedFrame], ann: &[Annotation], t: usize, cfg: &WindowConfig) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if t < cfg.k || t + cfg.l >= agg.len() || t + cfg.l >= ann.len() {
        return None;
    }
    let range = t - cfg.k..=t + cfg.l;
    let mut fau = Vec::with_capacity(cfg.fau_width());
    let mut head = Vec::with_capacity(cfg.head_width());
    let mut aux = Vec::with_capacity(cfg.aux_width());
    for i in range {
        fau.extend_from_slice(&agg[i].fau);
        head.extend_from_slice(&agg[i].head);
        aux.extend(ann[i].iter().map(|b| *b as f64));
    }
    Some((fau, head, aux))
}

/// Labeled windows for every aggregated frame whose tick paid a reward.
pub fn make_samples(session: &SessionRecording, cfg: &WindowConfig, subject: usize, episode: usize) -> Vec<WindowSample> {
    let agg = aggregate(&session.frames, cfg.pool);
    let ann = pool_annotations(&session.annotations, cfg.pool);
    samples_from_aggregated(session, &agg, &ann, cfg, subject, episode)
}

pub fn samples_from_aggregated(
    session: &SessionRecording,
    agg: &[AggregatedFrame],
    ann: &[Annotation],
    cfg: &WindowConfig,
    subject: usize,
    episode: usize,
) -> Vec<WindowSample> {
    let mut out = Vec::new();
    for (t, a) in agg.iter().enumerate() {
        let Some(tick) = session.tick_of_frame(a.first) else { continue };
        let rec = &session.log.records[tick as usize];
        let Some(label) = rec.event.and(RewardClass::from_value(rec.reward)) else { continue };
        if let Some((fau, head, aux)) = window_at(agg, ann, t, cfg) {
            out.push(WindowSample { key: SampleKey { subject, episode, tick, frame: t }, fau, head, aux, label });
        }
    }
    out
}

/// A half episode: the unit the splits are made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub subject: usize,
    pub episode: usize,
    pub half: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Test,
    Validation,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub target: usize,
    pub roles: BTreeMap<Segment, Role>,
}

impl Fold {
    pub fn role(&self, seg: Segment) -> Role {
        self.roles[&seg]
    }

    pub fn segments(&self, role: Role) -> impl Iterator<Item = Segment> + '_ {
        self.roles.iter().filter(move |(_, r)| **r == role).map(|(s, _)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    /// Holdout episode of each subject.
    pub holdout: Vec<usize>,
    pub folds: Vec<Fold>,
    /// Train/test split of all non-holdout data, used to fit the models
    /// evaluated on the holdout episodes.
    pub final_fold: Fold,
}

/// Per subject one random episode is held out. Fold `i` validates on one of
/// subject `i`'s remaining episodes, tests on a random half episode of every
/// subject, and trains on the rest.
pub fn make_splits(episodes: &[usize], seed: u64) -> Result<Splits> {
    if episodes.len() < 2 {
        return Err(Error::InvalidArgument(format!("at least 2 subjects required, got {}", episodes.len())));
    }
    if let Some((s, n)) = episodes.iter().enumerate().find(|(_, n)| **n < 3) {
        return Err(Error::InvalidArgument(format!("subject {s} has {n} episodes, at least 3 required")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let holdout: Vec<usize> = episodes.iter().map(|n| rng.random_range(0..*n)).collect();
    let mut folds = Vec::with_capacity(episodes.len());
    for target in 0..episodes.len() {
        let mut roles = base_roles(episodes, &holdout);
        let options: Vec<usize> = (0..episodes[target]).filter(|e| *e != holdout[target]).collect();
        let val = options[rng.random_range(0..options.len())];
        for half in 0..2 {
            roles.insert(Segment { subject: target, episode: val, half }, Role::Validation);
        }
        pick_test_halves(&mut roles, episodes.len(), &mut rng);
        folds.push(Fold { target, roles });
    }
    let mut roles = base_roles(episodes, &holdout);
    pick_test_halves(&mut roles, episodes.len(), &mut rng);
    Ok(Splits { holdout, folds, final_fold: Fold { target: usize::MAX, roles } })
}

fn base_roles(episodes: &[usize], holdout: &[usize]) -> BTreeMap<Segment, Role> {
    let mut roles = BTreeMap::new();
    for (s, n) in episodes.iter().enumerate() {
        for e in 0..*n {
            let role = if e == holdout[s] { Role::Holdout } else { Role::Train };
            for half in 0..2 {
                roles.insert(Segment { subject: s, episode: e, half }, role);
            }
        }
    }
    roles
}

/// Moves one random training half episode of every subject to the test set.
fn pick_test_halves(roles: &mut BTreeMap<Segment, Role>, n_subjects: usize, rng: &mut ChaCha8Rng) {
    for s in 0..n_subjects {
        let candidates: Vec<Segment> = roles
            .iter()
            .filter(|(seg, r)| seg.subject == s && **r == Role::Train)
            .map(|(seg, _)| *seg)
            .collect();
        let seg = candidates[rng.random_range(0..candidates.len())];
        roles.insert(seg, Role::Test);
    }
}

/// Which half of the episode a tick belongs to.
pub fn half_of(tick: u32, episode_ticks: u32) -> u8 {
    u8::from(tick >= episode_ticks / 2)
}

pub fn segment_of(key: &SampleKey, episode_ticks: u32) -> Segment {
    Segment { subject: key.subject, episode: key.episode, half: half_of(key.tick, episode_ticks) }
}

/// Sample indices per role.
pub fn partition(samples: &[WindowSample], fold: &Fold, episode_ticks: u32) -> BTreeMap<&'static str, Vec<usize>> {
    let mut out: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
    for name in ["train", "test", "validation", "holdout"] {
        out.insert(name, Vec::new());
    }
    for (i, s) in samples.iter().enumerate() {
        let name = match fold.role(segment_of(&s.key, episode_ticks)) {
            Role::Train => "train",
            Role::Test => "test",
            Role::Validation => "validation",
            Role::Holdout => "holdout",
        };
        out.get_mut(name).expect("known role").push(i);
    }
    out
}

/// Distinct subjects present in a sample set.
pub fn subjects(samples: &[WindowSample]) -> BTreeSet<usize> {
    samples.iter().map(|s| s.key.subject).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_frame(p: [f64; 6]) -> FrameFeatures {
        let mut f = FrameFeatures::default();
        f.pose_mut().copy_from_slice(&p);
        f
    }

    #[test]
    fn constant_pose_detrends_to_zero() {
        let frames = vec![pose_frame([1.0, 2.0, 500.0, 0.1, 0.2, 0.3]); 20];
        for d in pose_detrend(&frames) {
            assert!(d.iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn ramp_detrends_to_half_index() {
        let frames: Vec<_> = (0..40).map(|i| pose_frame([i as f64; 6])).collect();
        for (i, d) in pose_detrend(&frames).iter().enumerate() {
            assert!((d[0] - i as f64 / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_history_gives_zero_spectrum() {
        let mut sp = Spectrum::default();
        assert!(head_motion_fft(&[[0.0; 6]; 10], &mut sp).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn pure_tone_peaks_at_its_bin() {
        let mut sp = Spectrum::default();
        let hist: Vec<[f64; 6]> = (0..FFT_WINDOW)
            .map(|n| {
                let mut p = [0.0; 6];
                p[4] = (2.0 * std::f64::consts::PI * 3.0 * n as f64 / 50.0).sin();
                p
            })
            .collect();
        let h = head_motion_fft(&hist, &mut sp);
        let ry = &h[4 * FFT_BINS..5 * FFT_BINS];
        for (k, v) in ry.iter().enumerate() {
            if k != 3 {
                assert!(ry[3] > *v);
            }
        }
        assert!((ry[3] - 25.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_basics() {
        let rows = [[0.1], [0.9], [0.4]];
        assert_eq!(max_pool(&rows, 3), vec![[0.9]]);
        assert_eq!(max_pool(&rows, 1), rows.to_vec());
        assert_eq!(max_pool(&rows, 2), vec![[0.9], [0.4]]);
    }

    #[test]
    fn lost_frames_hold_previous_values() {
        let mut a = FrameFeatures::default();
        a.0[crate::frame::AU_R_START] = 2.5;
        let mut lost = FrameFeatures::default();
        lost.0[crate::frame::SUCCESS] = 0.0;
        let mut ex = FeatureExtractor::new();
        let x = ex.push(&a);
        let y = ex.push(&lost);
        assert_eq!(x[..FAU_DIM], y[..FAU_DIM]);
    }

    #[test]
    fn default_window_widths() {
        let c = WindowConfig::default();
        assert_eq!((c.fau_width(), c.head_width(), c.aux_width()), (455, 702, 130));
        assert_eq!(c.delay_frames(), 108);
    }

    #[test]
    fn splits_reject_short_subjects() {
        assert!(make_splits(&[3], 1).is_err());
        assert!(make_splits(&[3, 2], 1).is_err());
    }
}
