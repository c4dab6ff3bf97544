//! Sans-IO live session: feed client text in, advance ticks, collect
//! outbound messages. Every applied input is recorded for replay.

use std::sync::Arc;

use serde::Serialize;

use super::online::{OnlineSession, SessionConfig};
use super::record::{Entry, Recording};
use super::wire::{AckPayload, Control, ErrorPayload, FramePayload, GesturePayload, Handshake, MessageType, WireMessage, PROTOCOL_VERSION};
use crate::error::{Error, Result};
use crate::frame::{FrameFeatures, FRAME_WIDTH};
use crate::gridworld::{Action, AgentPose, Cell, ObjectType};
use crate::inference::Predictor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatePayload {
    pub tick: u32,
    pub frame: u32,
    pub agent: AgentPose,
    pub objects: Vec<(Cell, ObjectType)>,
    pub score: i64,
    pub action: Action,
    pub reward: i32,
    pub event: Option<ObjectType>,
    pub running: bool,
    pub finished: bool,
    pub starved_frames: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BeliefPayload {
    pub tick: u32,
    pub posterior: Vec<f64>,
    pub map: crate::gridworld::RewardSpec,
    pub entropy: f64,
}

pub struct LiveSession {
    base: SessionConfig,
    next_seed: u64,
    predictor: Arc<dyn Predictor + Send + Sync>,
    session: OnlineSession,
    running: bool,
    out_seq: u64,
    last_client_seq: Option<u64>,
    recording: Recording,
}

impl LiveSession {
    /// Starts paused.
    pub fn new(cfg: SessionConfig, predictor: Arc<dyn Predictor + Send + Sync>) -> Result<Self> {
        let session = OnlineSession::new(cfg.clone(), predictor.clone())?;
        Ok(Self {
            next_seed: cfg.seed,
            recording: Recording::new(cfg.clone()),
            base: cfg,
            predictor,
            session,
            running: false,
            out_seq: 0,
            last_client_seq: None,
        })
    }

    pub fn session(&self) -> &OnlineSession {
        &self.session
    }

    pub fn recording(&self) -> &Recording {
        &self.recording
    }

    pub fn is_running(&self) -> bool {
        self.running && !self.session.is_finished()
    }

    fn emit(&mut self, kind: MessageType, payload: impl Serialize) -> WireMessage {
        self.out_seq += 1;
        WireMessage::new(kind, self.out_seq, payload)
    }

    /// First message to a newly connected client. Resets the client-side
    /// sequence check.
    pub fn handshake(&mut self) -> WireMessage {
        self.last_client_seq = None;
        self.recording.entries.push(Entry::Connect);
        let payload = Handshake { protocol_version: PROTOCOL_VERSION, seed: self.session.config().seed, hypotheses: self.session.belief().hypotheses().to_vec() };
        self.emit(MessageType::Ack, payload)
    }

    /// Applies one client message. Errors become `error` messages; the
    /// connection is never dropped here.
    pub fn handle_text(&mut self, text: &str) -> Vec<WireMessage> {
        let msg = match WireMessage::parse(text) {
            Ok(m) => m,
            Err(e) => return vec![self.error(e.to_string(), None)],
        };
        if !msg.kind.from_client() {
            return vec![self.error(format!("clients may not send {:?} messages", msg.kind), Some(msg.seq))];
        }
        if let Some(last) = self.last_client_seq {
            if msg.seq <= last {
                return vec![self.error(format!("seq {} not above {last}", msg.seq), Some(msg.seq))];
            }
        }
        self.last_client_seq = Some(msg.seq);
        match self.apply(&msg) {
            Ok(out) => {
                self.recording.entries.push(Entry::Input { text: msg.to_json() });
                out
            }
            Err(e) => vec![self.error(e.to_string(), Some(msg.seq))],
        }
    }

    fn error(&mut self, reason: String, ack: Option<u64>) -> WireMessage {
        self.emit(MessageType::Error, ErrorPayload { reason, ack })
    }

    fn apply(&mut self, msg: &WireMessage) -> Result<Vec<WireMessage>> {
        let bad = |e: serde_json::Error| Error::Protocol(format!("bad {:?} payload: {e}", msg.kind));
        match msg.kind {
            MessageType::Gesture => {
                let g: GesturePayload = serde_json::from_value(msg.payload.clone()).map_err(bad)?;
                let placed = self.session.push_gesture(g.kind);
                Ok(vec![self.emit(MessageType::Ack, AckPayload { ack: msg.seq, frame: Some(placed.onset_frame) })])
            }
            MessageType::Frame => {
                let f: FramePayload = serde_json::from_value(msg.payload.clone()).map_err(bad)?;
                let values: [f64; FRAME_WIDTH] = f
                    .values
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::Shape(format!("frame has {} values, expected {FRAME_WIDTH}", f.values.len())))?;
                self.session.push_frame(FrameFeatures(values));
                Ok(vec![self.emit(MessageType::Ack, AckPayload { ack: msg.seq, frame: None })])
            }
            MessageType::Control => {
                let c: Control = serde_json::from_value(msg.payload.clone()).map_err(bad)?;
                let mut out = Vec::new();
                match c {
                    Control::Start => self.running = true,
                    Control::Pause => self.running = false,
                    Control::Seed { seed } => self.next_seed = seed,
                    Control::Reset { seed } => {
                        let seed = seed.unwrap_or(self.next_seed);
                        self.next_seed = seed;
                        let cfg = SessionConfig { seed, ..self.base.clone() };
                        self.session = OnlineSession::new(cfg, self.predictor.clone())?;
                        out.push(self.emit(MessageType::Ack, AckPayload { ack: msg.seq, frame: None }));
                        out.push(self.belief_message());
                        return Ok(out);
                    }
                }
                out.push(self.emit(MessageType::Ack, AckPayload { ack: msg.seq, frame: None }));
                Ok(out)
            }
            _ => unreachable!("filtered by from_client"),
        }
    }

    fn belief_message(&mut self) -> WireMessage {
        let b = self.session.belief();
        let payload = BeliefPayload { tick: self.session.env().tick, posterior: b.probabilities(), map: b.map(), entropy: b.entropy() };
        self.emit(MessageType::Belief, payload)
    }

    /// Advances one tick when running: a state and a metrics message, plus
    /// a belief message when the belief changed. Paused or finished
    /// sessions emit nothing.
    pub fn tick(&mut self) -> Result<Vec<WireMessage>> {
        if !self.is_running() {
            return Ok(Vec::new());
        }
        let action = self.session.next_action();
        self.tick_with(action)
    }

    /// Like [`tick`](Self::tick) with a pinned action.
    pub fn tick_with(&mut self, action: Action) -> Result<Vec<WireMessage>> {
        let out = self.session.step_with(action)?;
        self.recording.entries.push(Entry::Tick { action });
        let env = self.session.env();
        let state = StatePayload {
            tick: out.tick,
            frame: self.session.frame_index(),
            agent: env.agent,
            objects: env.objects().to_vec(),
            score: env.score,
            action,
            reward: out.reward,
            event: out.event,
            running: self.running,
            finished: env.is_finished(),
            starved_frames: self.session.starved_frames(),
        };
        let mut msgs = vec![self.emit(MessageType::State, state)];
        if !out.updates.is_empty() {
            msgs.push(self.belief_message());
        }
        let row = self.session.metrics().last().expect("metrics row per tick").clone();
        msgs.push(self.emit(MessageType::Metrics, row));
        Ok(msgs)
    }

    /// Ends the episode: pending pickups are applied on synthesized tail
    /// frames. Emits the final belief and metrics.
    pub fn finish(&mut self) -> Result<Vec<WireMessage>> {
        self.session.flush()?;
        self.recording.entries.push(Entry::Flush);
        let row = self.session.metrics().last().expect("flush records metrics").clone();
        Ok(vec![self.belief_message(), self.emit(MessageType::Metrics, row)])
    }
}

/// Re-runs a recording. With `pin_actions` the recorded actions drive the
/// environment, so the episode log is reproduced even under another model.
pub fn replay(recording: &Recording, predictor: Arc<dyn Predictor + Send + Sync>, pin_actions: bool) -> Result<(LiveSession, Vec<WireMessage>)> {
    let mut live = LiveSession::new(recording.config.clone(), predictor)?;
    let mut out = Vec::new();
    for e in &recording.entries {
        match e {
            Entry::Connect => out.push(live.handshake()),
            Entry::Input { text } => out.extend(live.handle_text(text)),
            Entry::Tick { action } => {
                let a = if pin_actions { *action } else { live.session.next_action() };
                out.extend(live.tick_with(a)?);
            }
            Entry::Flush => out.extend(live.finish()?),
        }
    }
    Ok((live, out))
}

/// Runs a synthetic session to completion through the live interface.
pub fn record_headless(cfg: SessionConfig, predictor: Arc<dyn Predictor + Send + Sync>) -> Result<(LiveSession, Vec<WireMessage>)> {
    let mut live = LiveSession::new(cfg, predictor)?;
    let mut out = live.handle_text(r#"{"type":"control","seq":1,"payload":{"action":"start"}}"#);
    while !live.session.is_finished() {
        out.extend(live.tick()?);
    }
    out.extend(live.finish()?);
    Ok((live, out))
}
