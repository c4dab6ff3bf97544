//! JSON envelope exchanged with dashboard clients.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    State,
    Belief,
    Metrics,
    Gesture,
    Control,
    Ack,
    Error,
    /// One externally extracted 42-value frame.
    Frame,
}

impl MessageType {
    pub const ALL: [MessageType; 8] = [
        MessageType::State,
        MessageType::Belief,
        MessageType::Metrics,
        MessageType::Gesture,
        MessageType::Control,
        MessageType::Ack,
        MessageType::Error,
        MessageType::Frame,
    ];

    /// Types a client may send.
    pub fn from_client(self) -> bool {
        matches!(self, MessageType::Gesture | MessageType::Control | MessageType::Frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

impl WireMessage {
    pub fn new(kind: MessageType, seq: u64, payload: impl Serialize) -> Self {
        let payload = serde_json::to_value(payload).expect("payload serializes");
        Self { kind, seq, payload }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    /// Parses an envelope; unknown or missing types are protocol errors.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Protocol(format!("malformed JSON: {e}")))?;
        let obj = v.as_object().ok_or_else(|| Error::Protocol("message must be a JSON object".into()))?;
        let kind = obj.get("type").and_then(Value::as_str).ok_or_else(|| Error::Protocol("missing string field `type`".into()))?;
        if serde_json::from_value::<MessageType>(Value::String(kind.into())).is_err() {
            return Err(Error::Protocol(format!("unknown message type `{kind}`")));
        }
        serde_json::from_value(v).map_err(|e| Error::Protocol(format!("bad envelope: {e}")))
    }
}

/// Client control actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Control {
    Start,
    Pause,
    /// Restart the episode, optionally under a new seed.
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Seed used by the next reset.
    Seed { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GesturePayload {
    pub kind: crate::observer::GestureKind,
    #[serde(default)]
    pub client_ts: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol_version: u32,
    pub seed: u64,
    pub hypotheses: Vec<crate::gridworld::RewardSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AckPayload {
    pub ack: u64,
    /// Frame a gesture was placed at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ack: Option<u64>,
}
