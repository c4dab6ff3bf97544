//! Online learning loop, live service state machine, recordings and
//! headless experiments.

pub mod experiments;
pub mod live;
pub mod online;
pub mod record;
pub mod wire;

pub use live::{record_headless, replay, LiveSession};
pub use online::{run_online_episode, MetricsRow, OnlineOutcome, OnlineSession, ReactionSource, ReplanTrigger, SessionConfig, UpdateRecord};
pub use record::{Entry, Recording};
pub use wire::{MessageType, WireMessage, PROTOCOL_VERSION};
