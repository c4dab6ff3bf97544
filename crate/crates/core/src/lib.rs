//! Learning task rewards from implicit facial-reaction feedback.

pub mod dataset;
pub mod error;
pub mod features;
pub mod frame;
pub mod gridworld;
pub mod inference;
pub mod model;
pub mod observer;
pub mod planning;
pub mod robotic;
pub mod session;
pub mod stats;

pub use error::{Error, Result};
