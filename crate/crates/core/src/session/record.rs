//! Session recordings: a JSON-lines file of the configuration and every
//! input and tick, closed by a SHA-256 line over everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::online::SessionConfig;
use crate::error::{Error, Result};
use crate::gridworld::Action;

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entry {
    /// A client connected and received the handshake.
    Connect,
    /// Client text applied between ticks.
    Input { text: String },
    Tick { action: Action },
    Flush,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub config: SessionConfig,
    pub entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: SessionConfig,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Recording {
    pub fn new(config: SessionConfig) -> Self {
        Self { config, entries: Vec::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        serde_json::to_writer(&mut body, &Header { format_version: RECORD_VERSION, config: self.config.clone() })?;
        body.push(b'\n');
        for e in &self.entries {
            serde_json::to_writer(&mut body, e)?;
            body.push(b'\n');
        }
        let trailer = Trailer { sha256: hex(&Sha256::digest(&body)) };
        serde_json::to_writer(&mut body, &trailer)?;
        body.push(b'\n');
        Ok(body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Integrity("recording is not UTF-8".into()))?;
        let body_end = text.trim_end_matches('\n').rfind('\n').map(|i| i + 1).ok_or_else(|| Error::Integrity("recording truncated".into()))?;
        let (body, last) = text.split_at(body_end);
        let trailer: Trailer = serde_json::from_str(last.trim_end()).map_err(|_| Error::Integrity("recording trailer missing (truncated file)".into()))?;
        if trailer.sha256 != hex(&Sha256::digest(body.as_bytes())) {
            return Err(Error::Integrity("recording checksum mismatch".into()));
        }
        let mut lines = body.lines();
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| Error::Integrity("recording has no header".into()))?)?;
        if header.format_version != RECORD_VERSION {
            return Err(Error::Version { expected: RECORD_VERSION, found: header.format_version });
        }
        let entries = lines.map(serde_json::from_str).collect::<std::result::Result<Vec<Entry>, _>>()?;
        Ok(Self { config: header.config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Recording {
        let mut r = Recording::new(SessionConfig::default());
        r.entries.push(Entry::Connect);
        r.entries.push(Entry::Input { text: r#"{"type":"control","seq":1,"payload":{"action":"start"}}"#.into() });
        r.entries.push(Entry::Tick { action: Action::TurnLeft });
        r.entries.push(Entry::Flush);
        r
    }

    #[test]
    fn round_trip() {
        let r = sample();
        assert_eq!(Recording::from_bytes(&r.to_bytes().unwrap()).unwrap(), r);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 3] {
            assert!(matches!(Recording::from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        let i = bytes.iter().position(|b| *b == b'T').unwrap();
        bad[i] = b'X';
        assert!(matches!(Recording::from_bytes(&bad), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8(bytes).unwrap().replacen("\"format_version\":1", "\"format_version\":7", 1);
        let body_end = text.trim_end().rfind('\n').unwrap() + 1;
        let body = &text[..body_end];
        let fixed = format!("{body}{{\"sha256\":\"{}\"}}\n", hex(&Sha256::digest(body.as_bytes())));
        assert!(matches!(Recording::from_bytes(fixed.as_bytes()), Err(Error::Version { expected: 1, found: 7 })));
    }
}
