//! Binary checkpoints.
//!
//! Layout: magic, format version (u32 LE), header length (u64 LE), JSON
//! header, parameter count (u64 LE), parameters and batch-norm statistics as
//! f64 LE, then the SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{Architecture, BnStats, Net};
use super::{Model, Standardizer, TrainConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EMPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
/// Version of the feature layout the model consumes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    architecture: Architecture,
    config: TrainConfig,
    standardizer: Standardizer,
    class_freq: [f64; 3],
    n_params: usize,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        architecture: model.net.arch.clone(),
        config: model.config.clone(),
        standardizer: model.standardizer.clone(),
        class_freq: model.class_freq,
        n_params: model.theta.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let values: Vec<f64> = model
        .theta
        .iter()
        .chain(model.bn.mean.iter().flatten())
        .chain(model.bn.var.iter().flatten())
        .copied()
        .collect();
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut c = Cursor { buf: body, pos: MAGIC.len() };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { expected: FORMAT_VERSION, found: version });
    }
    let hlen = c.u64()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Version { expected: SCHEMA_VERSION, found: header.schema_version });
    }
    let net = Net::new(header.architecture)?;
    let bn_len: usize = 2 * net.arch.blocks.iter().sum::<usize>();
    let count = c.u64()? as usize;
    if header.n_params != net.n_params() || count != net.n_params() + bn_len {
        return Err(Error::Shape(format!("checkpoint holds {count} values, architecture needs {}", net.n_params() + bn_len)));
    }
    let raw = c.take(count * 8)?;
    if c.pos != body.len() {
        return Err(Error::Integrity("trailing bytes after payload".into()));
    }
    let values: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let (theta, rest) = values.split_at(net.n_params());
    let mut bn = BnStats::new(&net.arch);
    let mut it = rest.iter().copied();
    for m in bn.mean.iter_mut().chain(bn.var.iter_mut()) {
        for v in m.iter_mut() {
            *v = it.next().expect("length checked");
        }
    }
    Ok(Model { net, theta: theta.to_vec(), bn, standardizer: header.standardizer, config: header.config, class_freq: header.class_freq })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
