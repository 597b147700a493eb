//! Agent checkpoints: a little-endian binary parameter file plus a TOML sidecar.
//!
//! Binary layout: magic `QMCK`, `u32` format version, `u32` kind index,
//! `u32` shape length, one `u64` per shape entry, `u64` parameter count and
//! then the parameters as `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{build_agent, Agent, AgentError, AgentKind};

const MAGIC: &[u8; 4] = b"QMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} is not a checkpoint: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("sidecar {path}: {reason}")]
    Sidecar { path: String, reason: String },
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Contents of the sidecar written next to each parameter file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub kind: AgentKind,
    pub shape: Vec<usize>,
    pub step: usize,
    pub param_count: usize,
}

/// Path of the sidecar belonging to a parameter file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn encode(agent: &dyn Agent) -> Vec<u8> {
    let kind = AgentKind::ALL.iter().position(|k| *k == agent.kind()).expect("every kind is listed") as u32;
    let shape = agent.shape();
    let params = agent.params();
    let mut buf = Vec::with_capacity(24 + 8 * (shape.len() + params.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for s in &shape {
        buf.extend_from_slice(&(*s as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let chunk = self.bytes.get(self.at..self.at + N)?;
        self.at += N;
        chunk.try_into().ok()
    }
    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }
}

fn decode(bytes: &[u8], path: &Path) -> Result<Box<dyn Agent>, CheckpointError> {
    let corrupt = |reason: &str| CheckpointError::Corrupt { path: path.display().to_string(), reason: reason.into() };
    let mut c = Cursor { bytes, at: 0 };
    if c.take::<4>().as_ref() != Some(MAGIC) {
        return Err(corrupt("bad magic"));
    }
    match c.u32() {
        Some(FORMAT_VERSION) => {}
        Some(v) => return Err(corrupt(&format!("unsupported format version {v}"))),
        None => return Err(corrupt("truncated header")),
    }
    let kind = c.u32().and_then(|k| AgentKind::ALL.get(k as usize).copied()).ok_or_else(|| corrupt("bad agent kind"))?;
    let n_shape = c.u32().ok_or_else(|| corrupt("truncated header"))? as usize;
    if n_shape > 64 {
        return Err(corrupt("implausible shape length"));
    }
    let shape: Vec<usize> =
        (0..n_shape).map(|_| c.u64().map(|s| s as usize)).collect::<Option<_>>().ok_or_else(|| corrupt("truncated shape"))?;
    let count = c.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
    let mut agent = build_agent(kind, &shape)?;
    if agent.params().len() != count {
        return Err(corrupt(&format!("{kind} of shape {shape:?} has {} parameters, file has {count}", agent.params().len())));
    }
    if bytes.len() != c.at + 8 * count {
        return Err(corrupt("parameter block has the wrong length"));
    }
    for p in agent.params_mut() {
        *p = f64::from_le_bytes(c.take().expect("length checked above"));
    }
    Ok(agent)
}

/// Writes the parameter file and its sidecar.
pub fn write_checkpoint(path: &Path, agent: &dyn Agent, config_hash: &str, step: usize) -> Result<CheckpointMeta, CheckpointError> {
    let meta = CheckpointMeta {
        config_hash: config_hash.to_string(),
        kind: agent.kind(),
        shape: agent.shape(),
        step,
        param_count: agent.params().len(),
    };
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode(agent)).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let text = toml::to_string(&meta).expect("sidecar fields are plain values");
    fs::write(&side, text).map_err(io_err(&side))?;
    Ok(meta)
}

/// Reads a checkpoint, checking the sidecar against the parameter file.
pub fn read_checkpoint(path: &Path) -> Result<(Box<dyn Agent>, CheckpointMeta), CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let agent = decode(&bytes, path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar = |reason: String| CheckpointError::Sidecar { path: side.display().to_string(), reason };
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| sidecar(e.to_string()))?;
    if meta.kind != agent.kind() || meta.shape != agent.shape() || meta.param_count != agent.params().len() {
        return Err(sidecar("kind, shape or parameter count disagrees with the parameter file".into()));
    }
    Ok((agent, meta))
}
