//! Model checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          4 bytes  "MDCK"
//! version        u32
//! header_len     u64
//! header         header_len bytes of UTF-8 JSON:
//!                {format_version, arch, schedule, sigma_max, param_count, metadata}
//! param_count    u64
//! params         param_count × f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserModel, UNetArch};
use crate::binio::{put_f32s, put_u32, put_u64, ByteReader};
use crate::error::{Error, LoadError, Result};
use crate::schedule::ScheduleParams;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: UNetArch,
    schedule: ScheduleParams,
    sigma_max: f64,
    param_count: usize,
    metadata: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    /// Free-form provenance: branch kind, effective config, normalisation
    /// statistics and the like.
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            arch: self.model.arch().clone(),
            schedule: self.model.schedule_params(),
            sigma_max: self.model.schedule().sigma_max(),
            param_count: self.model.param_count(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(32 + json.len() + 4 * header.param_count);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(&json);
        put_u64(&mut out, header.param_count as u64);
        put_f32s(&mut out, self.model.params().iter().map(|&p| p as f32));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LoadError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| LoadError::Malformed(format!("checkpoint header: {e}")))?;
        let count = r.u64()? as usize;
        let expected = header.arch.param_count();
        if count != expected || header.param_count != expected {
            return Err(LoadError::ShapeMismatch {
                tensor: "params".into(),
                expected: vec![expected],
                found: vec![count],
            }
            .into());
        }
        let params = r.f32s(count)?;
        if !r.is_at_end() {
            return Err(LoadError::Malformed(format!(
                "{} trailing bytes after parameters",
                bytes.len() - r.position()
            ))
            .into());
        }
        let schedule = header.schedule.build()?;
        let model = DenoiserModel::from_params(
            header.arch,
            schedule,
            params.into_iter().map(f64::from).collect(),
        )?;
        Ok(Self {
            model,
            metadata: header.metadata,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
