use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchDescriptor;
use super::unet::UNet;
use crate::binio::{decode_f32, f32_bytes, read_file, write_atomic};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CHUTECKP";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub desc: ArchDescriptor,
    pub seed: u64,
    /// Set once a surrogate has finished training; frozen models are
    /// never updated again.
    pub frozen: bool,
    pub values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    descriptor: ArchDescriptor,
    seed: u64,
    frozen: bool,
    param_count: usize,
}

impl ModelParams {
    pub fn init(desc: &ArchDescriptor, seed: u64) -> Result<Self> {
        let net = UNet::new(desc)?;
        Ok(ModelParams {
            desc: desc.clone(),
            seed,
            frozen: false,
            values: net.init(seed),
        })
    }

    pub fn network(&self) -> Result<UNet> {
        let net = UNet::new(&self.desc)?;
        if net.param_count() != self.values.len() {
            return Err(Error::ArchMismatch(format!(
                "descriptor needs {} parameters, checkpoint has {}",
                net.param_count(),
                self.values.len()
            )));
        }
        Ok(net)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode_checkpoint(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_checkpoint(&read_file(path)?).map_err(|e| e.at_path(path))
    }
}

/// Layout: magic, u32 version, u32 header length, JSON header, then the
/// parameters as little-endian f32.
pub fn encode_checkpoint(m: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        descriptor: m.desc.clone(),
        seed: m.seed,
        frozen: m.frozen,
        param_count: m.values.len(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * m.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend(f32_bytes(m.values.iter().copied()));
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::parse(msg)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad("truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let values = decode_f32(&body[hlen..])?;
    if values.len() != header.param_count {
        return Err(bad(format!(
            "parameter block has {} values, header declares {}",
            values.len(),
            header.param_count
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    let m = ModelParams {
        desc: header.descriptor,
        seed: header.seed,
        frozen: header.frozen,
        values,
    };
    m.network().map_err(|e| bad(e.to_string()))?;
    Ok(m)
}
