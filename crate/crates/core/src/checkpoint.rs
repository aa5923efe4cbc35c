//! Binary weight container: 4-byte magic, u32 version, u32-length-prefixed
//! JSON header, then every tensor in visit order as little-endian f32.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Parameters;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(magic: &[u8; 4], version: u32, header: &[u8], params: &dyn Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    params.visit(&mut |_, t| {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    });
    out
}

/// Writes the container (creating parent directories) and returns its SHA-256.
pub fn write(path: &Path, magic: &[u8; 4], version: u32, header: &[u8], params: &dyn Parameters) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = encode(magic, version, header, params);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone)]
pub struct CheckpointFile {
    pub version: u32,
    pub header: Vec<u8>,
    pub values: Vec<f32>,
    pub hash: String,
}

pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<CheckpointFile> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(bad(&format!(
            "missing magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12 + hlen..).ok_or_else(|| bad("truncated header"))?;
    if body.len() % 4 != 0 {
        return Err(bad("tensor section is not a whole number of f32 values"));
    }
    Ok(CheckpointFile {
        version,
        header: bytes[12..12 + hlen].to_vec(),
        values: body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        hash: sha256_hex(bytes),
    })
}

pub fn read(path: &Path, magic: &[u8; 4]) -> Result<CheckpointFile> {
    decode(&fs::read(path)?, magic)
}

impl CheckpointFile {
    /// Copies the stored values into `params` (whose shapes come from the header).
    pub fn fill(&self, params: &mut dyn Parameters) -> Result<()> {
        let mut expected = 0;
        params.visit(&mut |_, t| expected += t.len());
        if expected != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, model expects {expected}",
                self.values.len()
            )));
        }
        let mut at = 0;
        params.visit_mut(&mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&self.values[at..at + n]);
            at += n;
        });
        Ok(())
    }
}
