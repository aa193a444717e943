//! Parameter snapshot files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset 0   "PADA"            magic
//! offset 4   u32               format version
//! offset 8   u64               NetSpec hash
//! offset 16  f64 × n           parameters
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_nn::ParamVector;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PADA";
pub const SNAPSHOT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_snapshot(spec_hash: u64, params: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec_hash.to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns the spec hash and parameters stored in `bytes`.
pub fn decode_snapshot(bytes: &[u8]) -> Result<(u64, ParamVector)> {
    let fmt = |offset, message: String| Error::Format {
        what: "adapter snapshot",
        offset,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != SNAPSHOT_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SNAPSHOT_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(8) {
        return Err(fmt(
            HEADER_LEN + body.len() / 8 * 8,
            "parameter stream is not a whole number of f64 values".into(),
        ));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((hash, ParamVector::from_vec(params)))
}

pub fn write_snapshot(path: &Path, spec_hash: u64, params: &ParamVector) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_snapshot(spec_hash, params))
        .map_err(|e| Error::io(path, e))
}

/// Reads a snapshot and checks it against the expected spec hash and length.
pub fn read_snapshot(path: &Path, expected_hash: u64, expected_len: usize) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let (hash, params) = decode_snapshot(&bytes)?;
    if hash != expected_hash {
        return Err(Error::Format {
            what: "adapter snapshot",
            offset: 8,
            message: format!("spec hash {hash:#018x} does not match {expected_hash:#018x}"),
        });
    }
    if params.len() != expected_len {
        return Err(Error::shape("snapshot parameter count", expected_len, params.len()));
    }
    Ok(params)
}
