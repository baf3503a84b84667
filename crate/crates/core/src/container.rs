//! Shared single-file layout: 8-byte magic, `u32` format version, `u64`
//! header length, UTF-8 JSON header, then a little-endian `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};

const PREFIX: usize = 8 + 4 + 8;

pub(crate) fn encode(magic: &[u8; 8], version: u32, header: &[u8], payload: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX + header.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a file into its JSON header and raw payload.
pub(crate) fn decode<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 8], version: u32) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < PREFIX {
        return Err(Error::Truncated {
            path: path.into(),
            expected: PREFIX,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != magic {
        return Err(Error::Manifest {
            path: path.into(),
            reason: "unrecognised file signature".into(),
        });
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Version {
            path: path.into(),
            found,
            expected: version,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[PREFIX..];
    if rest.len() < header_len {
        return Err(Error::Truncated {
            path: path.into(),
            expected: PREFIX + header_len,
            found: bytes.len(),
        });
    }
    Ok(rest.split_at(header_len))
}

/// Decodes exactly `count` floats, distinguishing short and overlong payloads.
pub(crate) fn floats(path: &Path, payload: &[u8], count: usize) -> Result<Vec<f32>> {
    let expected = 4 * count;
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Manifest {
            path: path.into(),
            reason: format!("payload has {} bytes, manifest describes {expected}", payload.len()),
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
