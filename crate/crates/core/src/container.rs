//! Shared layout of the binary files written by this crate:
//! an ASCII magic line, one UTF-8 JSON header line, then raw little-endian f64s.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(magic: &str, header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_string(header)?;
    let mut out = Vec::with_capacity(magic.len() + json.len() + 2 + payload.len() * 8);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn write<H: Serialize>(
    path: &Path,
    magic: &str,
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Splits a container into its parsed header and the raw payload bytes.
pub(crate) fn decode<'a, H: DeserializeOwned>(magic: &str, bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    let rest = bytes
        .strip_prefix(magic.as_bytes())
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| Error::MalformedHeader(format!("missing magic `{magic}`")))?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("unterminated JSON header line".into()))?;
    let header_text = std::str::from_utf8(&rest[..newline])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: H = serde_json::from_str(header_text)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok((header, &rest[newline + 1..]))
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads exactly `count` f64 values, rejecting short or oversized payloads and non-finite values.
pub(crate) fn floats(payload: &[u8], count: usize) -> Result<Vec<f64>> {
    let expected = count * 8;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: payload.len(),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("file payload"));
    }
    Ok(values)
}
