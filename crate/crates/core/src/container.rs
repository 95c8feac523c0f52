//! Versioned binary container: magic, version, a JSON header, then a raw
//! little-endian `f64` payload. Floats round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(
    magic: &[u8; 8],
    version: u32,
    header: &H,
    payload: &[f64],
) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + header.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode<H: DeserializeOwned>(
    magic: &[u8; 8],
    version: u32,
    bytes: &[u8],
) -> Result<(H, Vec<f64>)> {
    let mut r = bytes;
    let mut m = [0u8; 8];
    r.read_exact(&mut m)
        .map_err(|_| Error::Format("truncated magic".into()))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = u32::from_le_bytes(take(&mut r)?);
    if v != version {
        return Err(Error::Format(format!(
            "unsupported version {v}, expected {version}"
        )));
    }
    let hlen = u64::from_le_bytes(take(&mut r)?) as usize;
    if r.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: H = serde_json::from_slice(&r[..hlen])?;
    r = &r[hlen..];
    let n = u64::from_le_bytes(take(&mut r)?) as usize;
    if r.len() != n * 8 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header promises {} floats",
            r.len(),
            n
        )));
    }
    let payload = r
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, payload))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("truncated container".into()))?;
    Ok(buf)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let tmp = path.with_file_name(name);
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}
