//! Binary dataset cache.
//!
//! Layout (little-endian): magic `MIQD`, version `u16`, name length `u32`,
//! UTF-8 dataset name, record count `u64`, then per record raw user `u64`,
//! raw item `u64`, timestamp `i64`, in log order. Reindexing on load is
//! deterministic, so loading reproduces the saved log exactly.

use std::path::Path;

use miqrec_core::data::{InteractionLog, RawInteraction};

use crate::error::Result;
use crate::fsio::{self, Reader};

pub const MAGIC: &[u8; 4] = b"MIQD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub log: InteractionLog,
}

pub fn encode(ds: &Dataset) -> Vec<u8> {
    let raw = ds.log.to_raw();
    let mut out = Vec::with_capacity(18 + ds.name.len() + raw.len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.name.len() as u32).to_le_bytes());
    out.extend_from_slice(ds.name.as_bytes());
    out.extend_from_slice(&(raw.len() as u64).to_le_bytes());
    for r in &raw {
        out.extend_from_slice(&r.user.to_le_bytes());
        out.extend_from_slice(&r.item.to_le_bytes());
        out.extend_from_slice(&r.timestamp.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != MAGIC {
        return Err(r.error("not a dataset cache (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported dataset cache version {version}")));
    }
    let len = r.u32()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.error("dataset name is not UTF-8"))?;
    let n = r.u64()? as usize;
    if n > bytes.len() / 24 {
        return Err(r.error(format!("record count {n} exceeds file size")));
    }
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        raw.push(RawInteraction { user: r.u64()?, item: r.u64()?, timestamp: r.i64()? });
    }
    r.finish()?;
    let log = InteractionLog::from_raw(&raw)
        .map_err(|source| crate::error::CliError::InFile { path: path.to_path_buf(), source })?;
    Ok(Dataset { name, log })
}

pub fn save(path: &Path, ds: &Dataset) -> Result<()> {
    fsio::write_atomic(path, &encode(ds))
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&fsio::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let raw = [(5u64, 9u64, 3i64), (2, 9, -1), (5, 4, 7)].map(|(user, item, timestamp)| RawInteraction {
            user,
            item,
            timestamp,
        });
        let ds = Dataset { name: "toy".into(), log: InteractionLog::from_raw(&raw).unwrap() };
        let bytes = encode(&ds);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), ds);
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("x")).is_err());
    }
}
