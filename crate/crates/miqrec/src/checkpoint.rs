//! Model checkpoints.
//!
//! Layout (little-endian): magic `MIQR`, version `u16`, config block length
//! `u32` followed by `key=value` lines, parameter count `u32`, then per
//! parameter: name length `u32`, UTF-8 name, rows `u32`, cols `u32`,
//! `rows·cols` `f64` values in row-major order.

use std::path::Path;

use miqrec_core::{Matrix, ModelConfig, ParamStore, SeqRecModel};

use crate::error::{CliError, Result};
use crate::fsio::{self, Reader};

pub const MAGIC: &[u8; 4] = b"MIQR";
pub const VERSION: u16 = 1;

/// `key=value` lines describing the architecture.
pub fn config_block(c: &ModelConfig) -> String {
    format!(
        "n_items={}\nd={}\nmax_len={}\nblocks={}\nattention={}\nm={}\ndropout={}\naggregator={}\ndummy_kv={}\nheads={}\nseed={}\n",
        c.n_items, c.d, c.max_len, c.blocks, c.attention, c.m, c.dropout, c.aggregator, c.dummy_kv, c.heads, c.seed
    )
}

fn value<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
}

pub fn parse_config_block(text: &str) -> std::result::Result<ModelConfig, String> {
    let mut c = ModelConfig::default();
    let mut seen = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed config line `{line}`"))?;
        match k {
            "n_items" => c.n_items = value(k, v)?,
            "d" => c.d = value(k, v)?,
            "max_len" => c.max_len = value(k, v)?,
            "blocks" => c.blocks = value(k, v)?,
            "attention" => c.attention = v.parse().map_err(|e: miqrec_core::Error| e.to_string())?,
            "m" => c.m = value(k, v)?,
            "dropout" => c.dropout = value(k, v)?,
            "aggregator" => c.aggregator = v.parse().map_err(|e: miqrec_core::Error| e.to_string())?,
            "dummy_kv" => c.dummy_kv = value(k, v)?,
            "heads" => c.heads = value(k, v)?,
            "seed" => c.seed = value(k, v)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        seen.push(k);
    }
    if !seen.contains(&"n_items") {
        return Err("config block lacks n_items".into());
    }
    Ok(c)
}

pub fn encode(model: &SeqRecModel) -> Vec<u8> {
    let block = config_block(model.config());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (_, p) in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<SeqRecModel> {
    let mut r = Reader::new(bytes, path);
    if r.take(4)? != MAGIC {
        return Err(r.error("not a checkpoint (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let block = std::str::from_utf8(r.take(len)?).map_err(|_| r.error("config block is not UTF-8"))?;
    let config = parse_config_block(block).map_err(|m| r.error(m))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.error("parameter name is not UTF-8"))?.to_owned();
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let n =
            rows.checked_mul(cols).filter(|n| n * 8 <= bytes.len()).ok_or_else(|| r.error("bad parameter shape"))?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?;
        store.add(name, Matrix::new(rows, cols, data)?);
    }
    r.finish()?;
    SeqRecModel::from_store(config, store).map_err(|source| CliError::InFile { path: path.to_path_buf(), source })
}

pub fn save(path: &Path, model: &SeqRecModel) -> Result<()> {
    fsio::write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<SeqRecModel> {
    decode(&fsio::read(path)?, path)
}
