//! Binary checkpoint format.
//!
//! ```text
//! "BMRGCKPT"          8 bytes magic
//! version             u32 LE
//! header_len          u64 LE
//! header              JSON, header_len bytes
//! zero padding        up to the next multiple of 64
//! payload             little-endian f32 tensors, each starting on a 64-byte boundary
//! ```
//!
//! Tensor offsets in the header are relative to the payload start.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BMRGCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl TensorEntry {
    fn n_bytes(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (model kind, seeds, patch set, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn fmt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save_checkpoint(params: &ParameterSet<f32>, path: &Path) -> Result<()> {
    save_checkpoint_with(params, &BTreeMap::new(), path)
}

/// Write `params` atomically: a sibling temp file is written, synced, then renamed over `path`.
pub fn save_checkpoint_with(
    params: &ParameterSet<f32>,
    meta: &BTreeMap<String, serde_json::Value>,
    path: &Path,
) -> Result<()> {
    params.validate()?;
    let named = params.named_tensors();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            offset: offset as u64,
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
        });
        offset = align_up(offset + t.len() * 4);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config.clone(),
        tensors,
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;

    let tmp = temp_path(path);
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let head = PREAMBLE + json.len();
        w.write_all(&vec![0u8; align_up(head) - head])?;
        let mut written = 0usize;
        for (entry, (_, t)) in header.tensors.iter().zip(&named) {
            let pad = entry.offset as usize - written;
            w.write_all(&vec![0u8; pad])?;
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
            written = entry.offset as usize + t.len() * 4;
        }
        w.write_all(&vec![0u8; align_up(written) - written])?;
        let f = w.into_inner().map_err(|e| e.into_error())?;
        f.sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(e);
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Parse and validate the header without touching the payload.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = std::fs::read(path)?;
    parse_header(path, &bytes).map(|(h, _)| h)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(fmt_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let end = (PREAMBLE as u64)
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| fmt_err(path, format!("header length {header_len} exceeds file size {}", bytes.len())))?
        as usize;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| fmt_err(path, format!("header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok((header, align_up(end)))
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterSet<f32>> {
    load_checkpoint_with_header(path).map(|(p, _)| p)
}

pub fn load_checkpoint_with_header(path: &Path) -> Result<(ParameterSet<f32>, Header)> {
    let bytes = std::fs::read(path)?;
    let (header, payload_start) = parse_header(path, &bytes)?;
    let payload = bytes.get(payload_start..).unwrap_or(&[]);
    let bounds = |name: &str, detail: String| Error::Bounds {
        path: path.to_path_buf(),
        tensor: name.to_string(),
        detail,
    };

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(fmt_err(path, format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let end = e.offset.checked_add(e.n_bytes()).ok_or_else(|| bounds(&e.name, "offset overflow".into()))?;
        if end > payload.len() as u64 {
            return Err(bounds(
                &e.name,
                format!("bytes {}..{end} past payload end {}", e.offset, payload.len()),
            ));
        }
        spans.push((e.offset, end, &e.name));
        let data: Vec<f32> = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bounds(&e.name, err.to_string()))?;
        tensors.push((e.name.clone(), t));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 && w[1].1 > w[1].0 {
            return Err(bounds(w[1].2, format!("overlaps tensor {}", w[0].2)));
        }
    }
    let params = ParameterSet::from_named(header.config.clone(), tensors)?;
    params.validate()?;
    Ok((params, header))
}
