//! `pgm-ckpt/1`: one JSON header line, then little-endian `f64` payloads in
//! header order, each tensor row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "pgm-ckpt/1";

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    names: Vec<String>,
    shapes: Vec<[usize; 2]>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn encode_checkpoint(params: &ParamStore, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION.into(),
        names: params.names().to_vec(),
        shapes: (0..params.len())
            .map(|i| [params.value(i).nrows(), params.value(i).ncols()])
            .collect(),
        meta: meta.clone(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for i in 0..params.len() {
        let v = params.value(i);
        for r in 0..v.nrows() {
            for c in 0..v.ncols() {
                bytes.extend_from_slice(&v[(r, c)].to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let split = bytes.iter().position(|b| *b == b'\n').ok_or(Error::Parse {
        line: 1,
        msg: "checkpoint header is not terminated".into(),
    })?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION.into(),
        });
    }
    if header.names.len() != header.shapes.len() {
        return Err(Error::Parse {
            line: 1,
            msg: "names and shapes disagree in length".into(),
        });
    }
    let payload = &bytes[split + 1..];
    let expected: usize = header.shapes.iter().map(|[r, c]| r * c * 8).sum();
    if payload.len() != expected {
        return Err(Error::Parse {
            line: 2,
            msg: format!(
                "payload holds {} bytes, header describes {expected}",
                payload.len()
            ),
        });
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for (name, [r, c]) in header.names.iter().zip(&header.shapes) {
        let mut m = DMatrix::zeros(*r, *c);
        for i in 0..*r {
            for j in 0..*c {
                let chunk: [u8; 8] = payload[off..off + 8].try_into().expect("length checked");
                m[(i, j)] = f64::from_le_bytes(chunk);
                off += 8;
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor '{name}'")));
        }
        store.insert(name, m);
    }
    Ok((store, header.meta))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
