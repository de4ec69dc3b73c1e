//! BGCK checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BGCK"              4 bytes magic
//! version: u32        always 1
//! config_len: u32
//! config: config_len bytes of UTF-8 JSON (ModelConfig)
//! one BGFT record per weight, in ModelWeights serialisation order
//! ```
//!
//! Weights are stored as `f32`; a checkpoint of already quantised weights
//! round-trips bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::bgft;
use crate::model::config::ModelConfig;
use crate::model::params::{layout, ModelParams};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"BGCK";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    params.validate()?;
    let config = serde_json::to_vec(&params.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let mut err = None;
    params.weights.for_each(|name, t| {
        if err.is_none() {
            if let Err(e) = bgft::encode(t, &mut out) {
                err = Some(Error::arg(format!("weight {name}: {e}")));
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], pos: usize, what: &str) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(pos, format!("truncated {what}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(format_err(0, "bad magic, expected BGCK"));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(bytes, 8, "config length")? as usize;
    let cfg_bytes = bytes
        .get(12..12 + len)
        .ok_or_else(|| format_err(12, "truncated config"))?;
    let config: ModelConfig =
        serde_json::from_slice(cfg_bytes).map_err(|e| format_err(12, format!("config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| format_err(12, format!("config: {e}")))?;
    let shapes = layout(&config);
    let mut pos = 12 + len;
    let mut err: Option<Error> = None;
    let weights = shapes.map(|shape| {
        if err.is_some() {
            return Tensor::zeros(shape);
        }
        match bgft::decode(&bytes[pos..], pos as u64) {
            Ok((t, used)) if t.shape() == shape.as_slice() => {
                pos += used;
                t
            }
            Ok((t, _)) => {
                err = Some(format_err(
                    pos,
                    format!("weight has shape {:?}, config implies {:?}", t.shape(), shape),
                ));
                Tensor::zeros(shape)
            }
            Err(e) => {
                err = Some(e);
                Tensor::zeros(shape)
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if pos != bytes.len() {
        return Err(format_err(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let p = ModelParams { config, weights };
    p.validate()?;
    Ok(p)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::StreamDims;

    fn params() -> ModelParams {
        let cfg = ModelConfig::new(4, 2, 3, 3, StreamDims { image: 2, edge: 2, nuclei: 1 });
        let mut p = ModelParams::init(cfg, 3).unwrap();
        p.quantize_f32();
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = encode_checkpoint(&p).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), p);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = encode_checkpoint(&params()).unwrap();
        let n = bytes.len();
        assert!(matches!(decode_checkpoint(&bytes[..n - 1]), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = encode_checkpoint(&params()).unwrap();
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).unwrap_err().to_string().contains("trailing"));
    }
}
