//! BGFT binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BGFT"            4 bytes magic
//! version: u32      always 1
//! ndim: u32
//! extents: ndim × u32
//! payload: product(extents) × f32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"BGFT";
pub const VERSION: u32 = 1;

/// Appends the BGFT encoding of `t` to `out`. Values are narrowed to `f32`.
pub fn encode(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::arg(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for (i, &v) in t.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::arg(format!("value {v} at index {i} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.offset(),
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Decodes one BGFT record from the front of `bytes`. `base` is the absolute
/// offset of `bytes[0]` in its file, used in error messages. Returns the
/// tensor and the number of bytes consumed.
pub fn decode(bytes: &[u8], base: u64) -> Result<(Tensor, usize)> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        base,
    };
    let start = c.offset();
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: start,
            msg: "bad magic, expected \"BGFT\"".into(),
        });
    }
    let at = c.offset();
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported version {version}"),
        });
    }
    let at = c.offset();
    let ndim = c.u32("ndim")? as usize;
    if ndim == 0 {
        return Err(Error::Format {
            offset: at,
            msg: "ndim must be at least 1".into(),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = c.offset();
        let d = c.u32("extent")? as usize;
        if d == 0 {
            return Err(Error::Format {
                offset: at,
                msg: "zero extent".into(),
            });
        }
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: c.offset(),
            msg: "payload size overflows".into(),
        })?;
    let payload = c.take(n, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    let t = Tensor::new(shape, data)?;
    Ok((t, c.pos))
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * t.len());
    encode(t, &mut buf)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            offset: used as u64,
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"BGFT");
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2.5f32.to_le_bytes());
        b
    }

    #[test]
    fn minimal_file() {
        let (t, used) = decode(&minimal(), 0).unwrap();
        assert_eq!(used, 20);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.data(), &[2.5]);
        let mut enc = Vec::new();
        encode(&t, &mut enc).unwrap();
        assert_eq!(enc, minimal());
    }

    #[test]
    fn truncated_payload() {
        let b = minimal();
        match decode(&b[..18], 0) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut b = minimal();
        b[0] = b'X';
        assert!(matches!(decode(&b, 100), Err(Error::Format { offset: 100, .. })));
        let mut b = minimal();
        b[4] = 2;
        assert!(matches!(decode(&b, 0), Err(Error::Format { offset: 4, .. })));
    }
}
