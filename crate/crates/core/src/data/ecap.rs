//! ECAP binary dataset files.
//!
//! Little-endian layout:
//!
//! | field    | type | bytes |
//! |----------|------|-------|
//! | magic    | `"ECAP"` | 4 |
//! | version  | u32 (= 1) | 4 |
//! | count    | u32 | 4 |
//! | channels | u16 | 2 |
//! | height   | u16 | 2 |
//! | width    | u16 | 2 |
//!
//! followed by `count` records of `C·H·W` f32 pixels (row-major), a u8 label
//! and an f32 regression target.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ECAP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 18;

/// Size in bytes of a file holding `n` samples of shape `(c, h, w)`.
pub fn file_len(n: usize, c: usize, h: usize, w: usize) -> usize {
    HEADER_LEN + n * (4 * c * h * w + 1 + 4)
}

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let dim = |x: usize, what: &str| {
        u16::try_from(x).map_err(|_| Error::config(format!("{what} {x} does not fit in u16")))
    };
    let count = u32::try_from(ds.len()).map_err(|_| Error::config("too many samples for ECAP"))?;
    let mut out = Vec::with_capacity(file_len(ds.len(), ds.channels, ds.height, ds.width));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim(ds.channels, "channels")?.to_le_bytes());
    out.extend_from_slice(&dim(ds.height, "height")?.to_le_bytes());
    out.extend_from_slice(&dim(ds.width, "width")?.to_le_bytes());
    for i in 0..ds.len() {
        for p in ds.image(i) {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out.push(ds.labels[i]);
        out.extend_from_slice(&ds.y_reg[i].to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"ECAP\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("count")? as usize;
    let c = r.u16("channels")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Format {
            offset: 12,
            message: format!("zero image extent {c}x{h}x{w}"),
        });
    }
    let mut ds = Dataset::empty(c, h, w);
    let n = c * h * w;
    ds.pixels.reserve(count * n);
    for _ in 0..count {
        for _ in 0..n {
            let v = r.f32("pixel")?;
            ds.pixels.push(v);
        }
        let label = r.take(1, "label")?[0];
        ds.labels.push(label);
        ds.y_reg.push(r.f32("regression target")?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ds)
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(ds)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let mut ds = Dataset::empty(1, 2, 3);
        for i in 0..3u8 {
            let img: Vec<f32> = (0..6).map(|k| (k as f32 + i as f32) / 10.0).collect();
            ds.push(&img, i % 2, 0.25 * i as f32);
        }
        ds
    }

    #[test]
    fn round_trip_and_resave_are_identical() {
        let ds = tiny();
        let bytes = to_bytes(&ds).unwrap();
        assert_eq!(bytes.len(), file_len(3, 1, 2, 3));
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = to_bytes(&tiny()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 4),
            other => panic!("expected format error, got {other:?}"),
        }
        match from_bytes(&bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[4] = 2;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
