//! Binary tensor-record container used for parameter checkpoints,
//! trainer state, and generated domain files.
//!
//! Layout: header (magic `MVIB`, version u32, tensor count u32), then per
//! tensor: name length u16, name bytes, rank u8, extents u32 each, and the
//! payload as little-endian f64 values. All multi-byte integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MVIB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> TensorRecord {
        let record = TensorRecord {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(
            record.shape.iter().product::<usize>(),
            record.data.len(),
            "record {}: shape/data mismatch",
            record.name
        );
        record
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> TensorRecord {
        TensorRecord::new(name, vec![1], vec![v])
    }

    /// u64 words stored bit-exactly in f64 payload slots.
    pub fn from_words(name: impl Into<String>, words: &[u64]) -> TensorRecord {
        TensorRecord::new(
            name,
            vec![words.len()],
            words.iter().map(|&w| f64::from_bits(w)).collect(),
        )
    }

    pub fn to_words(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

pub fn write_records(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Parameter(format!("tensor name too long: {}", r.name)));
        }
        if r.shape.len() > u8::MAX as usize {
            return Err(Error::Parameter(format!("tensor rank too large: {}", r.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[r.shape.len() as u8])?;
        for &e in &r.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            message: format!("truncated file while reading {what}"),
            offset: at,
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }
}

pub fn read_records(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            message: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
            offset: 0,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            message: format!("unsupported version {version}, expected {VERSION}"),
            offset: 4,
        });
    }
    let count = r.u32("tensor count")?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.exact(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|e| Error::Format {
            message: format!("tensor name is not utf-8: {e}"),
            offset: r.offset,
        })?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.exact(&mut b, "payload")?;
            *v = f64::from_le_bytes(b);
        }
        records.push(TensorRecord { name, shape, data });
    }
    Ok(records)
}

/// Lookup helper over a loaded record set.
pub fn find<'a>(records: &'a [TensorRecord], name: &str) -> Result<&'a TensorRecord> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Format {
            message: format!("missing tensor record '{name}'"),
            offset: 0,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let records = vec![
            TensorRecord::new("a.w", vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]),
            TensorRecord::scalar("step", 42.0),
            TensorRecord::from_words("rng", &[u64::MAX, 0, 12345]),
        ];
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (b, r) in back.iter().zip(&records) {
            assert_eq!(b.name, r.name);
            assert_eq!(b.shape, r.shape);
            // Bitwise comparison: NaN payloads (e.g. rng words) must survive.
            assert_eq!(b.to_words(), r.to_words());
        }
        assert_eq!(find(&back, "rng").unwrap().to_words(), vec![u64::MAX, 0, 12345]);
        assert!(find(&back, "nope").is_err());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut f = File::create(&path).unwrap();
        f.write_all(b"NOPE____________").unwrap();
        drop(f);
        match read_records(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let mut f = File::create(&path).unwrap();
        f.write_all(&MAGIC).unwrap();
        f.write_all(&99u32.to_le_bytes()).unwrap();
        f.write_all(&0u32.to_le_bytes()).unwrap();
        drop(f);
        match read_records(&path) {
            Err(Error::Format { message, offset }) => {
                assert!(message.contains("version"));
                assert_eq!(offset, 4);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let records = vec![TensorRecord::new("x", vec![4], vec![1.0; 4])];
        write_records(&path, &records).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_records(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
