//! IDX image/label file ingestion and the matching writer.
//!
//! Big-endian headers: magic 0x00000803 for images (count, rows, cols)
//! and 0x00000801 for labels (count). Pixel bytes are scaled into [0, 1].

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw decoded pool: `images` is `n * rows * cols` in [0, 1].
#[derive(Debug, Clone)]
pub struct IdxData {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl IdxData {
    pub fn count(&self) -> usize {
        self.labels.len()
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                message: format!("{}: truncated (wanted {n} more bytes)", self.what),
                offset: self.offset as u64,
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxData> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let mut cur = Cursor {
        bytes: &image_bytes,
        offset: 0,
        what: "images",
    };
    let magic = cur.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            message: format!("images: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}"),
            offset: 0,
        });
    }
    let n = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let payload = cur.take(n * rows * cols)?;
    let images: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();

    let mut cur = Cursor {
        bytes: &label_bytes,
        offset: 0,
        what: "labels",
    };
    let magic = cur.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            message: format!("labels: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}"),
            offset: 0,
        });
    }
    let label_count = cur.u32_be()? as usize;
    if label_count != n {
        return Err(Error::Format {
            message: format!("label count {label_count} does not match image count {n}"),
            offset: 4,
        });
    }
    let labels: Vec<usize> = cur.take(label_count)?.iter().map(|&b| b as usize).collect();

    Ok(IdxData {
        rows,
        cols,
        images,
        labels,
    })
}

/// Writes an IDX pair; pixel values are rounded back to bytes, so
/// write-then-load is the identity on loader output.
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    images: &[f64],
    labels: &[usize],
) -> Result<()> {
    let n = labels.len();
    if images.len() != n * rows * cols {
        return Err(Error::Parameter(format!(
            "image payload {} does not match {n} x {rows} x {cols}",
            images.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(images_path)?);
    f.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(rows as u32).to_be_bytes())?;
    f.write_all(&(cols as u32).to_be_bytes())?;
    for &v in images {
        f.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(labels_path)?);
    f.write_all(&LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    for &l in labels {
        f.write_all(&[l as u8])?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_single_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend(std::iter::repeat_n(128u8, 784));
        std::fs::write(&ip, &bytes).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(7);
        std::fs::write(&lp, &bytes).unwrap();

        let data = load_idx(&ip, &lp).unwrap();
        assert_eq!(data.count(), 1);
        assert_eq!((data.rows, data.cols), (28, 28));
        assert_eq!(data.labels, vec![7]);
        assert!((data.images[0] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx(&ip, &lp, 2, 2, &[0.0; 8], &[0, 1]).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&lp, &bytes).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { message, offset }) => {
                assert!(message.contains("does not match"));
                assert_eq!(offset, 4);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, 0xdeadbeefu32.to_be_bytes()).unwrap();
        std::fs::write(&lp, LABELS_MAGIC.to_be_bytes()).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        // Values on the 1/255 grid survive the roundtrip exactly.
        let images: Vec<f64> = (0..3 * 4 * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        let labels = vec![3, 1, 9];
        write_idx(&ip, &lp, 4, 4, &images, &labels).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, labels);
        assert_eq!(back.images, images);

        // And a second write of the loaded data is byte-identical.
        let ip2 = dir.path().join("img2");
        let lp2 = dir.path().join("lab2");
        write_idx(&ip2, &lp2, 4, 4, &back.images, &back.labels).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }
}
