//! Little-endian binary containers for datasets and feature tables.
//!
//! Dataset layout:
//!
//! ```text
//! magic "ROBDS001"
//! u64 n_records | u32 height | u32 width | u32 channels | u64 seed | u32 n_classes
//! n_classes × (u32 len, utf-8 class name)
//! n_records × (i64 label or -1, u32 len, utf-8 id, height·width·channels × f32)
//! ```
//!
//! Feature-table layout:
//!
//! ```text
//! magic "ROBFT001"
//! u64 n | u64 d | u32 len, utf-8 tag
//! n × i64 label or -1
//! n·d × f64 (row-major)
//! ```

use std::fs;
use std::path::Path;

use rob_tensor::Matrix;

use super::{Dataset, Image, ImageRecord, CHANNELS};
use crate::error::{Result, RobError};

const DATASET_MAGIC: &[u8; 8] = b"ROBDS001";
const FEATURE_MAGIC: &[u8; 8] = b"ROBFT001";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n_records: u64,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub seed: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(RobError::Format {
                what: self.what,
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| RobError::Format {
            what: self.what,
            reason: e.to_string(),
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(RobError::Format {
                what: self.what,
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn label_code(l: Option<usize>) -> i64 {
    l.map_or(-1, |v| v as i64)
}

fn label_decode(v: i64) -> Option<usize> {
    (v >= 0).then_some(v as usize)
}

/// Serializes a dataset whose images all share one size.
pub fn write_dataset(path: &Path, ds: &Dataset, seed: u64) -> Result<()> {
    let (h, w) = ds
        .records
        .first()
        .map(|r| (r.image.height, r.image.width))
        .unwrap_or((0, 0));
    if ds
        .records
        .iter()
        .any(|r| r.image.height != h || r.image.width != w)
    {
        return Err(RobError::contract(
            "dataset container requires equally sized images",
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(ds.class_names.len() as u32).to_le_bytes());
    for name in &ds.class_names {
        put_str(&mut out, name);
    }
    for r in &ds.records {
        out.extend_from_slice(&label_code(r.label).to_le_bytes());
        put_str(&mut out, &r.id);
        for v in &r.image.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| RobError::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Dataset)> {
    let buf = fs::read(path).map_err(|e| RobError::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        what: "dataset container",
    };
    if r.take(8)? != DATASET_MAGIC {
        return Err(RobError::Format {
            what: "dataset container",
            reason: "bad magic".into(),
        });
    }
    let header = DatasetHeader {
        n_records: r.u64()?,
        height: r.u32()?,
        width: r.u32()?,
        channels: r.u32()?,
        seed: r.u64()?,
    };
    if header.channels as usize != CHANNELS {
        return Err(RobError::Format {
            what: "dataset container",
            reason: format!("{} channels", header.channels),
        });
    }
    let n_classes = r.u32()?;
    let mut ds = Dataset::default();
    for _ in 0..n_classes {
        ds.class_names.push(r.string()?);
    }
    let n_px = header.height as usize * header.width as usize * CHANNELS;
    for _ in 0..header.n_records {
        let label = label_decode(r.i64()?);
        let id = r.string()?;
        let raw = r.take(n_px * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ds.records.push(ImageRecord {
            id,
            label,
            image: Image::from_data(header.height as usize, header.width as usize, data)?,
        });
    }
    r.finish()?;
    Ok((header, ds))
}

pub fn write_feature_table(
    path: &Path,
    features: &Matrix,
    labels: &[Option<usize>],
    tag: &str,
) -> Result<()> {
    if labels.len() != features.rows() {
        return Err(RobError::contract(
            "one label slot per feature row is required",
        ));
    }
    let mut out = Vec::with_capacity(16 + features.len() * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(features.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u64).to_le_bytes());
    put_str(&mut out, tag);
    for &l in labels {
        out.extend_from_slice(&label_code(l).to_le_bytes());
    }
    out.extend_from_slice(&features.to_le_bytes());
    fs::write(path, out).map_err(|e| RobError::io(path, e))
}

pub fn read_feature_table(path: &Path) -> Result<(Matrix, Vec<Option<usize>>, String)> {
    let buf = fs::read(path).map_err(|e| RobError::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        what: "feature table",
    };
    if r.take(8)? != FEATURE_MAGIC {
        return Err(RobError::Format {
            what: "feature table",
            reason: "bad magic".into(),
        });
    }
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let tag = r.string()?;
    let labels = (0..n)
        .map(|_| r.i64().map(label_decode))
        .collect::<Result<Vec<_>>>()?;
    let data = r
        .take(n * d * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    r.finish()?;
    Ok((Matrix::from_vec(n, d, data)?, labels, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate_synthetic_dataset(3, 2, 12, 4).unwrap();
        write_dataset(&path, &ds, 4).unwrap();
        let (header, back) = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(header.n_records, 6);
        assert_eq!(header.seed, 4);
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate_synthetic_dataset(2, 1, 8, 0).unwrap();
        write_dataset(&path, &ds, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_dataset(&path).is_err());
    }

    #[test]
    fn feature_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ft.bin");
        let m =
            Matrix::from_vec(2, 3, vec![0.1, -2.0, 3.5, f64::MIN_POSITIVE, 1e300, -0.0]).unwrap();
        write_feature_table(&path, &m, &[Some(1), None], "last_global").unwrap();
        let (back, labels, tag) = read_feature_table(&path).unwrap();
        assert_eq!(back.to_le_bytes(), m.to_le_bytes());
        assert_eq!(labels, vec![Some(1), None]);
        assert_eq!(tag, "last_global");
    }
}
