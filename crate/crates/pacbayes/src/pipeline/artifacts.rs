//! On-disk artifact formats.
//!
//! Every writer is atomic (write to a temp file, then rename), so a crashed
//! run never leaves a half-written artifact behind a manifest entry.
//!
//! Sample matrices use a small fixed binary layout, little-endian:
//!
//! ```text
//! bytes 0..4    magic "PBSM"
//! bytes 4..8    format version (u32, currently 1)
//! bytes 8..16   dim (u64)
//! bytes 16..24  rows (u64)
//! bytes 24..32  beta (f64)
//! bytes 32..40  lambda (f64)
//! bytes 40..48  n (u64)
//! bytes 48..56  seed (u64)
//! bytes 56..    rows * dim f64 values, row-major (row = iteration)
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const SAMPLE_MAGIC: &[u8; 4] = b"PBSM";
const SAMPLE_VERSION: u32 = 1;

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dependency(format!("missing artifact {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Header of a persisted sample matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleHeader {
    pub dim: usize,
    pub rows: usize,
    pub beta: f64,
    pub lambda: f64,
    pub n: u64,
    pub seed: u64,
}

pub fn write_sample_matrix(
    path: &Path,
    samples: &Array2<f64>,
    header: &SampleHeader,
) -> Result<()> {
    let (rows, dim) = samples.dim();
    if rows != header.rows || dim != header.dim {
        return Err(Error::Shape(format!(
            "sample matrix {}x{} does not match header {}x{}",
            rows, dim, header.rows, header.dim
        )));
    }
    let mut bytes = Vec::with_capacity(56 + rows * dim * 8);
    bytes.extend_from_slice(SAMPLE_MAGIC);
    bytes.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.dim as u64).to_le_bytes());
    bytes.extend_from_slice(&(header.rows as u64).to_le_bytes());
    bytes.extend_from_slice(&header.beta.to_le_bytes());
    bytes.extend_from_slice(&header.lambda.to_le_bytes());
    bytes.extend_from_slice(&header.n.to_le_bytes());
    bytes.extend_from_slice(&header.seed.to_le_bytes());
    for v in samples.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_sample_matrix(path: &Path) -> Result<(Array2<f64>, SampleHeader)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dependency(format!("missing artifact {}: {e}", path.display())))?;
    if bytes.len() < 56 {
        return Err(Error::Length(format!(
            "{}: sample file shorter than its header",
            path.display()
        )));
    }
    if &bytes[0..4] != SAMPLE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad sample-matrix magic",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SAMPLE_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let header = SampleHeader {
        dim: u64_at(8) as usize,
        rows: u64_at(16) as usize,
        beta: f64_at(24),
        lambda: f64_at(32),
        n: u64_at(40),
        seed: u64_at(48),
    };
    let expected = 56 + header.rows * header.dim * 8;
    if bytes.len() < expected {
        return Err(Error::Length(format!(
            "{}: payload truncated ({} bytes, header implies {expected})",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(header.rows * header.dim);
    for i in 0..header.rows * header.dim {
        data.push(f64_at(56 + 8 * i));
    }
    let samples =
        Array2::from_shape_vec((header.rows, header.dim), data).expect("length checked above");
    Ok((samples, header))
}

/// Per-iteration chain records as CSV: iteration, accepted, loss, 0-1 loss.
pub fn write_trace_csv(
    path: &Path,
    accepted: &[bool],
    ce: &[f64],
    zo: Option<&[f64]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "accepted", "ce", "zo"])?;
    for i in 0..ce.len() {
        let zo_field = zo.map(|z| format!("{}", z[i])).unwrap_or_default();
        w.write_record([
            i.to_string(),
            (accepted[i] as u8).to_string(),
            format!("{}", ce[i]),
            zo_field,
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    write_atomic(path, &bytes)
}

/// Reads a trace CSV back into its columns.
pub fn read_trace_csv(path: &Path) -> Result<(Vec<bool>, Vec<f64>, Option<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Dependency(format!("missing artifact {}: {e}", path.display())))?;
    let mut accepted = Vec::new();
    let mut ce = Vec::new();
    let mut zo: Vec<f64> = Vec::new();
    let mut any_zo = false;
    for record in r.records() {
        let record = record?;
        accepted.push(&record[1] == "1");
        ce.push(record[2].parse::<f64>().map_err(|e| {
            Error::Format(format!(
                "{}: bad ce value {:?}: {e}",
                path.display(),
                &record[2]
            ))
        })?);
        if !record[3].is_empty() {
            any_zo = true;
            zo.push(record[3].parse::<f64>().map_err(|e| {
                Error::Format(format!(
                    "{}: bad zo value {:?}: {e}",
                    path.display(),
                    &record[3]
                ))
            })?);
        }
    }
    if any_zo && zo.len() != ce.len() {
        return Err(Error::Format(format!(
            "{}: ragged zo column",
            path.display()
        )));
    }
    Ok((accepted, ce, if any_zo { Some(zo) } else { None }))
}

/// Writes a rectangular table of floats with a header row.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv flush: {e}")))?;
    write_atomic(path, &bytes)
}

/// Reads a float matrix CSV (header skipped).
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Dependency(format!("missing artifact {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let row: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        out.push(row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sample_matrix_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let samples = array![[1.0, -2.5, 3.25], [0.125, 7.5, -0.0625]];
        let header = SampleHeader {
            dim: 3,
            rows: 2,
            beta: 0.4,
            lambda: 1.0,
            n: 2000,
            seed: 42,
        };
        write_sample_matrix(&path, &samples, &header).unwrap();
        let (back, h) = read_sample_matrix(&path).unwrap();
        assert_eq!(back, samples);
        assert_eq!(h, header);
    }

    #[test]
    fn sample_matrix_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let samples = array![[1.0, 2.0]];
        let header = SampleHeader {
            dim: 2,
            rows: 1,
            beta: 0.0,
            lambda: 1.0,
            n: 1,
            seed: 0,
        };
        write_sample_matrix(&path, &samples, &header).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_sample_matrix(&path).is_err());
        // Truncation is a length error.
        write_sample_matrix(&path, &samples, &header).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_sample_matrix(&path), Err(Error::Length(_))));
    }

    #[test]
    fn trace_csv_roundtrip_with_and_without_zo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let accepted = vec![true, false, true];
        let ce = vec![0.5, 0.5, 0.25];
        let zo = vec![1.0, 1.0, 0.0];
        write_trace_csv(&path, &accepted, &ce, Some(&zo)).unwrap();
        let (a, c, z) = read_trace_csv(&path).unwrap();
        assert_eq!(a, accepted);
        assert_eq!(c, ce);
        assert_eq!(z.unwrap(), zo);
        write_trace_csv(&path, &accepted, &ce, None).unwrap();
        let (_, _, z) = read_trace_csv(&path).unwrap();
        assert!(z.is_none());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_json(&path, &serde_json::json!({"a": 1})).unwrap();
        write_json(&path, &serde_json::json!({"a": 2})).unwrap();
        let v: serde_json::Value = read_json(&path).unwrap();
        assert_eq!(v["a"], 2);
        assert!(!path.with_extension("tmp").exists());
    }
}
