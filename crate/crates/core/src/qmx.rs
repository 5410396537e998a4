//! QMX1 matrix files: `"QMX1"`, u32 LE rows, u32 LE cols, then `rows * cols`
//! f64 LE values in row-major order. Vectors are stored with one column.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{QcsError, Result};

pub const MAGIC: &[u8; 4] = b"QMX1";

pub fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    let (rows, cols) = m.shape();
    let rows32 = u32::try_from(rows).map_err(|_| QcsError::Format(format!("{rows} rows do not fit in u32")))?;
    let cols32 = u32::try_from(cols).map_err(|_| QcsError::Format(format!("{cols} cols do not fit in u32")))?;
    w.write_all(MAGIC)?;
    w.write_all(&rows32.to_le_bytes())?;
    w.write_all(&cols32.to_le_bytes())?;
    for r in 0..rows {
        for c in 0..cols {
            w.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrix<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|e| QcsError::Format(format!("truncated header: {e}")))?;
    if &head[..4] != MAGIC {
        return Err(QcsError::Format(format!("bad magic {:?}", &head[..4])));
    }
    let rows = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes")) as usize;
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| QcsError::Format(format!("{rows} x {cols} overflows")))?;
    let mut bytes = Vec::new();
    r.take(len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != len {
        return Err(QcsError::Format(format!(
            "expected {len} payload bytes for {rows} x {cols}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix(&mut BufReader::new(File::open(path)?))
}

pub fn save_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<()> {
    save_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Loads a one-column (or one-row) file as a vector.
pub fn load_vector(path: impl AsRef<Path>) -> Result<DVector<f64>> {
    let m = load_matrix(path)?;
    match m.shape() {
        (_, 1) | (1, _) => Ok(DVector::from_iterator(m.len(), m.transpose().iter().copied())),
        (r, c) => Err(QcsError::Format(format!("expected a vector, found {r} x {c}"))),
    }
}
