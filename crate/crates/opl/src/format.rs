//! OPLM matrix files.
//!
//! ```text
//! b"OPLM" | u32 version = 1 | u64 rows | u64 cols | rows*cols f64
//! ```
//!
//! All integers and floats little-endian; values row-major.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use opl_core::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"OPLM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 8 + 8;

pub fn write_matrix<W: Write>(mut w: W, m: &Matrix) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.data().len());
    write_matrix(&mut out, m).expect("writing to a Vec cannot fail");
    out
}

/// Parses one matrix; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> std::result::Result<Matrix, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err("bad magic, expected OPLM".to_string());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {}", version));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| format!("dimensions {}x{} overflow", rows, cols))?;
    let body = &bytes[HEADER_LEN..];
    if count.checked_mul(8) != Some(body.len()) {
        return Err(format!(
            "{}x{} needs {} payload bytes, found {}",
            rows,
            cols,
            count.saturating_mul(8),
            body.len()
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows as usize, cols as usize, data).map_err(|e| e.to_string())
}

pub fn read_matrix<R: Read>(mut r: R) -> std::result::Result<Matrix, String> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    decode(&bytes)
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    fs::write(path, encode(m)).map_err(|e| CliError::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|reason| CliError::Format {
        path: path.to_path_buf(),
        reason,
    })
}

/// 0/1 flags as an `n x 1` matrix.
pub fn flags_to_matrix(flags: &[bool]) -> Matrix {
    let data = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    Matrix::new(flags.len(), 1, data).expect("finite flags")
}

pub fn matrix_to_flags(m: &Matrix, path: &Path) -> Result<Vec<bool>> {
    let bad = |reason: String| CliError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if m.cols() != 1 {
        return Err(bad(format!("flags must be a column, got {:?}", m.shape())));
    }
    m.data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(bad(format!("flag value {} is neither 0 nor 1", v)))
            }
        })
        .collect()
}
