//! Binary matrix (de)serialization shared by snapshot sidecars and model
//! files: an 8-byte magic chosen by the caller, u64 row and column counts,
//! then row-major f64 values, all little-endian.

use std::io::{Read, Write};

use super::Matrix;
use crate::error::{Error, Result};

pub(crate) fn write_matrix(out: &mut impl Write, magic: &[u8; 8], m: &Matrix) -> Result<()> {
    let ctx = "writing matrix";
    let io = |e| Error::io(ctx, e);
    out.write_all(magic).map_err(io)?;
    out.write_all(&(m.rows() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&(m.cols() as u64).to_le_bytes()).map_err(io)?;
    for &v in m.as_slice() {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    Ok(())
}

pub(crate) fn read_matrix(input: &mut impl Read, magic: &[u8; 8]) -> Result<Matrix> {
    let ctx = "reading matrix";
    let io = |e| Error::io(ctx, e);
    let mut got_magic = [0u8; 8];
    input.read_exact(&mut got_magic).map_err(io)?;
    if &got_magic != magic {
        return Err(Error::data(format!(
            "bad matrix header: expected {:?}, got {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got_magic)
        )));
    }
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8).map_err(io)?;
    let rows = u64::from_le_bytes(buf8) as usize;
    input.read_exact(&mut buf8).map_err(io)?;
    let cols = u64::from_le_bytes(buf8) as usize;
    let count = rows.checked_mul(cols).ok_or_else(|| {
        Error::data(format!("matrix shape {rows}x{cols} overflows"))
    })?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut buf8).map_err(io)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Matrix::from_vec(rows, cols, data)
}
