//! Small file-format helpers: npy-style raw arrays, loss-curve CSV, and
//! JSONL writing.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::train::LossRow;

/// Writes a 2-D f64 array as an npy (v1.0) file: little-endian, C order.
pub fn write_npy_2d(path: &Path, array: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (rows, cols) = array.dim();
    let mut header = format!(
        "{{'descr': '<f8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}"
    );
    // pad so that magic + version + len + header is a multiple of 64
    let unpadded = 6 + 2 + 2 + header.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    header.push_str(&" ".repeat(padding));
    header.push('\n');

    let mut out = Vec::with_capacity(10 + header.len() + rows * cols * 8);
    out.extend_from_slice(b"\x93NUMPY");
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in array.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads back a 2-D f64 npy file written by [`write_npy_2d`].
pub fn read_npy_2d(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::InvalidInput(format!(
            "{} is not an npy file",
            path.display()
        )));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(&bytes[10..10 + header_len])
        .map_err(|_| Error::InvalidInput("bad npy header".into()))?;
    let shape_part = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::InvalidInput("npy header missing shape".into()))?;
    let dims: Vec<usize> = shape_part
        .split(',')
        .filter_map(|t| t.trim().parse().ok())
        .collect();
    if dims.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "expected 2-d npy, header shape ({shape_part})"
        )));
    }
    let data_start = 10 + header_len;
    let expected = dims[0] * dims[1] * 8;
    if bytes.len() != data_start + expected {
        return Err(Error::InvalidInput("npy payload size mismatch".into()));
    }
    let mut data = Vec::with_capacity(dims[0] * dims[1]);
    for chunk in bytes[data_start..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Loss-curve CSV: `epoch,step,loss,metric`.
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::from("epoch,step,loss,metric\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.step, row.loss, row.metric
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Serializes each value as one JSON line.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, values: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    for v in values {
        serde_json::to_writer(&mut buf, v)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}
