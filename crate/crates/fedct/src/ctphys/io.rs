//! Raw-binary matrix serialization and PGM export.
//!
//! Matrix format: 16-byte header (magic "PFS1", u32 rows, u32 cols, four
//! reserved zero bytes, all little-endian) followed by row-major 32-bit
//! IEEE-754 little-endian floats.

use super::CtError;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PFS_MAGIC: [u8; 4] = *b"PFS1";

/// Encode a row-major matrix in the raw-binary format.
pub fn pfs_matrix_bytes(rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols);
    let mut out = Vec::with_capacity(16 + data.len() * 4);
    out.extend_from_slice(&PFS_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Write a row-major matrix in the raw-binary format.
pub fn write_pfs_matrix(
    path: &Path,
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<(), CtError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&pfs_matrix_bytes(rows, cols, data))?;
    w.flush()?;
    Ok(())
}

/// Read a matrix written by [`write_pfs_matrix`]; values are widened to f64.
pub fn read_pfs_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>), CtError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if header[0..4] != PFS_MAGIC {
        return Err(CtError::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &header[0..4]
        )));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((rows, cols, data))
}

/// Display window for 8-bit export: values in
/// [level - window/2, level + window/2] map linearly onto [0, 255].
#[derive(Debug, Clone, Copy)]
pub struct PgmWindow {
    pub window: f64,
    pub level: f64,
}

impl Default for PgmWindow {
    fn default() -> Self {
        PgmWindow {
            window: 1.0,
            level: 0.5,
        }
    }
}

/// Export a matrix as a binary 8-bit PGM for visual inspection.
pub fn write_pgm(
    path: &Path,
    rows: usize,
    cols: usize,
    data: &[f64],
    win: PgmWindow,
) -> Result<(), CtError> {
    assert_eq!(data.len(), rows * cols);
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let lo = win.level - win.window / 2.0;
    let bytes: Vec<u8> = data
        .iter()
        .map(|&v| (((v - lo) / win.window).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
