//! Binary map-stack files, little-endian throughout: magic "KSEPMAP1",
//! u32 format version (= 1), u32 grid level, u32 row count, u32 column
//! count, u64 seed (zero when not applicable), then rows·cols f64 values in
//! column-major order. The 32-byte header makes the total size
//! 32 + 8·rows·cols.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, MapStack, Result};

pub const MAP_MAGIC: &[u8; 8] = b"KSEPMAP1";
pub const MAP_FORMAT_VERSION: u32 = 1;
pub const MAP_HEADER_BYTES: u64 = 32;

/// Metadata carried alongside the raw values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapHeader {
    pub level: u32,
    /// The seed the stack was simulated from, or zero for derived products.
    pub seed: u64,
}

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

/// Writes the stack with its header; the file is byte-for-byte determined
/// by the inputs.
pub fn write_maps(path: &Path, stack: &MapStack, header: &MapHeader) -> Result<()> {
    let rows = u32::try_from(stack.rows())
        .map_err(|_| Error::Argument(format!("{} rows exceed the format limit", stack.rows())))?;
    let cols = u32::try_from(stack.cols())
        .map_err(|_| Error::Argument(format!("{} cols exceed the format limit", stack.cols())))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAP_MAGIC)?;
    w.write_all(&MAP_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&header.level.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    w.write_all(&header.seed.to_le_bytes())?;
    for v in stack.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn le_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Reads a stack and its header back, validating magic, version and length.
pub fn read_maps(path: &Path) -> Result<(MapStack, MapHeader)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAP_HEADER_BYTES as usize {
        return Err(format_err(
            bytes.len() as u64,
            format!("truncated header: {} bytes, need {MAP_HEADER_BYTES}", bytes.len()),
        ));
    }
    if &bytes[0..8] != MAP_MAGIC {
        return Err(format_err(0, "bad magic: not a KSEPMAP1 file"));
    }
    let version = le_u32(&bytes, 8);
    if version != MAP_FORMAT_VERSION {
        return Err(format_err(
            8,
            format!("unsupported format version {version}, expected {MAP_FORMAT_VERSION}"),
        ));
    }
    let level = le_u32(&bytes, 12);
    let rows = le_u32(&bytes, 16) as usize;
    let cols = le_u32(&bytes, 20) as usize;
    let seed = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| format_err(16, "rows*cols overflows"))?;
    let expected = MAP_HEADER_BYTES as usize + 8 * count;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected) as u64,
            format!(
                "payload length mismatch: {} bytes for {rows}x{cols}, expected {expected}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[MAP_HEADER_BYTES as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let stack = MapStack::from_vec(rows, cols, data)?;
    Ok((stack, MapHeader { level, seed }))
}
