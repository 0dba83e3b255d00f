use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IMRL";

/// Run-length masks for one frame: (mask_id, runs) with runs as
/// (start, length) over row-major pixel order.
pub type FrameMasks = Vec<(u32, Vec<(u32, u32)>)>;

/// Binary layout: magic, u32 mask count, then per mask u32 id, u32 run
/// count, and run pairs of u32. Everything little-endian.
pub fn write_rle(path: &Path, masks: &FrameMasks) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(masks.len() as u32)?;
    for (mask_id, runs) in masks {
        w.write_u32::<LittleEndian>(*mask_id)?;
        w.write_u32::<LittleEndian>(runs.len() as u32)?;
        for &(start, len) in runs {
            w.write_u32::<LittleEndian>(start)?;
            w.write_u32::<LittleEndian>(len)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_rle(path: &Path) -> Result<FrameMasks> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::schema(format!("{}: truncated mask file", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::schema(format!("{}: bad mask file magic", path.display())));
    }
    let truncated = || Error::schema(format!("{}: truncated mask file", path.display()));
    let count = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mask_id = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
        let nruns = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
        let mut runs = Vec::with_capacity(nruns as usize);
        for _ in 0..nruns {
            let start = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
            let len = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
            runs.push((start, len));
        }
        out.push((mask_id, runs));
    }
    Ok(out)
}

/// Checks runs are sorted, non-overlapping, nonzero length, and inside the
/// image pixel range.
pub fn validate_runs(runs: &[(u32, u32)], pixel_count: u32, what: &str) -> Result<()> {
    let mut prev_end = 0u32;
    for (i, &(start, len)) in runs.iter().enumerate() {
        if len == 0 {
            return Err(Error::schema(format!("{what}: run {i} has zero length")));
        }
        if i > 0 && start < prev_end {
            return Err(Error::schema(format!("{what}: run {i} overlaps or is unsorted")));
        }
        let end = start
            .checked_add(len)
            .ok_or_else(|| Error::schema(format!("{what}: run {i} overflows")))?;
        if end > pixel_count {
            return Err(Error::schema(format!("{what}: run {i} exceeds image bounds")));
        }
        prev_end = end;
    }
    Ok(())
}

/// Collapses a sorted pixel-index list into runs.
pub fn runs_from_pixels(pixels: &[u32]) -> Vec<(u32, u32)> {
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for &p in pixels {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == p => *len += 1,
            _ => runs.push((p, 1)),
        }
    }
    runs
}
