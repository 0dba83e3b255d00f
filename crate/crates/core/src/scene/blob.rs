use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"IMFB";

/// Feature blob: 16-byte header (magic, u32 row count, u32 dimension,
/// u32 reserved) followed by rows of f32, all little-endian. Row order is
/// the caller's contract; scene blobs use ascending mask id.
pub fn write_features<T: Scalar>(path: &Path, rows: &[Vec<T>], dim: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(rows.len() as u32)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u32::<LittleEndian>(0)?;
    for row in rows {
        debug_assert_eq!(row.len(), dim);
        for &v in row {
            w.write_f32::<LittleEndian>(v.to_f64_out() as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<(Vec<Vec<T>>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let mut r = std::io::Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::schema(format!("{}: truncated feature blob", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::schema(format!("{}: bad feature blob magic", path.display())));
    }
    let truncated = || Error::schema(format!("{}: truncated feature blob", path.display()));
    let count = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let _reserved = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
    let expected = 16 + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::schema(format!(
            "{}: feature blob is {} bytes, header implies {}",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = r.read_f32::<LittleEndian>().map_err(|_| truncated())?;
            row.push(T::from_f32(v).unwrap());
        }
        rows.push(row);
    }
    Ok((rows, dim))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let rows = vec![vec![1.0f64, 0.0, 0.0], vec![0.0, -0.5, 0.25]];
        write_features(&path, &rows, 3).unwrap();
        let original = std::fs::read(&path).unwrap();
        let (back, dim) = read_features::<f64>(&path).unwrap();
        assert_eq!(dim, 3);
        assert_eq!(back, rows);
        write_features(&path, &back, dim).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), original);
    }

    #[test]
    fn length_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_features(&path, &[vec![1.0f32]], 1).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_features::<f32>(&path).is_err());
    }
}
