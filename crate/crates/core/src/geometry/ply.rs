use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::Result;
use crate::geometry::voxel::VoxelSet;
use crate::scalar::Scalar;

/// One exported point set with an optional uniform color.
pub struct PlyGroup<'a, T: Scalar> {
    pub cloud: &'a VoxelSet<T>,
    pub color: Option<[u8; 3]>,
}

/// Writes voxel-center points as binary little-endian PLY. When any group
/// carries a color, all points get r/g/b properties (uncolored groups are
/// white). `comments` lines are embedded verbatim for provenance.
pub fn write_ply<T: Scalar>(path: &Path, groups: &[PlyGroup<'_, T>], comments: &[String]) -> Result<()> {
    let total: usize = groups.iter().map(|g| g.cloud.len()).sum();
    let colored = groups.iter().any(|g| g.color.is_some());
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    for c in comments {
        for line in c.lines() {
            writeln!(w, "comment {line}")?;
        }
    }
    writeln!(w, "element vertex {total}")?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    if colored {
        writeln!(w, "property uchar red")?;
        writeln!(w, "property uchar green")?;
        writeln!(w, "property uchar blue")?;
    }
    writeln!(w, "end_header")?;
    let half = T::from_f64_cfg(0.5);
    for g in groups {
        let vs = g.cloud.voxel_size;
        let rgb = g.color.unwrap_or([255, 255, 255]);
        for cell in g.cloud.sorted_cells() {
            for a in 0..3 {
                let coord = (T::from_i32(cell[a]).unwrap() + half) * vs;
                w.write_f32::<LittleEndian>(coord.to_f64_out() as f32)?;
            }
            if colored {
                w.write_all(&rgb)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Deterministic distinct color per instance index.
pub fn instance_color(index: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
        [170, 110, 40],
    ];
    PALETTE[index % PALETTE.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_point_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.ply");
        let cloud = VoxelSet::<f64>::from_cells(0.05, [[0, 0, 0], [1, 0, 0]]);
        write_ply(&path, &[PlyGroup { cloud: &cloud, color: Some([255, 0, 0]) }], &["hello".into()])
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        assert!(header.contains("element vertex 2"));
        assert!(header.contains("comment hello"));
        assert_eq!(bytes.len() - header_end, 2 * (12 + 3));
    }
}
