use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, RawConfig};
use crate::error::{Error, Result};
use crate::geometry::voxel::VoxelSet;
use crate::merging::Instance3D;
use crate::scalar::Scalar;
use crate::scene::blob;

pub const MAP_FORMAT: &str = "instmap-map/1";

/// Map directory layout: `map.toml` (metadata + effective config +
/// per-instance records), `cells.bin` (i32 cell triples, instances
/// concatenated in id order, cells sorted), `features.bin` (representative
/// features), and `agg_features.bin` once aggregation has run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapFile {
    pub format: String,
    pub scene: String,
    pub feature_dim: usize,
    pub aggregated: bool,
    /// Provider tag recorded by the aggregation step, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_provider: Option<String>,
    pub config: RawConfig,
    #[serde(default, rename = "instance")]
    pub instances: Vec<InstanceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub instance_id: u32,
    pub members: Vec<u32>,
    pub centroid: [f64; 3],
    pub cell_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_id: Option<u32>,
    #[serde(default)]
    pub aggregation_failed: bool,
}

fn write_cells<T: Scalar>(path: &Path, instances: &[Instance3D<T>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        for cell in inst.cloud.sorted_cells() {
            for a in 0..3 {
                w.write_i32::<LittleEndian>(cell[a])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_cells(path: &Path, counts: &[usize]) -> Result<Vec<Vec<[i32; 3]>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let total: usize = counts.iter().sum();
    if bytes.len() != total * 12 {
        return Err(Error::schema(format!(
            "{}: cell blob is {} bytes, metadata implies {}",
            path.display(),
            bytes.len(),
            total * 12
        )));
    }
    let mut r = std::io::Cursor::new(bytes);
    let mut out = Vec::with_capacity(counts.len());
    for &n in counts {
        let mut cells = Vec::with_capacity(n);
        for _ in 0..n {
            let mut cell = [0i32; 3];
            for a in &mut cell {
                *a = r.read_i32::<LittleEndian>()?;
            }
            cells.push(cell);
        }
        out.push(cells);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    debug_assert!(rest.is_empty());
    Ok(out)
}

/// Writes the map directory. Everything is ordered by instance id and cell
/// order is sorted, so identical instances produce identical bytes
/// regardless of thread count.
pub fn save_map<T: Scalar>(
    map_dir: &Path,
    instances: &[Instance3D<T>],
    scene: &str,
    cfg: &PipelineConfig<T>,
    feature_dim: usize,
) -> Result<MapFile> {
    std::fs::create_dir_all(map_dir)?;
    debug_assert!(instances.windows(2).all(|w| w[0].instance_id < w[1].instance_id));

    write_cells(&map_dir.join("cells.bin"), instances)?;
    let rep_rows: Vec<Vec<T>> =
        instances.iter().map(|i| i.representative_feature.clone()).collect();
    blob::write_features(&map_dir.join("features.bin"), &rep_rows, feature_dim)?;

    let aggregated = instances.iter().any(|i| i.aggregated_feature.is_some());
    if aggregated {
        let agg_rows: Vec<Vec<T>> = instances
            .iter()
            .map(|i| i.aggregated_feature.clone().unwrap_or_else(|| i.representative_feature.clone()))
            .collect();
        blob::write_features(&map_dir.join("agg_features.bin"), &agg_rows, feature_dim)?;
    }

    let entries: Vec<InstanceEntry> = instances
        .iter()
        .map(|i| InstanceEntry {
            instance_id: i.instance_id,
            members: i.members.clone(),
            centroid: [
                i.centroid[0].to_f64_out(),
                i.centroid[1].to_f64_out(),
                i.centroid[2].to_f64_out(),
            ],
            cell_count: i.cloud.len(),
            label_id: i.label_id,
            aggregation_failed: i.aggregation_failed,
        })
        .collect();
    let file = MapFile {
        format: MAP_FORMAT.to_string(),
        scene: scene.to_string(),
        feature_dim,
        aggregated,
        aggregation_provider: None,
        config: cfg.to_raw(),
        instances: entries,
    };
    std::fs::write(
        map_dir.join("map.toml"),
        toml::to_string_pretty(&file).expect("map metadata serializes"),
    )?;
    Ok(file)
}

/// Rewrites map.toml preserving layout, used by steps that amend metadata.
pub fn save_map_file(map_dir: &Path, file: &MapFile) -> Result<()> {
    std::fs::write(
        map_dir.join("map.toml"),
        toml::to_string_pretty(file).expect("map metadata serializes"),
    )?;
    Ok(())
}

pub struct LoadedMap<T: Scalar> {
    pub instances: Vec<Instance3D<T>>,
    pub config: PipelineConfig<T>,
    pub scene: PathBuf,
    pub feature_dim: usize,
    pub aggregated: bool,
    pub file: MapFile,
}

pub fn load_map<T: Scalar>(map_dir: &Path) -> Result<LoadedMap<T>> {
    let meta_path = map_dir.join("map.toml");
    let text =
        std::fs::read_to_string(&meta_path).map_err(|e| Error::load(&meta_path, &e.to_string()))?;
    let file: MapFile =
        toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", meta_path.display())))?;
    if file.format != MAP_FORMAT {
        return Err(Error::schema(format!(
            "{}: unsupported map format {:?}",
            meta_path.display(),
            file.format
        )));
    }
    let cfg = PipelineConfig::<T>::default().apply(&file.config)?;

    let counts: Vec<usize> = file.instances.iter().map(|e| e.cell_count).collect();
    let cells = read_cells(&map_dir.join("cells.bin"), &counts)?;
    let (rep_rows, dim) = blob::read_features::<T>(&map_dir.join("features.bin"))?;
    if dim != file.feature_dim || rep_rows.len() != file.instances.len() {
        return Err(Error::schema(format!(
            "{}: feature blob shape does not match metadata",
            map_dir.display()
        )));
    }
    let agg_path = map_dir.join("agg_features.bin");
    let agg_rows: Option<Vec<Vec<T>>> = if file.aggregated {
        let (rows, adim) = blob::read_features::<T>(&agg_path)?;
        if adim != file.feature_dim || rows.len() != file.instances.len() {
            return Err(Error::schema(format!(
                "{}: aggregated blob shape does not match metadata",
                map_dir.display()
            )));
        }
        Some(rows)
    } else {
        None
    };

    let mut instances = Vec::with_capacity(file.instances.len());
    for (i, entry) in file.instances.iter().enumerate() {
        let cloud = VoxelSet::from_cells(cfg.voxel_size, cells[i].iter().copied());
        if cloud.len() != entry.cell_count {
            return Err(Error::schema(format!(
                "instance {}: duplicate cells in blob",
                entry.instance_id
            )));
        }
        instances.push(Instance3D {
            instance_id: entry.instance_id,
            members: entry.members.clone(),
            cloud,
            representative_feature: rep_rows[i].clone(),
            aggregated_feature: agg_rows.as_ref().map(|r| r[i].clone()),
            centroid: [
                T::from_f64_cfg(entry.centroid[0]),
                T::from_f64_cfg(entry.centroid[1]),
                T::from_f64_cfg(entry.centroid[2]),
            ],
            label_id: entry.label_id,
            aggregation_failed: entry.aggregation_failed,
        });
    }
    Ok(LoadedMap {
        instances,
        config: cfg,
        scene: PathBuf::from(&file.scene),
        feature_dim: file.feature_dim,
        aggregated: file.aggregated,
        file,
    })
}
