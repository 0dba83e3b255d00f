use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::voxel::VoxelSet;
use crate::scalar::Scalar;
use crate::scene::manifest::{GroundTruthFile, LabelFile, MaskObjectsFile, QueryFile, SceneManifest, SCENE_FORMAT};
use crate::scene::types::{
    validate_feature, CameraIntrinsics, Frame, GroundTruthInstance, Mask2D, Pose, SceneDataset,
};
use crate::scene::{depth, rle};

pub fn manifest_path(scene_dir: &Path) -> std::path::PathBuf {
    scene_dir.join("manifest.toml")
}

pub fn read_manifest(scene_dir: &Path) -> Result<SceneManifest> {
    let path = manifest_path(scene_dir);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, &e.to_string()))?;
    let manifest: SceneManifest =
        toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    if manifest.format != SCENE_FORMAT {
        return Err(Error::schema(format!(
            "{}: unsupported scene format {:?}",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a scene directory into memory. Masks with fewer than
/// `min_mask_pixels` valid-depth pixels are dropped and recorded; clouds
/// stay empty until back-projection.
pub fn load_scene<T: Scalar>(scene_dir: &Path, cfg: &PipelineConfig<T>) -> Result<SceneDataset<T>> {
    let manifest = read_manifest(scene_dir)?;
    if manifest.frames.is_empty() {
        return Err(Error::schema(format!(
            "{}: scene has no frames",
            scene_dir.display()
        )));
    }

    // Frame files are independent; read them in parallel, keep manifest order.
    let loaded: Vec<Result<(Frame<T>, rle::FrameMasks)>> = manifest
        .frames
        .par_iter()
        .map(|entry| -> Result<(Frame<T>, rle::FrameMasks)> {
            let intr = CameraIntrinsics {
                fx: T::from_f64_cfg(entry.fx),
                fy: T::from_f64_cfg(entry.fy),
                cx: T::from_f64_cfg(entry.cx),
                cy: T::from_f64_cfg(entry.cy),
                width: entry.width,
                height: entry.height,
            };
            intr.validate()?;
            let mut rotation = [[T::zero(); 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    rotation[i][j] = T::from_f64_cfg(entry.rotation[i][j]);
                }
            }
            let pose = Pose {
                rotation,
                translation: [
                    T::from_f64_cfg(entry.translation[0]),
                    T::from_f64_cfg(entry.translation[1]),
                    T::from_f64_cfg(entry.translation[2]),
                ],
            };
            pose.validate()?;
            let depth = depth::read_depth(&scene_dir.join(&entry.depth), entry.width, entry.height)?;
            let masks = rle::read_rle(&scene_dir.join(&entry.masks))?;
            let frame = Frame {
                frame_id: entry.frame_id,
                intrinsics: intr,
                pose,
                depth,
                mask_ids: vec![],
            };
            Ok((frame, masks))
        })
        .collect();

    let mut frames = Vec::with_capacity(loaded.len());
    let mut frame_masks = Vec::with_capacity(loaded.len());
    for item in loaded {
        let (frame, masks) = item?;
        frames.push(frame);
        frame_masks.push(masks);
    }

    let mut frame_ids = BTreeSet::new();
    for f in &frames {
        if !frame_ids.insert(f.frame_id) {
            return Err(Error::schema(format!("duplicate frame id {}", f.frame_id)));
        }
    }

    // Feature rows map to masks by ascending id across the whole scene.
    let blob_path = scene_dir.join(&manifest.features);
    let (rows, dim) = crate::scene::blob::read_features::<T>(&blob_path)?;
    if dim == 0 {
        return Err(Error::schema(format!(
            "{}: feature dimension is zero",
            blob_path.display()
        )));
    }

    let mut all_ids: Vec<u32> = Vec::new();
    for masks in &frame_masks {
        for (id, _) in masks {
            all_ids.push(*id);
        }
    }
    let mut sorted_ids = all_ids.clone();
    sorted_ids.sort_unstable();
    if sorted_ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::schema("duplicate mask id across scene".to_string()));
    }
    if rows.len() != sorted_ids.len() {
        return Err(Error::schema(format!(
            "{}: {} feature rows for {} masks",
            blob_path.display(),
            rows.len(),
            sorted_ids.len()
        )));
    }
    let row_of: BTreeMap<u32, usize> =
        sorted_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut masks: BTreeMap<u32, Mask2D<T>> = BTreeMap::new();
    let mut dropped: Vec<u32> = Vec::new();
    for (frame, file_masks) in frames.iter_mut().zip(frame_masks.into_iter()) {
        let pixel_count = frame.intrinsics.width * frame.intrinsics.height;
        for (mask_id, runs) in file_masks {
            rle::validate_runs(&runs, pixel_count, &format!("mask {mask_id}"))?;
            let mut feature = rows[row_of[&mask_id]].clone();
            validate_feature(&mut feature, &format!("mask {mask_id}"))?;
            let mask = Mask2D {
                mask_id,
                frame_id: frame.frame_id,
                runs,
                feature,
                cloud: VoxelSet::new(cfg.voxel_size),
            };
            let valid_pixels = mask.pixels().filter(|&p| frame.depth[p as usize] > T::zero()).count();
            if valid_pixels < cfg.min_mask_pixels {
                log::debug!(
                    "dropping mask {mask_id}: {valid_pixels} valid-depth pixels < {}",
                    cfg.min_mask_pixels
                );
                dropped.push(mask_id);
                continue;
            }
            frame.mask_ids.push(mask_id);
            masks.insert(mask_id, mask);
        }
    }

    Ok(SceneDataset { frames, masks, feature_dim: dim, dropped_masks: dropped })
}

pub fn load_ground_truth<T: Scalar>(path: &Path) -> Result<Vec<GroundTruthInstance<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let file: GroundTruthFile =
        toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(file.instances.len());
    for (idx, entry) in file.instances.iter().enumerate() {
        if !seen.insert(entry.instance_id) {
            return Err(Error::schema(format!(
                "ground truth record {idx}: duplicate instance id {}",
                entry.instance_id
            )));
        }
        if entry.points.is_empty() {
            return Err(Error::schema(format!("ground truth record {idx}: no points")));
        }
        let points: Vec<[T; 3]> = entry
            .points
            .iter()
            .map(|p| [T::from_f64_cfg(p[0]), T::from_f64_cfg(p[1]), T::from_f64_cfg(p[2])])
            .collect();
        let center = GroundTruthInstance::recomputed_center(&points);
        let stated = [
            T::from_f64_cfg(entry.center[0]),
            T::from_f64_cfg(entry.center[1]),
            T::from_f64_cfg(entry.center[2]),
        ];
        let tol = T::from_f64_cfg(1e-6);
        for a in 0..3 {
            if (center[a] - stated[a]).abs() > tol {
                return Err(Error::schema(format!(
                    "ground truth record {idx}: center does not match point centroid"
                )));
            }
        }
        out.push(GroundTruthInstance {
            instance_id: entry.instance_id,
            label_id: entry.label_id,
            points,
            center,
        });
    }
    Ok(out)
}

pub fn load_labels(path: &Path) -> Result<LabelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, &e.to_string()))?;
    let file: LabelFile =
        toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    let mut seen = BTreeSet::new();
    for l in &file.labels {
        if !seen.insert(l.label_id) {
            return Err(Error::schema(format!("duplicate label id {}", l.label_id)));
        }
    }
    Ok(file)
}

pub fn load_queries(path: &Path) -> Result<QueryFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, &e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))
}

pub fn load_mask_objects(path: &Path) -> Result<MaskObjectsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, &e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))
}

// Manifest-driven sidecar lookups: None when the scene ships without one.

pub fn scene_ground_truth<T: Scalar>(scene_dir: &Path) -> Result<Option<Vec<GroundTruthInstance<T>>>> {
    let manifest = read_manifest(scene_dir)?;
    match &manifest.ground_truth {
        Some(rel) => Ok(Some(load_ground_truth(&scene_dir.join(rel))?)),
        None => Ok(None),
    }
}

pub fn scene_labels(scene_dir: &Path) -> Result<Option<LabelFile>> {
    let manifest = read_manifest(scene_dir)?;
    match &manifest.labels {
        Some(rel) => Ok(Some(load_labels(&scene_dir.join(rel))?)),
        None => Ok(None),
    }
}

pub fn scene_queries(scene_dir: &Path) -> Result<Option<QueryFile>> {
    let manifest = read_manifest(scene_dir)?;
    match &manifest.queries {
        Some(rel) => Ok(Some(load_queries(&scene_dir.join(rel))?)),
        None => Ok(None),
    }
}

pub fn scene_mask_objects(scene_dir: &Path) -> Result<Option<MaskObjectsFile>> {
    let manifest = read_manifest(scene_dir)?;
    match &manifest.mask_objects {
        Some(rel) => Ok(Some(load_mask_objects(&scene_dir.join(rel))?)),
        None => Ok(None),
    }
}
