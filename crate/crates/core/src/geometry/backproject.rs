use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::geometry::voxel::VoxelSet;
use crate::scalar::Scalar;
use crate::scene::types::{CameraIntrinsics, Frame, Mask2D, Pose, SceneDataset};

/// World point seen at integer pixel coordinates (u, v) with z-depth d.
#[inline]
pub fn pixel_to_world<T: Scalar>(
    u: u32,
    v: u32,
    d: T,
    intr: &CameraIntrinsics<T>,
    pose: &Pose<T>,
) -> [T; 3] {
    let x = d * (T::from_u32(u).unwrap() - intr.cx) / intr.fx;
    let y = d * (T::from_u32(v).unwrap() - intr.cy) / intr.fy;
    pose.apply([x, y, d])
}

/// Back-projects a mask's valid-depth pixels into a voxel set. Invalid
/// depths contribute nothing; an all-invalid mask yields an empty set,
/// which the caller treats as a drop condition.
pub fn backproject_mask<T: Scalar>(frame: &Frame<T>, mask: &Mask2D<T>, voxel_size: T) -> VoxelSet<T> {
    debug_assert_eq!(mask.frame_id, frame.frame_id);
    let width = frame.intrinsics.width;
    let mut out = VoxelSet::new(voxel_size);
    for p in mask.pixels() {
        let d = frame.depth[p as usize];
        if !(d.is_finite() && d > T::zero()) {
            continue;
        }
        out.insert_point(pixel_to_world(p % width, p / width, d, &frame.intrinsics, &frame.pose));
    }
    out
}

/// Observation volume of a frame: every `stride`-th pixel in both axes,
/// valid depths only.
pub fn backproject_frame<T: Scalar>(frame: &Frame<T>, voxel_size: T, stride: usize) -> VoxelSet<T> {
    debug_assert!(stride >= 1);
    let intr = &frame.intrinsics;
    let mut out = VoxelSet::new(voxel_size);
    let stride = stride as u32;
    let mut v = 0;
    while v < intr.height {
        let mut u = 0;
        while u < intr.width {
            let d = frame.depth[(v * intr.width + u) as usize];
            if d.is_finite() && d > T::zero() {
                out.insert_point(pixel_to_world(u, v, d, intr, &frame.pose));
            }
            u += stride;
        }
        v += stride;
    }
    out
}

/// Fills every mask's cloud, dropping masks whose cloud comes back empty.
/// Back-projection per mask is independent; results land in id order.
pub fn build_clouds<T: Scalar>(dataset: &mut SceneDataset<T>, cfg: &PipelineConfig<T>) {
    let frames: std::collections::BTreeMap<u32, &Frame<T>> =
        dataset.frames.iter().map(|f| (f.frame_id, f)).collect();
    let clouds: Vec<(u32, VoxelSet<T>)> = dataset
        .masks
        .par_iter()
        .map(|(&id, mask)| (id, backproject_mask(frames[&mask.frame_id], mask, cfg.voxel_size)))
        .collect();
    let mut empty: Vec<u32> = Vec::new();
    for (id, cloud) in clouds {
        if cloud.is_empty() {
            empty.push(id);
        } else {
            dataset.masks.get_mut(&id).unwrap().cloud = cloud;
        }
    }
    for id in empty {
        log::debug!("dropping mask {id}: empty cloud after back-projection");
        dataset.masks.remove(&id);
        for frame in &mut dataset.frames {
            frame.mask_ids.retain(|&m| m != id);
        }
        dataset.dropped_masks.push(id);
    }
}
