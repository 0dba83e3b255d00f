//! Instance feature aggregation.
//!
//! Each instance keeps the representative feature chosen during merging; the
//! aggregation pass upgrades it by embedding multi-level crops around the
//! instance's most complete member masks and mean-pooling the results. The
//! embedding itself comes from a pluggable provider: deterministic synthetic,
//! precomputed file, or HTTP service.

pub mod file;
pub mod http;
pub mod synthetic;

use std::collections::BTreeMap;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::voxel::overlap_fraction;
use crate::merging::Instance3D;
use crate::scalar::{normalize, Scalar};
use crate::scene::types::SceneDataset;

/// One crop to embed: a frame region around a member mask at an expansion
/// level. The box is [u_min, v_min, u_max, v_max], inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRequest {
    pub frame_id: u32,
    pub mask_id: u32,
    pub level: u32,
    pub bbox: [u32; 4],
}

pub trait EmbeddingProvider<T: Scalar> {
    fn dim(&self) -> usize;
    /// Short identifier recorded in the map for provenance.
    fn tag(&self) -> String;
    /// One embedding per request, in request order.
    fn embed(&self, requests: &[CropRequest]) -> Result<Vec<Vec<T>>>;
}

/// Member masks ranked by how much of the instance cloud they cover,
/// descending, ties to the smaller mask id. Returns at most `k` ids.
pub fn select_top_masks<T: Scalar>(
    instance: &Instance3D<T>,
    scene: &SceneDataset<T>,
    k: usize,
) -> Vec<u32> {
    let mut ranked: Vec<(T, u32)> = Vec::new();
    for &m in &instance.members {
        let Some(mask) = scene.masks.get(&m) else { continue };
        let cov = overlap_fraction(&instance.cloud, &mask.cloud)
            .expect("instance clouds are non-empty");
        ranked.push((cov, m));
    }
    // Sort ascending by id first, then stable-descending by coverage, so
    // equal coverage keeps the smaller id in front.
    ranked.sort_by_key(|&(_, id)| id);
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("coverages are finite"));
    ranked.into_iter().take(k).map(|(_, id)| id).collect()
}

/// Boxes for levels 0..L around an inclusive tight box. Level l scales each
/// side by (1 + l * expand), growth split evenly (extra pixel goes right or
/// down), then clips to the image.
pub fn multi_level_boxes(
    tight: [u32; 4],
    levels: usize,
    expand: f64,
    width: u32,
    height: u32,
) -> Vec<[u32; 4]> {
    let [u0, v0, u1, v1] = tight;
    debug_assert!(u0 <= u1 && v0 <= v1 && u1 < width && v1 < height);
    let w0 = (u1 - u0 + 1) as f64;
    let h0 = (v1 - v0 + 1) as f64;
    (0..levels)
        .map(|l| {
            let scale = 1.0 + l as f64 * expand;
            let grow_w = (w0 * scale).round() as i64 - w0 as i64;
            let grow_h = (h0 * scale).round() as i64 - h0 as i64;
            let left = grow_w / 2;
            let right = grow_w - left;
            let top = grow_h / 2;
            let bottom = grow_h - top;
            [
                (u0 as i64 - left).max(0) as u32,
                (v0 as i64 - top).max(0) as u32,
                (u1 as i64 + right).min(width as i64 - 1) as u32,
                (v1 as i64 + bottom).min(height as i64 - 1) as u32,
            ]
        })
        .collect()
}

/// Crop plan for one instance: top-k members in rank order, levels inner to
/// outer within each member.
pub fn plan_crops<T: Scalar>(
    instance: &Instance3D<T>,
    scene: &SceneDataset<T>,
    cfg: &PipelineConfig<T>,
) -> Vec<CropRequest> {
    let mut out = Vec::new();
    for mask_id in select_top_masks(instance, scene, cfg.topk_masks) {
        let mask = &scene.masks[&mask_id];
        let frame = scene
            .frame(mask.frame_id)
            .expect("member masks reference loaded frames");
        let Some((u0, v0, u1, v1)) = mask.bbox(frame.intrinsics.width) else { continue };
        for (level, bbox) in multi_level_boxes(
            [u0, v0, u1, v1],
            cfg.crop_levels,
            cfg.crop_expand.to_f64_out(),
            frame.intrinsics.width,
            frame.intrinsics.height,
        )
        .into_iter()
        .enumerate()
        {
            out.push(CropRequest {
                frame_id: mask.frame_id,
                mask_id,
                level: level as u32,
                bbox,
            });
        }
    }
    out
}

/// Renormalized mean of the crop embeddings for one instance. Provider
/// trouble (transport failure, wrong dimension, zero vector) leaves the
/// instance on its representative feature with `aggregation_failed` set
/// rather than aborting the pass.
pub fn aggregate_instance<T: Scalar>(
    instance: &mut Instance3D<T>,
    scene: &SceneDataset<T>,
    provider: &dyn EmbeddingProvider<T>,
    cfg: &PipelineConfig<T>,
) {
    let requests = plan_crops(instance, scene, cfg);
    if requests.is_empty() {
        instance.aggregation_failed = true;
        return;
    }
    let rows = match provider.embed(&requests) {
        Ok(rows) => rows,
        Err(e) => {
            log::warn!("instance {}: embedding failed: {e}", instance.instance_id);
            instance.aggregation_failed = true;
            return;
        }
    };
    if rows.len() != requests.len() || rows.iter().any(|r| r.len() != provider.dim()) {
        log::warn!(
            "instance {}: provider returned a malformed batch",
            instance.instance_id
        );
        instance.aggregation_failed = true;
        return;
    }
    let n = T::from_usize(rows.len()).unwrap();
    let mut mean = vec![T::zero(); provider.dim()];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m = *m + *v;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / n;
    }
    if !normalize(&mut mean) {
        log::warn!(
            "instance {}: crop embeddings cancel out, keeping representative",
            instance.instance_id
        );
        instance.aggregation_failed = true;
        return;
    }
    instance.aggregated_feature = Some(mean);
    instance.aggregation_failed = false;
}

/// Runs aggregation over every instance. The provider dimension must match
/// the map's feature dimension so aggregated and representative features
/// stay interchangeable at retrieval time.
pub fn aggregate_all<T: Scalar>(
    instances: &mut [Instance3D<T>],
    scene: &SceneDataset<T>,
    provider: &dyn EmbeddingProvider<T>,
    cfg: &PipelineConfig<T>,
) -> Result<AggregationStats> {
    if provider.dim() != scene.feature_dim {
        return Err(Error::config(&format!(
            "provider dimension {} does not match scene feature dimension {}",
            provider.dim(),
            scene.feature_dim
        )));
    }
    let mut stats = AggregationStats::default();
    for instance in instances.iter_mut() {
        aggregate_instance(instance, scene, provider, cfg);
        if instance.aggregation_failed {
            stats.failed += 1;
        } else {
            stats.aggregated += 1;
        }
    }
    Ok(stats)
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AggregationStats {
    pub aggregated: usize,
    pub failed: usize,
}

/// Embeddings keyed by crop identity, for providers backed by static data.
pub type CropTable<T> = BTreeMap<(u32, u32, u32), Vec<T>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_expand_symmetrically_and_clip() {
        // 40x20 box, expand 0.2: level 2 scales sides by 1.4.
        let boxes = multi_level_boxes([30, 40, 69, 59], 3, 0.2, 640, 480);
        assert_eq!(boxes[0], [30, 40, 69, 59]);
        assert_eq!(boxes[2], [22, 36, 77, 63]);
        let (w2, h2) = (boxes[2][2] - boxes[2][0] + 1, boxes[2][3] - boxes[2][1] + 1);
        assert_eq!((w2, h2), (56, 28));
        // Near the corner the same growth clips.
        let clipped = multi_level_boxes([0, 0, 39, 19], 3, 0.2, 48, 24);
        assert_eq!(clipped[2], [0, 0, 47, 23]);
    }

    #[test]
    fn level_zero_is_tight() {
        let boxes = multi_level_boxes([5, 5, 6, 6], 1, 0.5, 10, 10);
        assert_eq!(boxes, vec![[5, 5, 6, 6]]);
    }

    #[test]
    fn odd_growth_goes_right_and_down() {
        // 3x3 at scale 2 grows to 6x6: one extra pixel right and down.
        let boxes = multi_level_boxes([10, 10, 12, 12], 2, 1.0, 100, 100);
        assert_eq!(boxes[1], [9, 9, 14, 14]);
    }
}
