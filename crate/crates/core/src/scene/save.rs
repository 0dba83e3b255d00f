use std::path::Path;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::scene::manifest::{
    FrameEntry, GroundTruthFile, LabelFile, MaskObjectsFile, QueryFile, SceneManifest, SCENE_FORMAT,
};
use crate::scene::types::SceneDataset;
use crate::scene::{blob, depth, rle};

/// Optional sidecar files written next to the manifest.
#[derive(Debug, Clone, Default)]
pub struct SceneExtras {
    pub ground_truth: Option<GroundTruthFile>,
    pub labels: Option<LabelFile>,
    pub queries: Option<QueryFile>,
    pub mask_objects: Option<MaskObjectsFile>,
    pub generator: Option<toml::Value>,
}

/// Writes a scene directory in the canonical layout. Mask files keep masks
/// in ascending id order and the feature blob rows follow ascending mask id
/// across the scene, so saving a freshly loaded scene reproduces the mask
/// and feature bytes exactly.
pub fn save_scene<T: Scalar>(
    dataset: &SceneDataset<T>,
    dir: &Path,
    extras: &SceneExtras,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("depth"))?;
    std::fs::create_dir_all(dir.join("masks"))?;

    let mut frames = Vec::with_capacity(dataset.frames.len());
    for frame in &dataset.frames {
        let depth_rel = format!("depth/{}.png", frame.frame_id);
        let masks_rel = format!("masks/{}.rle", frame.frame_id);
        depth::write_depth(
            &dir.join(&depth_rel),
            &frame.depth,
            frame.intrinsics.width,
            frame.intrinsics.height,
        )?;
        let mut ids = frame.mask_ids.clone();
        ids.sort_unstable();
        let file_masks: rle::FrameMasks = ids
            .iter()
            .map(|id| (*id, dataset.masks[id].runs.clone()))
            .collect();
        rle::write_rle(&dir.join(&masks_rel), &file_masks)?;
        let intr = &frame.intrinsics;
        let mut rotation = [[0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = frame.pose.rotation[i][j].to_f64_out();
            }
        }
        frames.push(FrameEntry {
            frame_id: frame.frame_id,
            depth: depth_rel,
            masks: masks_rel,
            width: intr.width,
            height: intr.height,
            fx: intr.fx.to_f64_out(),
            fy: intr.fy.to_f64_out(),
            cx: intr.cx.to_f64_out(),
            cy: intr.cy.to_f64_out(),
            rotation,
            translation: [
                frame.pose.translation[0].to_f64_out(),
                frame.pose.translation[1].to_f64_out(),
                frame.pose.translation[2].to_f64_out(),
            ],
        });
    }

    let rows: Vec<Vec<T>> = dataset.masks.values().map(|m| m.feature.clone()).collect();
    blob::write_features(&dir.join("features.bin"), &rows, dataset.feature_dim)?;

    let write_toml = |name: &str, text: String| -> Result<()> {
        std::fs::write(dir.join(name), text)?;
        Ok(())
    };

    let mut manifest = SceneManifest {
        format: SCENE_FORMAT.to_string(),
        features: "features.bin".to_string(),
        ground_truth: None,
        labels: None,
        queries: None,
        mask_objects: None,
        generator: extras.generator.clone(),
        frames,
    };
    if let Some(gt) = &extras.ground_truth {
        write_toml("gt.toml", toml::to_string_pretty(gt).expect("gt serializes"))?;
        manifest.ground_truth = Some("gt.toml".to_string());
    }
    if let Some(labels) = &extras.labels {
        write_toml("labels.toml", toml::to_string_pretty(labels).expect("labels serialize"))?;
        manifest.labels = Some("labels.toml".to_string());
    }
    if let Some(queries) = &extras.queries {
        write_toml("queries.toml", toml::to_string_pretty(queries).expect("queries serialize"))?;
        manifest.queries = Some("queries.toml".to_string());
    }
    if let Some(mo) = &extras.mask_objects {
        write_toml(
            "mask_objects.toml",
            toml::to_string_pretty(mo).expect("mask objects serialize"),
        )?;
        manifest.mask_objects = Some("mask_objects.toml".to_string());
    }
    write_toml(
        "manifest.toml",
        toml::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}
