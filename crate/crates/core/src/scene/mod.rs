pub mod blob;
pub mod depth;
pub mod load;
pub mod manifest;
pub mod rle;
pub mod save;
pub mod types;

pub use load::{
    load_ground_truth, load_labels, load_mask_objects, load_queries, load_scene, read_manifest,
    scene_ground_truth, scene_labels, scene_mask_objects, scene_queries,
};
pub use save::{save_scene, SceneExtras};
pub use types::{CameraIntrinsics, Frame, GroundTruthInstance, Mask2D, Pose, SceneDataset};
