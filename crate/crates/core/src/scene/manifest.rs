use serde::{Deserialize, Serialize};

pub const SCENE_FORMAT: &str = "instmap-scene/1";

/// On-disk scene manifest. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format: String,
    /// Feature blob path; rows in ascending mask id order.
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<String>,
    /// Sidecar used by the synthetic embedding provider.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_objects: Option<String>,
    /// Resolved generator spec, echoed for provenance when the scene is
    /// synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<toml::Value>,
    #[serde(default, rename = "frame")]
    pub frames: Vec<FrameEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: u32,
    pub depth: String,
    pub masks: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major camera-to-world rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

/// Ground-truth file: a list of instances with explicit point sets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroundTruthFile {
    #[serde(default, rename = "instance")]
    pub instances: Vec<GtEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtEntry {
    pub instance_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_id: Option<u32>,
    pub center: [f64; 3],
    pub points: Vec<[f64; 3]>,
}

/// Label vocabulary for semantic evaluation and label assignment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LabelFile {
    #[serde(default, rename = "label")]
    pub labels: Vec<LabelEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label_id: u32,
    pub name: String,
}

/// Retrieval ground truth: instruction text and where the answer lives.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QueryFile {
    #[serde(default, rename = "query")]
    pub queries: Vec<QueryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryEntry {
    pub instruction: String,
    pub target_center: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<String>,
}

/// Synthetic-provider sidecar: which object classes each mask shows.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MaskObjectsFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub feature_dim: usize,
    #[serde(default, rename = "mask")]
    pub masks: Vec<MaskObjectsEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskObjectsEntry {
    pub mask_id: u32,
    pub classes: Vec<String>,
}
