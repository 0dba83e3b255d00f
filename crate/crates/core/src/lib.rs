//! Open-vocabulary 3D instance mapping from posed RGB-D mask observations.
//!
//! The pipeline fuses per-frame 2D masks (each carrying a vision-language
//! feature vector) into 3D instances by a structural-semantic consensus
//! rule, aggregates a retrieval feature per instance from multi-level image
//! crops, and grounds free-form instructions to instances through feature
//! ranking, spatial context, and a two-round LLM dialogue. Neural models
//! never run in-process: masks and features are inputs, and embedding/LLM
//! backends hide behind provider traits with file, HTTP, and deterministic
//! synthetic implementations.
//!
//! All numeric work is generic over [`scalar::Scalar`]; `f64` is the
//! default precision used by the CLI and the type aliases below.

pub mod config;
pub mod consensus;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod grounding;
pub mod map_io;
pub mod merging;
pub mod scalar;
pub mod scene;
pub mod synth;

pub use config::{AblationMode, OverlapOver, PipelineConfig, RawConfig};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default-precision aliases. Swap to the f32 family for memory-bound runs.
pub type Config = config::PipelineConfig<f64>;
pub type Scene = scene::types::SceneDataset<f64>;
pub type Instance = merging::Instance3D<f64>;
pub type Voxels = geometry::voxel::VoxelSet<f64>;
pub type GroundTruth = scene::types::GroundTruthInstance<f64>;

pub type ConfigF32 = config::PipelineConfig<f32>;
pub type SceneF32 = scene::types::SceneDataset<f32>;
pub type InstanceF32 = merging::Instance3D<f32>;
pub type VoxelsF32 = geometry::voxel::VoxelSet<f32>;
