pub mod backproject;
pub mod ply;
pub mod voxel;
