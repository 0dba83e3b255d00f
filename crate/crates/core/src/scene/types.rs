use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::voxel::VoxelSet;
use crate::scalar::{normalize, norm, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct CameraIntrinsics<T: Scalar> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > T::zero() && self.fy > T::zero()) {
            return Err(Error::schema("intrinsics: focal lengths must be positive"));
        }
        let w = T::from_u32(self.width).unwrap();
        let h = T::from_u32(self.height).unwrap();
        if !(self.cx >= T::zero() && self.cx < w && self.cy >= T::zero() && self.cy < h) {
            return Err(Error::schema("intrinsics: principal point outside image"));
        }
        Ok(())
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy)]
pub struct Pose<T: Scalar> {
    /// Row-major rotation matrix.
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> Pose<T> {
    pub fn identity() -> Self {
        let z = T::zero();
        let o = T::one();
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z, z, z],
        }
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Checks orthonormality and det = +1 to 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let tol = T::from_f64_cfg(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let mut d = T::zero();
                for k in 0..3 {
                    d = d + r[i][k] * r[j][k];
                }
                let want = if i == j { T::one() } else { T::zero() };
                if (d - want).abs() > tol {
                    return Err(Error::schema("pose: rotation is not orthonormal"));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - T::one()).abs() > tol {
            return Err(Error::schema("pose: rotation determinant is not +1"));
        }
        Ok(())
    }
}

/// One posed depth observation. Depth is row-major, meters, 0 = invalid.
#[derive(Debug, Clone)]
pub struct Frame<T: Scalar> {
    pub frame_id: u32,
    pub intrinsics: CameraIntrinsics<T>,
    pub pose: Pose<T>,
    pub depth: Vec<T>,
    pub mask_ids: Vec<u32>,
}

impl<T: Scalar> Frame<T> {
    pub fn depth_at(&self, u: u32, v: u32) -> T {
        self.depth[(v * self.intrinsics.width + u) as usize]
    }
}

/// A 2D segment: run-length pixel set plus its vision-language feature.
/// `cloud` is filled by back-projection after load.
#[derive(Debug, Clone)]
pub struct Mask2D<T: Scalar> {
    pub mask_id: u32,
    pub frame_id: u32,
    /// (start, length) runs over row-major pixel order, sorted, non-overlapping.
    pub runs: Vec<(u32, u32)>,
    pub feature: Vec<T>,
    pub cloud: VoxelSet<T>,
}

impl<T: Scalar> Mask2D<T> {
    pub fn pixel_count(&self) -> usize {
        self.runs.iter().map(|&(_, l)| l as usize).sum()
    }

    pub fn pixels(&self) -> impl Iterator<Item = u32> + '_ {
        self.runs.iter().flat_map(|&(s, l)| s..s + l)
    }

    /// Tight pixel bounding box as (u_min, v_min, u_max, v_max), inclusive.
    pub fn bbox(&self, width: u32) -> Option<(u32, u32, u32, u32)> {
        let mut out: Option<(u32, u32, u32, u32)> = None;
        for p in self.pixels() {
            let (u, v) = (p % width, p / width);
            out = Some(match out {
                None => (u, v, u, v),
                Some((u0, v0, u1, v1)) => (u0.min(u), v0.min(v), u1.max(u), v1.max(v)),
            });
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthInstance<T: Scalar> {
    pub instance_id: u32,
    pub label_id: Option<u32>,
    /// Points in meters; the voxel-set realization happens at comparison time.
    pub points: Vec<[T; 3]>,
    pub center: [T; 3],
}

impl<T: Scalar> GroundTruthInstance<T> {
    pub fn recomputed_center(points: &[[T; 3]]) -> [T; 3] {
        let n = T::from_usize(points.len()).unwrap();
        let mut c = [T::zero(); 3];
        for p in points {
            for a in 0..3 {
                c[a] = c[a] + p[a];
            }
        }
        for a in 0..3 {
            c[a] = c[a] / n;
        }
        c
    }
}

/// A loaded scene: frames in temporal order, masks keyed by id.
#[derive(Debug, Clone)]
pub struct SceneDataset<T: Scalar> {
    pub frames: Vec<Frame<T>>,
    pub masks: BTreeMap<u32, Mask2D<T>>,
    pub feature_dim: usize,
    /// Masks dropped at load (too few valid-depth pixels or empty cloud).
    pub dropped_masks: Vec<u32>,
}

impl<T: Scalar> SceneDataset<T> {
    pub fn frame(&self, frame_id: u32) -> Option<&Frame<T>> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    pub fn masks_in_frame(&self, frame_id: u32) -> impl Iterator<Item = &Mask2D<T>> {
        self.masks.values().filter(move |m| m.frame_id == frame_id)
    }
}

/// Enforces the unit-norm contract on a raw feature vector: silent accept
/// within 1e-5, renormalize with a warning below 1e-2 deviation, reject
/// beyond that as blob corruption.
pub fn validate_feature<T: Scalar>(feature: &mut [T], what: &str) -> Result<()> {
    let n = norm(feature);
    let dev = (n - T::one()).abs();
    if dev <= T::from_f64_cfg(1e-5) {
        return Ok(());
    }
    if dev < T::from_f64_cfg(1e-2) {
        log::warn!("{what}: feature norm {n} off unit, renormalizing");
        if normalize(feature) {
            return Ok(());
        }
    }
    Err(Error::schema(format!("{what}: feature norm {n} too far from unit")))
}
