//! Synthetic RGB-D scene generator.
//!
//! Renders axis-aligned boxes and spheres into depth maps along a camera
//! path, emits per-frame instance masks with cluster-sampled features, and
//! writes ground truth, labels, queries and the mask-to-class table next to
//! the frames. Everything is driven by one seed; a spec generates the same
//! scene bytes every time.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::synthetic::SyntheticModel;
use crate::geometry::backproject::pixel_to_world;
use crate::geometry::voxel::{Cell, VoxelSet};
use crate::scalar::{dot, normalize, Scalar};
use crate::scene::depth::quantize_depth;
use crate::scene::manifest::{
    GtEntry, GroundTruthFile, LabelEntry, LabelFile, MaskObjectsEntry, MaskObjectsFile,
    QueryEntry, QueryFile,
};
use crate::scene::save::{save_scene, SceneExtras};
use crate::scene::types::{CameraIntrinsics, Frame, Mask2D, Pose, SceneDataset};

fn default_feature_dim() -> usize {
    32
}
fn default_voxel_size() -> f64 {
    0.05
}
fn default_width() -> u32 {
    128
}
fn default_height() -> u32 {
    96
}
fn default_focal() -> f64 {
    160.0
}
fn default_frames() -> usize {
    12
}
fn default_cluster_sigma() -> f64 {
    2.0
}
fn default_min_cluster_angle() -> f64 {
    55.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_voxel_size")]
    pub voxel_size: f64,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_focal")]
    pub fx: f64,
    #[serde(default = "default_focal")]
    pub fy: f64,
    /// Principal point; defaults to the image center.
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Depth noise sigma in meters, applied before millimeter quantization.
    #[serde(default)]
    pub depth_noise: f64,
    /// Angular sigma (degrees) of per-mask feature samples around their
    /// object's cluster center.
    #[serde(default = "default_cluster_sigma")]
    pub cluster_sigma_deg: f64,
    /// Minimum pairwise angle (degrees) between cluster centers of distinct
    /// classes. Violations are a config error: clusters must stay separable.
    #[serde(default = "default_min_cluster_angle")]
    pub min_cluster_angle_deg: f64,
    /// Per-frame probability of a transient slab between camera and scene.
    /// Occluders shape depth but get no mask and no ground truth.
    #[serde(default)]
    pub occluder_prob: f64,
    /// Per-frame probability that an eligible pair renders as one joint
    /// under-segmented mask instead of two clean ones.
    #[serde(default)]
    pub joint_mask_prob: f64,
    /// Object index pairs eligible for joint masks.
    #[serde(default)]
    pub joint_pairs: Vec<[usize; 2]>,
    pub camera: CameraSpec,
    #[serde(rename = "object")]
    pub objects: Vec<ObjectSpec>,
    #[serde(default, rename = "query")]
    pub queries: Vec<QuerySpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CameraSpec {
    /// Full circle around `target` at `radius`, eye raised by `height`.
    /// Frame angles cover [0, 360) without repeating the endpoint.
    Orbit {
        target: [f64; 3],
        radius: f64,
        height: f64,
    },
    /// Partial sweep, endpoints inclusive.
    Arc {
        target: [f64; 3],
        radius: f64,
        height: f64,
        start_deg: f64,
        end_deg: f64,
    },
    /// Explicit eye positions. Frame count follows the list, ignoring
    /// `frames`. `targets`, when given, pairs up with `eyes`; otherwise every
    /// frame looks at the shared `target`.
    Waypoints {
        target: [f64; 3],
        eyes: Vec<[f64; 3]>,
        #[serde(default)]
        targets: Vec<[f64; 3]>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "shape")]
pub enum ObjectShape {
    Box { size: [f64; 3] },
    Sphere { radius: f64 },
}

// No deny_unknown_fields here: the flattened shape tag needs the leftovers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub center: [f64; 3],
    #[serde(flatten)]
    pub shape: ObjectShape,
    pub class: String,
    /// Blend factor in [0, 1) pulling this object's cluster center away from
    /// the pure class embedding toward an object-specific direction. Lets two
    /// objects of one class rank differently against a class query.
    #[serde(default)]
    pub feature_blur: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub instruction: String,
    pub target_object: usize,
}

pub fn load_spec(path: &Path) -> Result<SyntheticSceneSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::load(path, &format!("cannot read spec: {e}")))?;
    let spec: SyntheticSceneSpec =
        toml::from_str(&text).map_err(|e| Error::load(path, &format!("bad spec: {e}")))?;
    validate_spec(&spec)?;
    Ok(spec)
}

fn validate_spec(spec: &SyntheticSceneSpec) -> Result<()> {
    if spec.objects.is_empty() {
        return Err(Error::config("scene needs at least one object"));
    }
    if spec.feature_dim == 0 {
        return Err(Error::config("feature_dim must be positive"));
    }
    if spec.voxel_size <= 0.0 {
        return Err(Error::config("voxel_size must be positive"));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::config("image dimensions must be positive"));
    }
    if spec.fx <= 0.0 || spec.fy <= 0.0 {
        return Err(Error::config("focal lengths must be positive"));
    }
    let frames = match &spec.camera {
        CameraSpec::Waypoints { eyes, targets, .. } => {
            if !targets.is_empty() && targets.len() != eyes.len() {
                return Err(Error::config("waypoint targets must pair up with eyes"));
            }
            eyes.len()
        }
        _ => spec.frames,
    };
    if frames == 0 {
        return Err(Error::config("camera path has no frames"));
    }
    if !(0.0..=1.0).contains(&spec.occluder_prob) || !(0.0..=1.0).contains(&spec.joint_mask_prob) {
        return Err(Error::config("probabilities must lie in [0, 1]"));
    }
    if spec.cluster_sigma_deg < 0.0 {
        return Err(Error::config("cluster_sigma_deg must be non-negative"));
    }
    for (i, o) in spec.objects.iter().enumerate() {
        if !(0.0..1.0).contains(&o.feature_blur) {
            return Err(Error::config(&format!(
                "object {i}: feature_blur must lie in [0, 1)"
            )));
        }
        if o.class.trim().is_empty() {
            return Err(Error::config(&format!("object {i}: empty class")));
        }
        match &o.shape {
            ObjectShape::Box { size } => {
                if size.iter().any(|&s| s <= 0.0) {
                    return Err(Error::config(&format!("object {i}: box size must be positive")));
                }
            }
            ObjectShape::Sphere { radius } => {
                if *radius <= 0.0 {
                    return Err(Error::config(&format!("object {i}: radius must be positive")));
                }
            }
        }
    }
    for p in &spec.joint_pairs {
        if p[0] == p[1] || p[0] >= spec.objects.len() || p[1] >= spec.objects.len() {
            return Err(Error::config("joint_pairs entries must name two distinct objects"));
        }
    }
    for q in &spec.queries {
        if q.target_object >= spec.objects.len() {
            return Err(Error::config("query targets unknown object"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Solid {
    Aabb { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Solid {
    fn from_object(o: &ObjectSpec) -> Self {
        match &o.shape {
            ObjectShape::Box { size } => Solid::Aabb {
                min: [
                    o.center[0] - size[0] / 2.0,
                    o.center[1] - size[1] / 2.0,
                    o.center[2] - size[2] / 2.0,
                ],
                max: [
                    o.center[0] + size[0] / 2.0,
                    o.center[1] + size[1] / 2.0,
                    o.center[2] + size[2] / 2.0,
                ],
            },
            ObjectShape::Sphere { radius } => Solid::Sphere {
                center: o.center,
                radius: *radius,
            },
        }
    }

    /// Smallest positive ray parameter, if the ray hits. The direction is
    /// not normalized; with camera rays scaled so dir.z_cam == 1 the returned
    /// t is exactly the camera-space depth.
    fn hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Solid::Aabb { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if dir[a].abs() < EPS {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let mut t0 = (min[a] - origin[a]) / dir[a];
                    let mut t1 = (max[a] - origin[a]) / dir[a];
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > EPS {
                    Some(t_near)
                } else if t_far > EPS {
                    Some(t_far)
                } else {
                    None
                }
            }
            Solid::Sphere { center, radius } => {
                let oc = [
                    origin[0] - center[0],
                    origin[1] - center[1],
                    origin[2] - center[2],
                ];
                let a = dot(&dir[..], &dir[..]);
                let b = 2.0 * dot(&oc[..], &dir[..]);
                let c = dot(&oc[..], &oc[..]) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm3(v: [f64; 3]) -> f64 {
    dot(&v[..], &v[..]).sqrt()
}

fn unit3(v: [f64; 3]) -> [f64; 3] {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Camera-to-world pose looking from `eye` toward `target`, x right,
/// y down, z forward.
fn look_at<T: Scalar>(eye: [f64; 3], target: [f64; 3]) -> Pose<T> {
    let forward = unit3([
        target[0] - eye[0],
        target[1] - eye[1],
        target[2] - eye[2],
    ]);
    let mut up = [0.0, 0.0, 1.0];
    if dot(&forward[..], &up[..]).abs() > 0.999 {
        up = [0.0, 1.0, 0.0];
    }
    let right = unit3(cross(forward, up));
    let down = cross(forward, right);
    let mut rotation = [[T::zero(); 3]; 3];
    for i in 0..3 {
        rotation[i][0] = T::from_f64_cfg(right[i]);
        rotation[i][1] = T::from_f64_cfg(down[i]);
        rotation[i][2] = T::from_f64_cfg(forward[i]);
    }
    Pose {
        rotation,
        translation: [
            T::from_f64_cfg(eye[0]),
            T::from_f64_cfg(eye[1]),
            T::from_f64_cfg(eye[2]),
        ],
    }
}

fn camera_path(spec: &SyntheticSceneSpec) -> Vec<([f64; 3], [f64; 3])> {
    match &spec.camera {
        CameraSpec::Orbit {
            target,
            radius,
            height,
        } => {
            let n = spec.frames;
            (0..n)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    let eye = [
                        target[0] + radius * a.cos(),
                        target[1] + radius * a.sin(),
                        target[2] + height,
                    ];
                    (eye, *target)
                })
                .collect()
        }
        CameraSpec::Arc {
            target,
            radius,
            height,
            start_deg,
            end_deg,
        } => {
            let n = spec.frames;
            (0..n)
                .map(|i| {
                    let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                    let a = (start_deg + f * (end_deg - start_deg)).to_radians();
                    let eye = [
                        target[0] + radius * a.cos(),
                        target[1] + radius * a.sin(),
                        target[2] + height,
                    ];
                    (eye, *target)
                })
                .collect()
        }
        CameraSpec::Waypoints {
            target,
            eyes,
            targets,
        } => eyes
            .iter()
            .enumerate()
            .map(|(i, &eye)| (eye, if targets.is_empty() { *target } else { targets[i] }))
            .collect(),
    }
}

/// Per-object unit cluster center: the class embedding, optionally blended
/// with a seeded object-specific direction by `feature_blur`.
fn cluster_centers(spec: &SyntheticSceneSpec, model: &SyntheticModel) -> Result<Vec<Vec<f64>>> {
    let mut centers = Vec::with_capacity(spec.objects.len());
    for (i, o) in spec.objects.iter().enumerate() {
        let mut c: Vec<f64> = model.embed_text(&o.class);
        if o.feature_blur > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0b1ec7 ^ (i as u64) << 32);
            let mut dir: Vec<f64> = (0..spec.feature_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            normalize(&mut dir);
            for (cv, dv) in c.iter_mut().zip(&dir) {
                *cv = (1.0 - o.feature_blur) * *cv + o.feature_blur * dv;
            }
            if !normalize(&mut c) {
                return Err(Error::config("feature_blur collapsed a cluster center"));
            }
        }
        centers.push(c);
    }
    // Separability: distinct classes must keep their centers apart, both by
    // the configured floor and by twice the sampling sigma.
    let min_angle = spec
        .min_cluster_angle_deg
        .max(2.0 * spec.cluster_sigma_deg)
        .to_radians();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if spec.objects[i].class == spec.objects[j].class {
                continue;
            }
            let cosv = dot(&centers[i], &centers[j]).clamp(-1.0, 1.0);
            if cosv.acos() < min_angle {
                return Err(Error::config(&format!(
                    "cluster centers for '{}' and '{}' are {:.1} degrees apart, below the {:.1} degree separability floor; change classes or seed",
                    spec.objects[i].class,
                    spec.objects[j].class,
                    cosv.acos().to_degrees(),
                    min_angle.to_degrees()
                )));
            }
        }
    }
    Ok(centers)
}

fn sample_feature<T: Scalar>(center: &[f64], sigma_rad: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut dir: Vec<f64> = (0..center.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(&mut dir);
    let mut v: Vec<f64> = center
        .iter()
        .zip(&dir)
        .map(|(c, d)| c + sigma_rad * d)
        .collect();
    if !normalize(&mut v) {
        v = center.to_vec();
    }
    v.into_iter().map(T::from_f64_cfg).collect()
}

struct RenderedFrame {
    /// Winner object index per pixel, after occluders. usize::MAX = none.
    winner: Vec<usize>,
    /// Quantized noisy depth in meters, what the frame file will contain.
    depth_m: Vec<f64>,
    /// Quantized noiseless, occluder-free depth per object pixel, for
    /// ground truth accumulation. Keyed like `winner_clean`.
    clean_depth_m: Vec<f64>,
    winner_clean: Vec<usize>,
    pose: Pose<f64>,
}

const OCCLUDER_ID: usize = usize::MAX - 1;
const NO_HIT: usize = usize::MAX;

#[allow(clippy::too_many_arguments)]
fn render_frame(
    spec: &SyntheticSceneSpec,
    intr: &CameraIntrinsics<f64>,
    solids: &[Solid],
    occluder: Option<Solid>,
    eye: [f64; 3],
    target: [f64; 3],
    noise_rng: &mut ChaCha8Rng,
) -> RenderedFrame {
    let pose = look_at::<f64>(eye, target);
    let w = spec.width as usize;
    let h = spec.height as usize;
    let mut winner = vec![NO_HIT; w * h];
    let mut winner_clean = vec![NO_HIT; w * h];
    let mut depth_m = vec![0.0f64; w * h];
    let mut clean_depth_m = vec![0.0f64; w * h];
    for v in 0..h {
        for u in 0..w {
            let dir_cam = [
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            ];
            let dir_world = pose.apply(dir_cam);
            let dir = [
                dir_world[0] - eye[0],
                dir_world[1] - eye[1],
                dir_world[2] - eye[2],
            ];
            let mut best = f64::INFINITY;
            let mut best_id = NO_HIT;
            for (i, s) in solids.iter().enumerate() {
                if let Some(t) = s.hit(eye, dir) {
                    if t < best {
                        best = t;
                        best_id = i;
                    }
                }
            }
            let idx = v * w + u;
            if best_id != NO_HIT {
                winner_clean[idx] = best_id;
                clean_depth_m[idx] = quantize_depth(best);
            }
            if let Some(occ) = occluder {
                if let Some(t) = occ.hit(eye, dir) {
                    if t < best {
                        best = t;
                        best_id = OCCLUDER_ID;
                    }
                }
            }
            if best_id != NO_HIT {
                let mut d = best;
                if spec.depth_noise > 0.0 {
                    d += spec.depth_noise * noise_rng.sample::<f64, _>(StandardNormal);
                }
                let q = quantize_depth(d);
                if q > 0.0 {
                    winner[idx] = best_id;
                    depth_m[idx] = q;
                }
            }
        }
    }
    RenderedFrame {
        winner,
        depth_m,
        clean_depth_m,
        winner_clean,
        pose,
    }
}

/// Renders the scene and writes it under `out_dir`. Returns the number of
/// masks emitted.
pub fn generate_scene(spec: &SyntheticSceneSpec, out_dir: &Path) -> Result<usize> {
    validate_spec(spec)?;
    let model = SyntheticModel::new(spec.seed, spec.feature_dim);
    let centers = cluster_centers(spec, &model)?;
    let sigma_rad = spec.cluster_sigma_deg.to_radians();

    let cx = spec.cx.unwrap_or(spec.width as f64 / 2.0);
    let cy = spec.cy.unwrap_or(spec.height as f64 / 2.0);
    let intr = CameraIntrinsics {
        fx: spec.fx,
        fy: spec.fy,
        cx,
        cy,
        width: spec.width,
        height: spec.height,
    };
    intr.validate()?;
    let path = camera_path(spec);
    let solids: Vec<Solid> = spec.objects.iter().map(Solid::from_object).collect();

    let mut rng_occ = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0cc1);
    let mut rng_joint = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x901e7);
    let mut rng_noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xd0153);
    let mut rng_feat = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xfea7);

    let w = spec.width as usize;
    let mut frames = Vec::with_capacity(path.len());
    let mut masks: BTreeMap<u32, Mask2D<f64>> = BTreeMap::new();
    let mut mask_classes: Vec<MaskObjectsEntry> = Vec::new();
    let mut gt_cells: Vec<VoxelSet<f64>> = spec
        .objects
        .iter()
        .map(|_| VoxelSet::new(spec.voxel_size))
        .collect();
    let mut next_mask_id: u32 = 0;

    for (frame_idx, &(eye, target)) in path.iter().enumerate() {
        let occluder = if spec.occluder_prob > 0.0 && rng_occ.gen_bool(spec.occluder_prob) {
            let lx: f64 = rng_occ.gen_range(-0.5..0.5);
            let lz: f64 = rng_occ.gen_range(-0.3..0.3);
            let c = [
                eye[0] + 0.35 * (target[0] - eye[0]) + lx,
                eye[1] + 0.35 * (target[1] - eye[1]) + lx * 0.5,
                eye[2] + 0.35 * (target[2] - eye[2]) + lz,
            ];
            Some(Solid::Aabb {
                min: [c[0] - 0.25, c[1] - 0.25, c[2] - 0.25],
                max: [c[0] + 0.25, c[1] + 0.25, c[2] + 0.25],
            })
        } else {
            if spec.occluder_prob > 0.0 {
                // Keep the draw sequence aligned whether or not a slab lands.
                let _ = (rng_occ.gen_range(-0.5..0.5f64), rng_occ.gen_range(-0.3..0.3f64));
            }
            None
        };

        let rendered = render_frame(spec, &intr, &solids, occluder, eye, target, &mut rng_noise);

        // Ground truth accumulates from the clean render regardless of
        // occluders or noise.
        for (idx, &wi) in rendered.winner_clean.iter().enumerate() {
            if wi == NO_HIT {
                continue;
            }
            let (u, v) = ((idx % w) as u32, (idx / w) as u32);
            let d = rendered.clean_depth_m[idx];
            if d <= 0.0 {
                continue;
            }
            let p = pixel_to_world(u, v, d, &intr, &rendered.pose);
            gt_cells[wi].insert_point(p);
        }

        let mut winner_px = vec![0usize; spec.objects.len()];
        for &wi in &rendered.winner {
            if wi != NO_HIT {
                winner_px[wi] += 1;
            }
        }

        // Joint-mask decisions draw in pair order every frame, whether or not
        // they land, so the sequence stays aligned across specs. A pair only
        // fuses when both members are actually on screen; an off-frame
        // partner leaves the visible one to its own mask.
        let mut joint_active: Vec<bool> = Vec::with_capacity(spec.joint_pairs.len());
        for p in &spec.joint_pairs {
            let drawn = spec.joint_mask_prob > 0.0 && rng_joint.gen_bool(spec.joint_mask_prob);
            joint_active.push(drawn && winner_px[p[0]] > 0 && winner_px[p[1]] > 0);
        }
        // Object index -> joint pair slot that swallows it this frame.
        let mut joined: BTreeMap<usize, usize> = BTreeMap::new();
        for (pi, p) in spec.joint_pairs.iter().enumerate() {
            if joint_active[pi] && !joined.contains_key(&p[0]) && !joined.contains_key(&p[1]) {
                joined.insert(p[0], pi);
                joined.insert(p[1], pi);
            }
        }

        let mut frame_mask_ids = Vec::new();
        for oi in 0..spec.objects.len() {
            let unit: Vec<usize> = match joined.get(&oi) {
                Some(&pi) => {
                    let pair = spec.joint_pairs[pi];
                    if oi != pair[0].min(pair[1]) {
                        continue; // emitted with its partner
                    }
                    vec![pair[0], pair[1]]
                }
                None => vec![oi],
            };
            let mut pixels: Vec<u32> = Vec::new();
            for (idx, &wi) in rendered.winner.iter().enumerate() {
                if unit.contains(&wi) {
                    pixels.push(idx as u32);
                }
            }
            if pixels.is_empty() {
                continue;
            }
            let runs = crate::scene::rle::runs_from_pixels(&pixels);
            let mut classes: Vec<String> =
                unit.iter().map(|&i| spec.objects[i].class.clone()).collect();
            classes.dedup();
            let feature: Vec<f64> = if unit.len() == 1 {
                sample_feature(&centers[unit[0]], sigma_rad, &mut rng_feat)
            } else {
                let mut sum = vec![0.0f64; spec.feature_dim];
                for &i in &unit {
                    for (s, c) in sum.iter_mut().zip(&centers[i]) {
                        *s += c;
                    }
                }
                if !normalize(&mut sum) {
                    sum = centers[unit[0]].clone();
                }
                sample_feature(&sum, sigma_rad, &mut rng_feat)
            };
            let id = next_mask_id;
            next_mask_id += 1;
            masks.insert(
                id,
                Mask2D {
                    mask_id: id,
                    frame_id: frame_idx as u32,
                    runs,
                    feature,
                    cloud: VoxelSet::new(spec.voxel_size),
                },
            );
            mask_classes.push(MaskObjectsEntry {
                mask_id: id,
                classes,
            });
            frame_mask_ids.push(id);
        }

        frames.push(Frame {
            frame_id: frame_idx as u32,
            intrinsics: intr.clone(),
            pose: rendered.pose,
            depth: rendered.depth_m,
            mask_ids: frame_mask_ids,
        });
    }

    let mask_count = masks.len();
    if mask_count == 0 {
        return Err(Error::config("no object is visible from the camera path"));
    }

    let ground_truth = GroundTruthFile {
        instances: spec
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| !gt_cells[*i].is_empty())
            .map(|(i, o)| {
                let points: Vec<[f64; 3]> = gt_cells[i]
                    .sorted_cells()
                    .into_iter()
                    .map(|c: Cell| {
                        [
                            (c[0] as f64 + 0.5) * spec.voxel_size,
                            (c[1] as f64 + 0.5) * spec.voxel_size,
                            (c[2] as f64 + 0.5) * spec.voxel_size,
                        ]
                    })
                    .collect();
                let n = points.len() as f64;
                let mut center = [0.0f64; 3];
                for p in &points {
                    for a in 0..3 {
                        center[a] += p[a];
                    }
                }
                for c in center.iter_mut() {
                    *c /= n;
                }
                GtEntry {
                    instance_id: i as u32,
                    label_id: Some(class_label_id(spec, &o.class)),
                    center,
                    points,
                }
            })
            .collect(),
    };
    for (i, o) in spec.objects.iter().enumerate() {
        if gt_cells[i].is_empty() {
            return Err(Error::config(&format!(
                "object {i} ('{}') is never visible; fix the camera path",
                o.class
            )));
        }
    }

    let labels = LabelFile {
        labels: label_table(spec)
            .into_iter()
            .map(|(label_id, name)| LabelEntry { label_id, name })
            .collect(),
    };

    let queries = if spec.queries.is_empty() {
        None
    } else {
        Some(QueryFile {
            queries: spec
                .queries
                .iter()
                .map(|q| {
                    let gi = &ground_truth.instances[gt_index(&ground_truth, q.target_object)];
                    QueryEntry {
                        instruction: q.instruction.clone(),
                        target_center: gi.center,
                        target_class: Some(spec.objects[q.target_object].class.clone()),
                    }
                })
                .collect(),
        })
    };

    let mask_objects = MaskObjectsFile {
        seed: spec.seed,
        feature_dim: spec.feature_dim,
        masks: mask_classes,
    };

    let dataset = SceneDataset {
        frames,
        masks,
        feature_dim: spec.feature_dim,
        dropped_masks: Vec::new(),
    };
    let generator = toml::Value::try_from(spec)
        .map_err(|e| Error::config(&format!("cannot serialize generator spec: {e}")))?;
    let extras = SceneExtras {
        ground_truth: Some(ground_truth),
        labels: Some(labels),
        queries,
        mask_objects: Some(mask_objects),
        generator: Some(generator),
    };
    save_scene(&dataset, out_dir, &extras)?;
    Ok(mask_count)
}

/// Labels are the distinct classes in first-appearance order.
pub fn label_table(spec: &SyntheticSceneSpec) -> Vec<(u32, String)> {
    let mut out: Vec<(u32, String)> = Vec::new();
    for o in &spec.objects {
        if !out.iter().any(|(_, n)| n == &o.class) {
            out.push((out.len() as u32, o.class.clone()));
        }
    }
    out
}

fn class_label_id(spec: &SyntheticSceneSpec, class: &str) -> u32 {
    label_table(spec)
        .into_iter()
        .find(|(_, n)| n == class)
        .map(|(id, _)| id)
        .expect("class is in the table by construction")
}

fn gt_index(gt: &GroundTruthFile, object_index: usize) -> usize {
    gt.instances
        .iter()
        .position(|g| g.instance_id == object_index as u32)
        .expect("query targets were validated against visibility")
}
