use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::config::{AblationMode, OverlapOver, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::backproject::backproject_frame;
use crate::geometry::voxel::{containment, overlap_fraction, VoxelSet};
use crate::scalar::{dot, Scalar};
use crate::scene::types::SceneDataset;

/// A mergeable unit: a single mask initially, a merged group later. The id
/// is the smallest member mask id and survives merging deterministically.
#[derive(Debug, Clone)]
pub struct Entity<T: Scalar> {
    pub id: u32,
    pub members: BTreeSet<u32>,
    pub cloud: VoxelSet<T>,
    /// Representative feature used for the semantic rate.
    pub feature: Vec<T>,
}

/// Static per-scene inputs the consensus computations read.
pub struct ConsensusContext<T: Scalar> {
    pub frame_volumes: BTreeMap<u32, VoxelSet<T>>,
    pub mask_clouds: BTreeMap<u32, VoxelSet<T>>,
    pub mask_features: BTreeMap<u32, Vec<T>>,
    pub frame_of_mask: BTreeMap<u32, u32>,
}

impl<T: Scalar> ConsensusContext<T> {
    pub fn from_scene(scene: &SceneDataset<T>, cfg: &PipelineConfig<T>) -> Self {
        let frame_volumes: BTreeMap<u32, VoxelSet<T>> = scene
            .frames
            .par_iter()
            .map(|f| (f.frame_id, backproject_frame(f, cfg.voxel_size, cfg.frame_stride)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        let mask_clouds =
            scene.masks.iter().map(|(&id, m)| (id, m.cloud.clone())).collect();
        let mask_features =
            scene.masks.iter().map(|(&id, m)| (id, m.feature.clone())).collect();
        let frame_of_mask =
            scene.masks.iter().map(|(&id, m)| (id, m.frame_id)).collect();
        Self { frame_volumes, mask_clouds, mask_features, frame_of_mask }
    }
}

/// Frames whose observation volume overlaps the cloud at tau_obs or more,
/// measured over the side the config selects.
pub fn compute_observers<T: Scalar>(
    cloud: &VoxelSet<T>,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for (&frame_id, volume) in &ctx.frame_volumes {
        if volume.is_empty() {
            continue;
        }
        let frac = match cfg.overlap_over {
            OverlapOver::Mask => overlap_fraction(cloud, volume),
            OverlapOver::Frame => overlap_fraction(volume, cloud),
        };
        match frac {
            Ok(f) if f >= cfg.tau_obs => {
                out.insert(frame_id);
            }
            _ => {}
        }
    }
    out
}

/// Masks whose cloud contains at least tau_sub of the given cloud.
pub fn containing_masks<T: Scalar>(
    cloud: &VoxelSet<T>,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for (&mask_id, mask_cloud) in &ctx.mask_clouds {
        if let Ok(f) = containment(cloud, mask_cloud) {
            if f >= cfg.tau_sub {
                out.insert(mask_id);
            }
        }
    }
    out
}

/// Cosine of two unit features, clamped at zero so dissimilar pairs cannot
/// pass the merge product on structure alone.
pub fn semantic_rate<T: Scalar>(f_i: &[T], f_j: &[T]) -> Result<T> {
    if f_i.len() != f_j.len() {
        return Err(Error::domain(format!(
            "feature dimensions differ: {} vs {}",
            f_i.len(),
            f_j.len()
        )));
    }
    Ok(dot(f_i, f_j).max(T::zero()))
}

/// Consensus record for one entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConsensus<T: Scalar> {
    pub pair: (u32, u32),
    pub observers: BTreeSet<u32>,
    pub supporters: BTreeSet<u32>,
    /// None when the pair has no observers (rate undefined, never merges).
    pub r_struct: Option<T>,
    pub r_sem: T,
}

impl<T: Scalar> PairConsensus<T> {
    /// Merge criterion: r_struct * r_sem >= tau_thres, with either rate
    /// forced to 1 under the matching ablation. Unobserved pairs always
    /// refuse.
    pub fn decision(&self, cfg: &PipelineConfig<T>) -> bool {
        let r_struct = match self.r_struct {
            Some(v) => v,
            None => return false,
        };
        let (rs, rm) = match cfg.ablation {
            AblationMode::None => (r_struct, self.r_sem),
            AblationMode::StructuralOnly => (r_struct, T::one()),
            AblationMode::SemanticOnly => (T::one(), self.r_sem),
        };
        rs * rm >= cfg.tau_thres
    }
}

/// Cached per-entity sets the pair table is assembled from.
#[derive(Debug, Clone, Default)]
pub struct EntityIndex {
    pub observers: BTreeMap<u32, BTreeSet<u32>>,
    pub containing: BTreeMap<u32, BTreeSet<u32>>,
}

impl EntityIndex {
    pub fn build<T: Scalar>(
        entities: &BTreeMap<u32, Entity<T>>,
        ctx: &ConsensusContext<T>,
        cfg: &PipelineConfig<T>,
    ) -> Self {
        let rows: Vec<(u32, BTreeSet<u32>, BTreeSet<u32>)> = entities
            .par_iter()
            .map(|(&id, e)| {
                (id, compute_observers(&e.cloud, ctx, cfg), containing_masks(&e.cloud, ctx, cfg))
            })
            .collect();
        let mut index = EntityIndex::default();
        for (id, obs, cont) in rows {
            index.observers.insert(id, obs);
            index.containing.insert(id, cont);
        }
        index
    }

    /// Recomputes the rows of the given entities only.
    pub fn refresh<T: Scalar>(
        &mut self,
        ids: &[u32],
        entities: &BTreeMap<u32, Entity<T>>,
        ctx: &ConsensusContext<T>,
        cfg: &PipelineConfig<T>,
    ) {
        let rows: Vec<(u32, BTreeSet<u32>, BTreeSet<u32>)> = ids
            .par_iter()
            .map(|id| {
                let e = &entities[id];
                (*id, compute_observers(&e.cloud, ctx, cfg), containing_masks(&e.cloud, ctx, cfg))
            })
            .collect();
        for (id, obs, cont) in rows {
            self.observers.insert(id, obs);
            self.containing.insert(id, cont);
        }
    }

    pub fn remove(&mut self, id: u32) {
        self.observers.remove(&id);
        self.containing.remove(&id);
    }
}

/// Supporters of a pair: observer frames holding a mask that contains
/// tau_sub of both clouds. Self-support (the containing mask being a member
/// of either side) is excluded unless configured otherwise.
pub fn compute_supporters<T: Scalar>(
    a: &Entity<T>,
    b: &Entity<T>,
    pair_observers: &BTreeSet<u32>,
    index: &EntityIndex,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> BTreeSet<u32> {
    let ca = &index.containing[&a.id];
    let cb = &index.containing[&b.id];
    let mut out = BTreeSet::new();
    for mask_id in ca.intersection(cb) {
        if !cfg.allow_self_support
            && (a.members.contains(mask_id) || b.members.contains(mask_id))
        {
            continue;
        }
        let frame = ctx.frame_of_mask[mask_id];
        if pair_observers.contains(&frame) {
            out.insert(frame);
        }
    }
    out
}

fn pair_key(a: u32, b: u32) -> (u32, u32) {
    if a < b { (a, b) } else { (b, a) }
}

/// Computes the full consensus record for one pair.
pub fn compute_pair<T: Scalar>(
    a: &Entity<T>,
    b: &Entity<T>,
    index: &EntityIndex,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> Result<PairConsensus<T>> {
    let observers: BTreeSet<u32> =
        index.observers[&a.id].intersection(&index.observers[&b.id]).copied().collect();
    let supporters = compute_supporters(a, b, &observers, index, ctx, cfg);
    debug_assert!(supporters.is_subset(&observers));
    let r_struct = if observers.is_empty() {
        None
    } else {
        Some(
            T::from_usize(supporters.len()).unwrap() / T::from_usize(observers.len()).unwrap(),
        )
    };
    let r_sem = semantic_rate(&a.feature, &b.feature)?;
    Ok(PairConsensus { pair: pair_key(a.id, b.id), observers, supporters, r_struct, r_sem })
}

/// Pairs worth a consensus record: clouds adjacent after one-cell dilation
/// (the cheap geometric gate), plus any pair co-contained in a common mask,
/// which is exactly the condition for a nonempty supporter set. The union
/// loses no pair that could ever merge, since a merge needs r_struct > 0.
pub fn candidate_pairs<T: Scalar>(
    entities: &BTreeMap<u32, Entity<T>>,
    index: &EntityIndex,
) -> BTreeSet<(u32, u32)> {
    let ids: Vec<u32> = entities.keys().copied().collect();
    let mut out: BTreeSet<(u32, u32)> = ids
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &a)| {
            let entities = &entities;
            let ids = &ids;
            ids[i + 1..].iter().filter_map(move |&b| {
                entities[&a]
                    .cloud
                    .touches_dilated(&entities[&b].cloud)
                    .then_some(pair_key(a, b))
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let mut by_mask: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (&eid, masks) in &index.containing {
        for &m in masks {
            by_mask.entry(m).or_default().push(eid);
        }
    }
    for group in by_mask.values() {
        for (i, &a) in group.iter().enumerate() {
            for &b in &group[i + 1..] {
                out.insert(pair_key(a, b));
            }
        }
    }
    out
}

pub type PairTable<T> = BTreeMap<(u32, u32), PairConsensus<T>>;

/// Builds consensus records for every candidate pair, in parallel with a
/// deterministic keyed result.
pub fn build_pair_table<T: Scalar>(
    entities: &BTreeMap<u32, Entity<T>>,
    index: &EntityIndex,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> Result<PairTable<T>> {
    let pairs: Vec<(u32, u32)> = candidate_pairs(entities, index).into_iter().collect();
    let rows: Vec<Result<PairConsensus<T>>> = pairs
        .par_iter()
        .map(|&(a, b)| compute_pair(&entities[&a], &entities[&b], index, ctx, cfg))
        .collect();
    let mut table = PairTable::new();
    for row in rows {
        let row = row?;
        table.insert(row.pair, row);
    }
    Ok(table)
}

/// Flat text dump of the pair table, one record per line, for oracle
/// diffing and debug logging.
pub fn dump_pair_table<T: Scalar>(table: &PairTable<T>, cfg: &PipelineConfig<T>) -> String {
    let mut out = String::new();
    for ((a, b), pc) in table {
        let r_struct = match pc.r_struct {
            Some(v) => format!("{:.9}", v.to_f64_out()),
            None => "undef".to_string(),
        };
        out.push_str(&format!(
            "pair {a} {b} observers={} supporters={} r_struct={} r_sem={:.9} decision={}\n",
            pc.observers.len(),
            pc.supporters.len(),
            r_struct,
            pc.r_sem.to_f64_out(),
            pc.decision(cfg)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PipelineConfig<f64> {
        PipelineConfig::default()
    }

    fn pc(r_struct: Option<f64>, r_sem: f64) -> PairConsensus<f64> {
        PairConsensus {
            pair: (0, 1),
            observers: if r_struct.is_some() { [0u32].into() } else { BTreeSet::new() },
            supporters: BTreeSet::new(),
            r_struct,
            r_sem,
        }
    }

    #[test]
    fn semantic_rate_identical_is_one() {
        let f = vec![0.6f64, 0.8];
        assert!((semantic_rate(&f, &f).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn semantic_rate_orthogonal_is_zero() {
        assert_eq!(semantic_rate(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn semantic_rate_negative_clamps() {
        // dot = -0.2
        let a = [1.0f64, 0.0];
        let b = [-0.2f64, (1.0f64 - 0.04).sqrt()];
        assert_eq!(semantic_rate(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn semantic_rate_dim_mismatch_is_domain_error() {
        assert!(semantic_rate(&[1.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn decision_above_threshold() {
        assert!(pc(Some(1.0), 0.7).decision(&cfg()));
    }

    #[test]
    fn decision_below_threshold() {
        assert!(!pc(Some(1.0), 0.59).decision(&cfg()));
    }

    #[test]
    fn decision_exact_boundary_inclusive() {
        assert!(pc(Some(0.8), 0.75).decision(&cfg()));
    }

    #[test]
    fn decision_unobserved_pair_refuses() {
        let mut c = cfg();
        assert!(!pc(None, 1.0).decision(&c));
        c.ablation = AblationMode::SemanticOnly;
        assert!(!pc(None, 1.0).decision(&c));
        c.ablation = AblationMode::StructuralOnly;
        assert!(!pc(None, 1.0).decision(&c));
    }

    #[test]
    fn ablation_forces_rates() {
        let mut c = cfg();
        c.ablation = AblationMode::StructuralOnly;
        assert!(pc(Some(0.7), 0.0).decision(&c));
        c.ablation = AblationMode::SemanticOnly;
        assert!(pc(Some(0.0), 0.7).decision(&c));
        c.ablation = AblationMode::None;
        assert!(!pc(Some(0.7), 0.0).decision(&c));
    }
}
