use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::consensus::{
    build_pair_table, compute_pair, ConsensusContext, Entity, EntityIndex, PairTable,
};
use crate::error::Result;
use crate::geometry::voxel::{connected_components, containment, overlap_fraction, UnionFind, VoxelSet};
use crate::scalar::Scalar;
use crate::scene::types::SceneDataset;

/// A fused 3D instance: member masks, union cloud, and its two feature
/// slots. The representative feature drives merging; the aggregated feature
/// (filled later by crop pooling) drives retrieval.
#[derive(Debug, Clone)]
pub struct Instance3D<T: Scalar> {
    pub instance_id: u32,
    pub members: Vec<u32>,
    pub cloud: VoxelSet<T>,
    pub representative_feature: Vec<T>,
    pub aggregated_feature: Option<Vec<T>>,
    pub centroid: [T; 3],
    pub label_id: Option<u32>,
    pub aggregation_failed: bool,
}

/// One entity per surviving mask, keyed by mask id.
pub fn initial_entities<T: Scalar>(scene: &SceneDataset<T>) -> BTreeMap<u32, Entity<T>> {
    scene
        .masks
        .iter()
        .map(|(&id, m)| {
            (id, Entity {
                id,
                members: BTreeSet::from([id]),
                cloud: m.cloud.clone(),
                feature: m.feature.clone(),
            })
        })
        .collect()
}

/// Decreasing observer-count thresholds: iteration q takes the value at the
/// top step*(1+q) percent of the pair |O| distribution. Percentile indices
/// are computed in integer arithmetic (step resolved to 0.01%) so boundary
/// cases cannot drift with float rounding. Consecutive duplicates collapse
/// and the walk always terminates at 1, the threshold the pipeline replays
/// until fixpoint.
pub fn observer_threshold_schedule<T: Scalar>(
    observer_counts: &[usize],
    step_percent: T,
) -> Vec<usize> {
    if observer_counts.is_empty() {
        return vec![];
    }
    let mut sorted = observer_counts.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let n = sorted.len() as u64;
    let step_ppm = (step_percent.to_f64_out() * 10_000.0).round() as u64;
    debug_assert!(step_ppm >= 1);
    let mut out: Vec<usize> = Vec::new();
    let mut q = 0u64;
    loop {
        let p_ppm = step_ppm * (q + 1);
        if p_ppm > 1_000_000 {
            break;
        }
        let m = ((p_ppm * n).div_ceil(1_000_000)).clamp(1, n) as usize;
        let v = sorted[m - 1].max(1);
        if out.last() != Some(&v) {
            out.push(v);
        }
        if v == 1 {
            break;
        }
        q += 1;
    }
    if out.last() != Some(&1) {
        out.push(1);
    }
    out
}

/// One merge generation: connected components over the graph whose edges
/// are pairs passing the merge decision with strictly more than `n_o`
/// observers. Returns the new entity set and the ids of entities formed by
/// an actual merge (smallest member id, so ids never collide).
pub fn merge_generation<T: Scalar>(
    entities: &BTreeMap<u32, Entity<T>>,
    table: &PairTable<T>,
    n_o: usize,
    cfg: &PipelineConfig<T>,
) -> (BTreeMap<u32, Entity<T>>, Vec<u32>) {
    let ids: Vec<u32> = entities.keys().copied().collect();
    let slot: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut uf = UnionFind::new(ids.len());
    for (&(a, b), pc) in table {
        if pc.observers.len() > n_o && pc.decision(cfg) {
            uf.union(slot[&a], slot[&b]);
        }
    }
    let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for &id in &ids {
        groups.entry(uf.find(slot[&id])).or_default().push(id);
    }
    let mut next: BTreeMap<u32, Entity<T>> = BTreeMap::new();
    let mut merged_ids: Vec<u32> = Vec::new();
    for group in groups.values() {
        if group.len() == 1 {
            let e = entities[&group[0]].clone();
            next.insert(e.id, e);
            continue;
        }
        let new_id = *group.iter().min().unwrap();
        let mut members = BTreeSet::new();
        let mut cloud = VoxelSet::new(entities[&group[0]].cloud.voxel_size);
        for id in group {
            let e = &entities[id];
            members.extend(e.members.iter().copied());
            cloud.union_with(&e.cloud);
        }
        // Placeholder feature until the representative is recomputed.
        let feature = entities[&new_id].feature.clone();
        next.insert(new_id, Entity { id: new_id, members, cloud, feature });
        merged_ids.push(new_id);
    }
    (next, merged_ids)
}

/// The member mask covering the largest fraction of the entity cloud; ties
/// go to the smallest mask id.
pub fn select_representative<T: Scalar>(
    cloud: &VoxelSet<T>,
    members: &BTreeSet<u32>,
    ctx: &ConsensusContext<T>,
) -> u32 {
    let mut best: Option<(T, u32)> = None;
    for &m in members {
        let cover = containment(cloud, &ctx.mask_clouds[&m]).unwrap_or_else(|_| T::zero());
        best = Some(match best {
            None => (cover, m),
            Some((bc, bm)) => {
                if cover > bc {
                    (cover, m)
                } else {
                    (bc, bm)
                }
            }
        });
    }
    best.expect("entity has at least one member").1
}

/// Post-merge bookkeeping for freshly merged entities: new observers and
/// containing-mask rows, representative features, and recomputed pair
/// entries for every pair touching a merged entity.
pub fn recompute_after_merge<T: Scalar>(
    merged_ids: &[u32],
    entities: &mut BTreeMap<u32, Entity<T>>,
    index: &mut EntityIndex,
    table: &mut PairTable<T>,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> Result<()> {
    let gone: Vec<u32> = index
        .observers
        .keys()
        .copied()
        .filter(|id| !entities.contains_key(id))
        .collect();
    for id in gone {
        index.remove(id);
    }
    let changed: BTreeSet<u32> = merged_ids.iter().copied().collect();
    table.retain(|&(a, b), _| {
        entities.contains_key(&a)
            && entities.contains_key(&b)
            && !changed.contains(&a)
            && !changed.contains(&b)
    });

    index.refresh(merged_ids, entities, ctx, cfg);
    for &id in merged_ids {
        let rep = select_representative(&entities[&id].cloud, &entities[&id].members, ctx);
        let feature = ctx.mask_features[&rep].clone();
        entities.get_mut(&id).unwrap().feature = feature;
    }

    // Pair rows for merged entities, gated the same way as full enumeration:
    // geometric adjacency or a shared containing mask.
    let others: Vec<u32> = entities.keys().copied().collect();
    let mut jobs: BTreeSet<(u32, u32)> = BTreeSet::new();
    for &a in merged_ids {
        let ca = &index.containing[&a];
        for &b in &others {
            if a == b {
                continue;
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if jobs.contains(&key) {
                continue;
            }
            let co_contained = !ca.is_disjoint(&index.containing[&b]);
            if co_contained || entities[&a].cloud.touches_dilated(&entities[&b].cloud) {
                jobs.insert(key);
            }
        }
    }
    let jobs: Vec<(u32, u32)> = jobs.into_iter().collect();
    let rows: Vec<Result<crate::consensus::PairConsensus<T>>> = jobs
        .par_iter()
        .map(|&(a, b)| compute_pair(&entities[&a], &entities[&b], index, ctx, cfg))
        .collect();
    for row in rows {
        let row = row?;
        table.insert(row.pair, row);
    }
    Ok(())
}

fn instance_from_entity<T: Scalar>(e: &Entity<T>, ctx: &ConsensusContext<T>) -> Instance3D<T> {
    let rep = select_representative(&e.cloud, &e.members, ctx);
    Instance3D {
        instance_id: e.id,
        members: e.members.iter().copied().collect(),
        cloud: e.cloud.clone(),
        representative_feature: ctx.mask_features[&rep].clone(),
        aggregated_feature: None,
        centroid: e.cloud.centroid().expect("entity cloud nonempty"),
        label_id: None,
        aggregation_failed: false,
    }
}

/// Drops straddling members, splits disconnected clouds, and discards
/// undersized results. Instance ids are reassigned as the smallest member
/// mask id, keeping them disjoint because members partition.
pub fn postprocess<T: Scalar>(
    instances: Vec<Instance3D<T>>,
    ctx: &ConsensusContext<T>,
    cfg: &PipelineConfig<T>,
) -> Vec<Instance3D<T>> {
    // Under-segmentation filter: a member overlapping a sizable fraction of
    // two or more final instances describes several objects at once and is
    // evidence for none of them. Only instances corroborated by at least two
    // masks count as overlap targets; a single-mask instance is itself an
    // under-segmentation suspect, and letting it indict well-supported
    // members would empty the map whenever one survives merging.
    let straddlers: BTreeSet<u32> = instances
        .iter()
        .flat_map(|i| i.members.iter().copied())
        .filter(|&m| {
            let cloud = &ctx.mask_clouds[&m];
            let mut hits = 0;
            for inst in &instances {
                if inst.members.len() < 2 {
                    continue;
                }
                match overlap_fraction(cloud, &inst.cloud) {
                    Ok(f) if f >= cfg.underseg_fraction => hits += 1,
                    _ => {}
                }
            }
            hits >= 2
        })
        .collect();

    let mut rebuilt: Vec<Instance3D<T>> = Vec::new();
    for inst in instances {
        let members: Vec<u32> =
            inst.members.iter().copied().filter(|m| !straddlers.contains(m)).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() == inst.members.len() {
            rebuilt.push(inst);
            continue;
        }
        let mut cloud = VoxelSet::new(inst.cloud.voxel_size);
        for &m in &members {
            cloud.union_with(&ctx.mask_clouds[&m]);
        }
        if cloud.is_empty() {
            continue;
        }
        let member_set: BTreeSet<u32> = members.iter().copied().collect();
        let rep = select_representative(&cloud, &member_set, ctx);
        rebuilt.push(Instance3D {
            instance_id: *members.iter().min().unwrap(),
            members,
            centroid: cloud.centroid().expect("nonempty"),
            representative_feature: ctx.mask_features[&rep].clone(),
            cloud,
            aggregated_feature: inst.aggregated_feature,
            label_id: inst.label_id,
            aggregation_failed: inst.aggregation_failed,
        });
    }

    // Component split: disconnected clusters become separate instances, each
    // inheriting the parent's features; members follow the component holding
    // most of their cells.
    let mut out: Vec<Instance3D<T>> = Vec::new();
    for inst in rebuilt {
        let comps: Vec<VoxelSet<T>> = connected_components(&inst.cloud)
            .into_iter()
            .filter(|c| c.len() >= cfg.min_component_voxels)
            .collect();
        if comps.is_empty() {
            continue;
        }
        if comps.len() == 1 && comps[0].len() == inst.cloud.len() {
            out.push(inst);
            continue;
        }
        let mut assigned: Vec<Vec<u32>> = vec![Vec::new(); comps.len()];
        for &m in &inst.members {
            let cloud = &ctx.mask_clouds[&m];
            let mut best: Option<(usize, usize)> = None;
            for (ci, comp) in comps.iter().enumerate() {
                let shared = cloud.intersection_count(comp);
                if shared == 0 {
                    continue;
                }
                best = Some(match best {
                    None => (shared, ci),
                    Some((bs, bc)) => {
                        if shared > bs {
                            (shared, ci)
                        } else {
                            (bs, bc)
                        }
                    }
                });
            }
            if let Some((_, ci)) = best {
                assigned[ci].push(m);
            }
        }
        for (comp, members) in comps.into_iter().zip(assigned) {
            if members.is_empty() {
                continue;
            }
            out.push(Instance3D {
                instance_id: *members.iter().min().unwrap(),
                members,
                centroid: comp.centroid().expect("nonempty"),
                cloud: comp,
                representative_feature: inst.representative_feature.clone(),
                aggregated_feature: inst.aggregated_feature.clone(),
                label_id: inst.label_id,
                aggregation_failed: inst.aggregation_failed,
            });
        }
    }

    out.sort_by_key(|i| i.instance_id);
    out
}

/// Full mapping pipeline: pair consensus, scheduled merging to fixpoint,
/// then post-processing. Deterministic for fixed scene and config.
pub fn run_pipeline<T: Scalar>(
    scene: &SceneDataset<T>,
    cfg: &PipelineConfig<T>,
) -> Result<Vec<Instance3D<T>>> {
    let ctx = ConsensusContext::from_scene(scene, cfg);
    let mut entities = initial_entities(scene);
    if entities.is_empty() {
        return Ok(vec![]);
    }
    let mut index = EntityIndex::build(&entities, &ctx, cfg);
    let mut table = build_pair_table(&entities, &index, &ctx, cfg)?;
    if log::log_enabled!(log::Level::Debug) {
        log::debug!("initial pair table:\n{}", crate::consensus::dump_pair_table(&table, cfg));
    }

    let counts: Vec<usize> = table.values().map(|pc| pc.observers.len()).collect();
    let mut schedule = observer_threshold_schedule(&counts, cfg.observer_percentile_step);
    log::info!("observer threshold schedule: {schedule:?}");

    let mut passes = 0usize;
    loop {
        passes += 1;
        let mut merged_any = false;
        for gi in 0..schedule.len() {
            let n_o = schedule[gi];
            let (next, merged_ids) = merge_generation(&entities, &table, n_o, cfg);
            if merged_ids.is_empty() {
                continue;
            }
            merged_any = true;
            entities = next;
            recompute_after_merge(&merged_ids, &mut entities, &mut index, &mut table, &ctx, cfg)?;
            if cfg.reschedule_each_generation {
                let counts: Vec<usize> = table.values().map(|pc| pc.observers.len()).collect();
                schedule = observer_threshold_schedule(&counts, cfg.observer_percentile_step);
                break;
            }
        }
        if !merged_any || passes >= cfg.max_generations {
            break;
        }
    }
    log::info!("merging converged after {passes} passes: {} entities", entities.len());

    let instances: Vec<Instance3D<T>> =
        entities.values().map(|e| instance_from_entity(e, &ctx)).collect();
    Ok(postprocess(instances, &ctx, cfg))
}
