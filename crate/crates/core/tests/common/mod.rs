//! Brute-force reference implementations shared by the integration suites.
//! Every check here recomputes its answer from raw data with plain loops and
//! set math, bypassing the pipeline's indexes, prefilters, and parallelism.

#![allow(dead_code, unused_imports)]

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use instmap::config::{AblationMode, OverlapOver};
use instmap::consensus::{
    build_pair_table, compute_pair, ConsensusContext, Entity, EntityIndex, PairConsensus,
    PairTable,
};
use instmap::eval::{success_rate, EvalGroundTruth, EvalPrediction, RetrievalCase};
use instmap::features::{aggregate_instance, plan_crops, CropRequest, EmbeddingProvider};
use instmap::geometry::backproject::build_clouds;
use instmap::geometry::voxel::{Cell, VoxelSet};
use instmap::merging::{initial_entities, merge_generation, Instance3D};
use instmap::scene::types::{Frame, Mask2D};
use instmap::scene::load_scene;
use instmap::synth::{generate_scene, load_spec};
use instmap::{Config, Scene};

// ---------------------------------------------------------------------------
// Pixel-level back-projection, written against the documented formulas. The
// float expressions match the pipeline's operation for operation, so cell
// sets must agree exactly, not just approximately.

pub fn raw_point(u: u32, v: u32, d: f64, frame: &Frame<f64>) -> [f64; 3] {
    let i = &frame.intrinsics;
    let x = d * (u as f64 - i.cx) / i.fx;
    let y = d * (v as f64 - i.cy) / i.fy;
    let p = [x, y, d];
    let r = &frame.pose.rotation;
    let t = &frame.pose.translation;
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
    ]
}

pub fn raw_cell_of(p: [f64; 3], voxel: f64) -> Cell {
    [
        (p[0] / voxel).floor() as i32,
        (p[1] / voxel).floor() as i32,
        (p[2] / voxel).floor() as i32,
    ]
}

pub fn raw_mask_cells(frame: &Frame<f64>, mask: &Mask2D<f64>, voxel: f64) -> HashSet<Cell> {
    let w = frame.intrinsics.width;
    let mut out = HashSet::new();
    for p in mask.pixels() {
        let d = frame.depth[p as usize];
        if !(d.is_finite() && d > 0.0) {
            continue;
        }
        out.insert(raw_cell_of(raw_point(p % w, p / w, d, frame), voxel));
    }
    out
}

pub fn raw_frame_cells(frame: &Frame<f64>, voxel: f64, stride: usize) -> HashSet<Cell> {
    let i = &frame.intrinsics;
    let stride = stride as u32;
    let mut out = HashSet::new();
    let mut v = 0u32;
    while v < i.height {
        let mut u = 0u32;
        while u < i.width {
            let d = frame.depth[(v * i.width + u) as usize];
            if d.is_finite() && d > 0.0 {
                out.insert(raw_cell_of(raw_point(u, v, d, frame), voxel));
            }
            u += stride;
        }
        v += stride;
    }
    out
}

// ---------------------------------------------------------------------------
// Exhaustive pair consensus over every unordered mask pair.

pub struct OraclePair {
    pub observers: BTreeSet<u32>,
    pub supporters: BTreeSet<u32>,
    pub r_struct: Option<f64>,
    pub r_sem: f64,
    pub decision: bool,
}

/// Fraction of `part` covered by `whole`.
fn covered(part: &HashSet<Cell>, whole: &HashSet<Cell>) -> f64 {
    let inter = part.iter().filter(|c| whole.contains(*c)).count();
    inter as f64 / part.len() as f64
}

pub fn oracle_decision(r_struct: Option<f64>, r_sem: f64, cfg: &Config) -> bool {
    let rs = match r_struct {
        Some(v) => v,
        None => return false,
    };
    let (x, y) = match cfg.ablation {
        AblationMode::None => (rs, r_sem),
        AblationMode::StructuralOnly => (rs, 1.0),
        AblationMode::SemanticOnly => (1.0, r_sem),
    };
    x * y >= cfg.tau_thres
}

pub fn oracle_pair_table(scene: &Scene, cfg: &Config) -> BTreeMap<(u32, u32), OraclePair> {
    assert_eq!(cfg.overlap_over, OverlapOver::Mask, "oracle covers the mask-side fraction only");
    assert!(!cfg.allow_self_support, "oracle excludes self-support");

    let frames: BTreeMap<u32, &Frame<f64>> =
        scene.frames.iter().map(|f| (f.frame_id, f)).collect();
    let volumes: BTreeMap<u32, HashSet<Cell>> = scene
        .frames
        .iter()
        .map(|f| (f.frame_id, raw_frame_cells(f, cfg.voxel_size, cfg.frame_stride)))
        .collect();
    let clouds: BTreeMap<u32, HashSet<Cell>> = scene
        .masks
        .iter()
        .map(|(&id, m)| (id, raw_mask_cells(frames[&m.frame_id], m, cfg.voxel_size)))
        .collect();

    let mut observers: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for (&id, cloud) in &clouds {
        let mut obs = BTreeSet::new();
        for (&fid, vol) in &volumes {
            if !vol.is_empty() && covered(cloud, vol) >= cfg.tau_obs {
                obs.insert(fid);
            }
        }
        observers.insert(id, obs);
    }

    // Containment is pairwise between masks regardless of frame; compute it
    // once so the supporter scan is a set lookup.
    let ids: Vec<u32> = scene.masks.keys().copied().collect();
    let mut containing: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for &a in &ids {
        let mut set = BTreeSet::new();
        for &c in &ids {
            if c != a && covered(&clouds[&a], &clouds[&c]) >= cfg.tau_sub {
                set.insert(c);
            }
        }
        containing.insert(a, set);
    }

    let mut out = BTreeMap::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let obs: BTreeSet<u32> =
                observers[&a].intersection(&observers[&b]).copied().collect();
            let mut sup = BTreeSet::new();
            for c in containing[&a].intersection(&containing[&b]) {
                if *c != a && *c != b {
                    let f = scene.masks[c].frame_id;
                    if obs.contains(&f) {
                        sup.insert(f);
                    }
                }
            }
            let r_struct = if obs.is_empty() {
                None
            } else {
                Some(sup.len() as f64 / obs.len() as f64)
            };
            let fa = &scene.masks[&a].feature;
            let fb = &scene.masks[&b].feature;
            let mut d = 0.0;
            for k in 0..fa.len() {
                d += fa[k] * fb[k];
            }
            let r_sem = d.max(0.0);
            let decision = oracle_decision(r_struct, r_sem, cfg);
            out.insert(
                (a, b),
                OraclePair { observers: obs, supporters: sup, r_struct, r_sem, decision },
            );
        }
    }
    out
}

/// Compares the pipeline's pair records against the exhaustive table on one
/// scene, for every unordered pair including those the candidate prefilter
/// would skip. Returns the number of pairs checked.
pub fn check_consensus_scene(scene: &Scene, cfg: &Config) -> Result<usize, String> {
    let entities = initial_entities(scene);
    let ctx = ConsensusContext::from_scene(scene, cfg);
    let index = EntityIndex::build(&entities, &ctx, cfg);
    let oracle = oracle_pair_table(scene, cfg);

    let ids: Vec<u32> = entities.keys().copied().collect();
    let mut checked = 0usize;
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let want = &oracle[&(a, b)];
            let got = compute_pair(&entities[&a], &entities[&b], &index, &ctx, cfg)
                .map_err(|e| format!("pair ({a},{b}): {e}"))?;
            let swapped = compute_pair(&entities[&b], &entities[&a], &index, &ctx, cfg)
                .map_err(|e| format!("pair ({b},{a}): {e}"))?;

            if got.observers != want.observers {
                return Err(format!(
                    "pair ({a},{b}): observers {:?}, oracle says {:?}",
                    got.observers, want.observers
                ));
            }
            if got.supporters != want.supporters {
                return Err(format!(
                    "pair ({a},{b}): supporters {:?}, oracle says {:?}",
                    got.supporters, want.supporters
                ));
            }
            if !got.supporters.is_subset(&got.observers) {
                return Err(format!("pair ({a},{b}): supporters outside the observer set"));
            }
            match (got.r_struct, want.r_struct) {
                (None, None) => {}
                (Some(x), Some(y)) if (x - y).abs() <= 1e-9 => {}
                (x, y) => return Err(format!("pair ({a},{b}): r_struct {x:?} vs {y:?}")),
            }
            if (got.r_sem - want.r_sem).abs() > 1e-9 {
                return Err(format!("pair ({a},{b}): r_sem {} vs {}", got.r_sem, want.r_sem));
            }
            if swapped.pair != got.pair
                || swapped.observers != got.observers
                || swapped.supporters != got.supporters
                || swapped.r_struct != got.r_struct
                || swapped.r_sem != got.r_sem
            {
                return Err(format!("pair ({a},{b}): record differs when arguments swap"));
            }
            for ablation in
                [AblationMode::None, AblationMode::StructuralOnly, AblationMode::SemanticOnly]
            {
                let mut c = cfg.clone();
                c.ablation = ablation;
                if got.decision(&c) != oracle_decision(want.r_struct, want.r_sem, &c) {
                    return Err(format!("pair ({a},{b}): decision differs under {ablation:?}"));
                }
            }
            checked += 1;
        }
    }

    // Pairs the prefilter drops must be pairs that could never merge.
    let table = build_pair_table(&entities, &index, &ctx, cfg).map_err(|e| e.to_string())?;
    for (&(a, b), want) in &oracle {
        if !table.contains_key(&(a, b)) && (want.decision || !want.supporters.is_empty()) {
            return Err(format!(
                "pair ({a},{b}) skipped by the prefilter despite supporters={} decision={}",
                want.supporters.len(),
                want.decision
            ));
        }
    }
    Ok(checked)
}

// ---------------------------------------------------------------------------
// Merge-partition reference: connected components by breadth-first walk.

pub fn oracle_components(ids: &[u32], edges: &[(u32, u32)]) -> BTreeSet<BTreeSet<u32>> {
    let mut adj: BTreeMap<u32, Vec<u32>> = ids.iter().map(|&i| (i, Vec::new())).collect();
    for &(a, b) in edges {
        adj.get_mut(&a).unwrap().push(b);
        adj.get_mut(&b).unwrap().push(a);
    }
    let mut seen: BTreeSet<u32> = BTreeSet::new();
    let mut out = BTreeSet::new();
    for &start in ids {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = vec![start];
        while let Some(x) = queue.pop() {
            if !comp.insert(x) {
                continue;
            }
            seen.insert(x);
            queue.extend(adj[&x].iter().copied());
        }
        out.insert(comp);
    }
    out
}

/// Builds one random consensus graph, runs a merge generation over it, and
/// compares the resulting partition against the component walk.
pub fn check_merge_graph(case: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0d ^ case.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let n = rng.gen_range(2..=50usize);
    let mut pool: Vec<u32> = (0..300).collect();
    pool.shuffle(&mut rng);
    let mut ids: Vec<u32> = pool[..n].to_vec();
    ids.sort_unstable();

    let entities: BTreeMap<u32, Entity<f64>> = ids
        .iter()
        .map(|&id| {
            (id, Entity {
                id,
                members: BTreeSet::from([id]),
                cloud: VoxelSet::from_cells(0.05, [[id as i32, 0, 0]]),
                feature: vec![1.0],
            })
        })
        .collect();

    let mut table: PairTable<f64> = BTreeMap::new();
    let mut rows: Vec<((u32, u32), usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !rng.gen_bool(0.12) {
                continue;
            }
            let (a, b) = (ids[i], ids[j]);
            let (observers, supporters) = if rng.gen_bool(0.9) {
                let o = rng.gen_range(1..=6usize);
                let obs: BTreeSet<u32> = (0..o as u32).map(|k| 100 + k).collect();
                let s = rng.gen_range(0..=o);
                let sup: BTreeSet<u32> = obs.iter().copied().take(s).collect();
                (obs, sup)
            } else {
                (BTreeSet::new(), BTreeSet::new())
            };
            let r_sem = rng.gen::<f64>();
            let r_struct = if observers.is_empty() {
                None
            } else {
                Some(supporters.len() as f64 / observers.len() as f64)
            };
            rows.push(((a, b), observers.len(), supporters.len(), r_sem));
            table.insert(
                (a, b),
                PairConsensus { pair: (a, b), observers, supporters, r_struct, r_sem },
            );
        }
    }

    let n_o = rng.gen_range(0..=4usize);
    let mut cfg = Config::default();
    cfg.ablation = match case % 3 {
        0 => AblationMode::None,
        1 => AblationMode::StructuralOnly,
        _ => AblationMode::SemanticOnly,
    };

    let (next, merged) = merge_generation(&entities, &table, n_o, &cfg);

    // Re-derive the edge set from the raw counts alone.
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for &((a, b), o, s, r_sem) in &rows {
        if o <= n_o {
            continue;
        }
        let rs = s as f64 / o as f64;
        let pass = match cfg.ablation {
            AblationMode::None => rs * r_sem >= cfg.tau_thres,
            AblationMode::StructuralOnly => rs * 1.0 >= cfg.tau_thres,
            AblationMode::SemanticOnly => 1.0 * r_sem >= cfg.tau_thres,
        };
        if pass {
            edges.push((a, b));
        }
    }

    let want = oracle_components(&ids, &edges);
    let got: BTreeSet<BTreeSet<u32>> = next.values().map(|e| e.members.clone()).collect();
    if got != want {
        return Err(format!(
            "case {case}: partition mismatch (n={n}, n_o={n_o}, edges={}):\n got {got:?}\nwant {want:?}",
            edges.len()
        ));
    }
    let want_merged: BTreeSet<u32> = want
        .iter()
        .filter(|g| g.len() > 1)
        .map(|g| *g.iter().next().unwrap())
        .collect();
    let got_merged: BTreeSet<u32> = merged.iter().copied().collect();
    if got_merged != want_merged {
        return Err(format!("case {case}: merged ids {got_merged:?}, want {want_merged:?}"));
    }
    for e in next.values() {
        if e.id != *e.members.iter().next().unwrap() {
            return Err(format!("case {case}: entity {} is not its smallest member", e.id));
        }
        if e.cloud.len() != e.members.len() {
            return Err(format!("case {case}: entity {} lost or invented cells", e.id));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Average-precision reference: confidence-ordered greedy matching over raw
// cell sets, then the interpolated precision envelope.

pub fn oracle_average_precision(
    preds: &[EvalPrediction<f64>],
    gts: &[EvalGroundTruth<f64>],
    thr: f64,
    class_aware: bool,
) -> f64 {
    if preds.is_empty() || gts.is_empty() {
        return 0.0;
    }
    let pcells: Vec<HashSet<Cell>> =
        preds.iter().map(|p| p.cloud.iter().copied().collect()).collect();
    let gcells: Vec<HashSet<Cell>> =
        gts.iter().map(|g| g.cloud.iter().copied().collect()).collect();

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(preds[a].id.cmp(&preds[b].id))
    });

    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for (rank, &p) in order.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for g in 0..gts.len() {
            if taken[g] {
                continue;
            }
            if class_aware && preds[p].label_id != gts[g].label_id {
                continue;
            }
            let inter = pcells[p].iter().filter(|c| gcells[g].contains(*c)).count();
            let union = pcells[p].len() + gcells[g].len() - inter;
            let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            if iou < thr {
                continue;
            }
            if best.is_none_or(|(bi, _)| iou > bi) {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            tp[rank] = true;
        }
    }

    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    let mut hits = 0usize;
    for (rank, &hit) in tp.iter().enumerate() {
        if hit {
            hits += 1;
        }
        precision.push(hits as f64 / (rank + 1) as f64);
        recall.push(hits as f64 / n_gt);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..precision.len() {
        let dr = recall[i] - prev;
        if dr > 0.0 {
            let env = precision[i..].iter().fold(0.0f64, |m, &p| m.max(p));
            ap += env * dr;
            prev = recall[i];
        }
    }
    ap
}

fn random_block(rng: &mut ChaCha8Rng) -> Vec<Cell> {
    let base = [rng.gen_range(-8..8), rng.gen_range(-8..8), rng.gen_range(-8..8)];
    let dims = [rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=3)];
    let mut cells = Vec::new();
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                cells.push([base[0] + x, base[1] + y, base[2] + z]);
            }
        }
    }
    cells
}

pub fn check_ap_random_cases(seed: u64, cases: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let n_g = rng.gen_range(1..=8usize);
        let n_p = rng.gen_range(1..=8usize);
        let class_aware = rng.gen_bool(0.4);

        let gts: Vec<EvalGroundTruth<f64>> = (0..n_g)
            .map(|i| EvalGroundTruth {
                id: i as u32,
                cloud: VoxelSet::from_cells(0.05, random_block(&mut rng)),
                label_id: if class_aware { Some(rng.gen_range(0..3u32)) } else { None },
            })
            .collect();

        let mut confs: Vec<f64> = Vec::new();
        let preds: Vec<EvalPrediction<f64>> = (0..n_p)
            .map(|i| {
                // Mostly near-copies of some ground truth, so matches at
                // varied IoU actually occur; reused confidences force the
                // id tie-break.
                let cells: Vec<Cell> = if rng.gen_bool(0.6) {
                    let g = rng.gen_range(0..n_g);
                    let shift = [rng.gen_range(-1..=1), rng.gen_range(-1..=1), 0];
                    let mut cs: Vec<Cell> = gts[g]
                        .cloud
                        .iter()
                        .map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]])
                        .collect();
                    if rng.gen_bool(0.5) && cs.len() > 1 {
                        cs.pop();
                    }
                    cs
                } else {
                    random_block(&mut rng)
                };
                let conf = if !confs.is_empty() && rng.gen_bool(0.2) {
                    confs[rng.gen_range(0..confs.len())]
                } else {
                    rng.gen::<f64>()
                };
                confs.push(conf);
                EvalPrediction {
                    id: i as u32,
                    cloud: VoxelSet::from_cells(0.05, cells),
                    confidence: conf,
                    label_id: if class_aware { Some(rng.gen_range(0..3u32)) } else { None },
                }
            })
            .collect();

        for thr in [0.25, 0.5, rng.gen::<f64>() * 0.7 + 0.2] {
            let got = instmap::eval::average_precision(&preds, &gts, thr, class_aware);
            let want = oracle_average_precision(&preds, &gts, thr, class_aware);
            if (got - want).abs() > 1e-9 {
                return Err(format!("case {case} thr {thr}: ap {got} vs reference {want}"));
            }
        }

        // Order-preserving confidence rescale leaves AP untouched.
        let scaled: Vec<EvalPrediction<f64>> = preds
            .iter()
            .map(|p| EvalPrediction { confidence: p.confidence * 4.0, ..p.clone() })
            .collect();
        let base = instmap::eval::average_precision(&preds, &gts, 0.5, class_aware);
        let resc = instmap::eval::average_precision(&scaled, &gts, 0.5, class_aware);
        if base != resc {
            return Err(format!("case {case}: ap moved under confidence rescale"));
        }

        // Loosening the IoU threshold never scores worse.
        let lo = instmap::eval::average_precision(&preds, &gts, 0.25, class_aware);
        let hi = instmap::eval::average_precision(&preds, &gts, 0.75, class_aware);
        if lo + 1e-12 < hi {
            return Err(format!("case {case}: ap(0.25)={lo} < ap(0.75)={hi}"));
        }
    }
    Ok(())
}

pub fn check_ap_hand_cases() -> Result<(), String> {
    let block = |x0: i32, n: i32| {
        VoxelSet::from_cells(0.05, (0..n).map(move |i| [x0 + i, 0, 0]))
    };
    let gt = |id: u32, cloud: VoxelSet<f64>| EvalGroundTruth { id, cloud, label_id: None };
    let pred = |id: u32, cloud: VoxelSet<f64>, conf: f64| EvalPrediction {
        id,
        cloud,
        confidence: conf,
        label_id: None,
    };

    let gts = vec![gt(0, block(0, 4)), gt(1, block(10, 4))];

    // Perfect matches score 1 exactly.
    let perfect = vec![pred(0, block(0, 4), 0.9), pred(1, block(10, 4), 0.8)];
    let ap = instmap::eval::average_precision(&perfect, &gts, 0.5, false);
    if ap != 1.0 {
        return Err(format!("perfect match scored {ap}"));
    }

    // A confident spurious extra ahead of two perfect matches:
    // precision walk 0, 1/2, 2/3 over recall 0, 1/2, 1 gives 2/3.
    let mut spurious = perfect.clone();
    spurious.push(pred(2, block(30, 4), 0.95));
    let got = instmap::eval::average_precision(&spurious, &gts, 0.5, false);
    let want = oracle_average_precision(&spurious, &gts, 0.5, false);
    if (got - want).abs() > 1e-15 || (got - 2.0 / 3.0).abs() > 1e-12 {
        return Err(format!("spurious extra scored {got}, reference {want}, derived 2/3"));
    }

    // A half-overlap extra (IoU 0.4 against the first object) flips with
    // the threshold: it steals the match below 0.4 and turns the perfect
    // runner-up into a false positive.
    let mut partial = perfect.clone();
    partial.push(pred(2, block(0, 2), 0.95));
    for (thr, derived) in [(0.25, 5.0 / 6.0), (0.75, 2.0 / 3.0)] {
        let got = instmap::eval::average_precision(&partial, &gts, thr, false);
        let want = oracle_average_precision(&partial, &gts, thr, false);
        if (got - want).abs() > 1e-15 || (got - derived).abs() > 1e-12 {
            return Err(format!(
                "partial extra at thr {thr} scored {got}, reference {want}, derived {derived}"
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Retrieval success-rate semantics.

pub fn check_sr_boundary() -> Result<(), String> {
    for (d, expect) in [(0.99f64, 100.0), (1.0, 100.0), (1.01, 0.0)] {
        let cases =
            vec![RetrievalCase { attempts: vec![[d, 0.0, 0.0]], gt_center: [0.0, 0.0, 0.0] }];
        let sr = success_rate(&cases, &[1]);
        if (sr[&1] - expect).abs() > 1e-12 {
            return Err(format!("distance {d}: sr {} instead of {expect}", sr[&1]));
        }
    }
    Ok(())
}

pub fn check_sr_monotone(seed: u64, suites: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks = [1usize, 4, 8, 16];
    for suite in 0..suites {
        let n = rng.gen_range(1..=30usize);
        let cases: Vec<RetrievalCase<f64>> = (0..n)
            .map(|_| {
                let attempts = (0..rng.gen_range(0..=20usize))
                    .map(|_| {
                        [
                            rng.gen_range(-3.0..3.0),
                            rng.gen_range(-3.0..3.0),
                            rng.gen_range(-3.0..3.0),
                        ]
                    })
                    .collect();
                let gt_center = [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ];
                RetrievalCase { attempts, gt_center }
            })
            .collect();
        let sr = success_rate(&cases, &ks);
        for w in ks.windows(2) {
            if sr[&w[0]] > sr[&w[1]] + 1e-12 {
                return Err(format!(
                    "suite {suite}: sr_{} = {} exceeds sr_{} = {}",
                    w[0], sr[&w[0]], w[1], sr[&w[1]]
                ));
            }
        }
        for &k in &ks {
            if !(0.0..=100.0).contains(&sr[&k]) {
                return Err(format!("suite {suite}: sr_{k} = {} out of range", sr[&k]));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature-aggregation properties over randomized member subsets.

/// Deterministic per-crop embeddings: each (frame, mask, level) identity owns
/// a fixed unit vector, independent of batch composition or order.
pub struct SeededCropProvider {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider<f64> for SeededCropProvider {
    fn dim(&self) -> usize {
        self.dim
    }
    fn tag(&self) -> String {
        format!("seeded(dim={})", self.dim)
    }
    fn embed(&self, requests: &[CropRequest]) -> instmap::Result<Vec<Vec<f64>>> {
        Ok(requests
            .iter()
            .map(|r| {
                let key = self.seed
                    ^ ((r.frame_id as u64) << 40)
                    ^ ((r.mask_id as u64) << 16)
                    ^ r.level as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                let mut v: Vec<f64> =
                    (0..self.dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for x in v.iter_mut() {
                    *x /= n;
                }
                v
            })
            .collect())
    }
}

fn normalized_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut mean = vec![0.0f64; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows.len() as f64;
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    for m in mean.iter_mut() {
        *m /= n;
    }
    mean
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn check_aggregation(
    scene: &Scene,
    cfg: &Config,
    count: usize,
    seed: u64,
) -> Result<(), String> {
    let provider = SeededCropProvider { dim: scene.feature_dim, seed };
    let mask_ids: Vec<u32> = scene.masks.keys().copied().collect();
    if mask_ids.len() < 6 {
        return Err(format!("scene too small: {} masks", mask_ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa66);

    for k in 0..count {
        let m = rng.gen_range(1..=6usize.min(mask_ids.len()));
        let mut members: Vec<u32> =
            mask_ids.choose_multiple(&mut rng, m).copied().collect();
        let mut cloud = VoxelSet::new(cfg.voxel_size);
        for &id in &members {
            cloud.union_with(&scene.masks[&id].cloud);
        }
        let centroid = cloud.centroid().map_err(|e| e.to_string())?;
        let mut inst = Instance3D {
            instance_id: k as u32,
            members: members.clone(),
            cloud: cloud.clone(),
            representative_feature: scene.masks[&members[0]].feature.clone(),
            aggregated_feature: None,
            centroid,
            label_id: None,
            aggregation_failed: false,
        };
        aggregate_instance(&mut inst, scene, &provider, cfg);
        if inst.aggregation_failed {
            return Err(format!("instance {k}: aggregation failed"));
        }
        let got = inst.aggregated_feature.clone().unwrap();

        let norm = got.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(format!("instance {k}: norm {norm}"));
        }

        let requests = plan_crops(&inst, scene, cfg);
        let rows = provider.embed(&requests).map_err(|e| e.to_string())?;
        let want = normalized_mean(&rows);
        if max_abs_diff(&got, &want) > 1e-6 {
            return Err(format!("instance {k}: mean-pool reference disagrees"));
        }

        // Crop order must not matter.
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        if max_abs_diff(&got, &normalized_mean(&shuffled)) > 1e-7 {
            return Err(format!("instance {k}: sensitive to crop order"));
        }

        // Member list order must not matter either.
        members.reverse();
        let mut reordered = Instance3D { members, ..inst.clone() };
        reordered.aggregated_feature = None;
        aggregate_instance(&mut reordered, scene, &provider, cfg);
        if reordered.aggregated_feature != inst.aggregated_feature {
            return Err(format!("instance {k}: sensitive to member order"));
        }

        // One mask, one level: the single crop embedding comes back as is.
        let mut solo_cfg = cfg.clone();
        solo_cfg.topk_masks = 1;
        solo_cfg.crop_levels = 1;
        let mut solo = inst.clone();
        solo.aggregated_feature = None;
        aggregate_instance(&mut solo, scene, &provider, &solo_cfg);
        let reqs = plan_crops(&solo, scene, &solo_cfg);
        if reqs.len() != 1 {
            return Err(format!("instance {k}: expected one crop, planned {}", reqs.len()));
        }
        let row = provider.embed(&reqs).map_err(|e| e.to_string())?;
        let solo_got = solo.aggregated_feature.ok_or_else(|| format!("instance {k}: no 1x1"))?;
        if max_abs_diff(&solo_got, &row[0]) > 1e-12 {
            return Err(format!("instance {k}: 1-mask 1-level differs from its crop"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic fixture builders.

/// Small indoor arrangement with seed-cycled frame counts, object counts,
/// joint masks, occluders, and depth noise. Stays within 10 frames and 30
/// masks so the exhaustive consensus walk is cheap.
pub fn oracle_scene_spec(seed: u64) -> String {
    let objects = 2 + (seed % 3) as usize;
    let frames = 4 + (seed % 4) as usize;
    let joint = seed % 2 == 0;
    let mut s = format!(
        "seed = {seed}\n\
         frames = {frames}\n\
         feature_dim = 24\n\
         width = 160\n\
         height = 120\n\
         fx = 170.0\n\
         fy = 170.0\n\
         cluster_sigma_deg = 3.0\n\
         depth_noise = {}\n\
         occluder_prob = {}\n\
         joint_mask_prob = {}\n\
         joint_pairs = {}\n",
        if seed % 5 == 0 { 0.002 } else { 0.0 },
        if seed % 3 == 0 { 0.35 } else { 0.0 },
        if joint { 0.5 } else { 0.0 },
        if joint { "[[0, 1]]" } else { "[]" },
    );
    s.push_str(
        "\n[camera]\n\
         kind = \"arc\"\n\
         target = [0.0, 0.0, 0.35]\n\
         radius = 2.9\n\
         height = 1.25\n\
         start_deg = -14.0\n\
         end_deg = 14.0\n",
    );
    let shapes = [
        "center = [-0.65, 0.0, 0.3]\nshape = \"box\"\nsize = [0.5, 0.5, 0.6]\nclass = \"chair\"",
        "center = [0.55, 0.1, 0.25]\nshape = \"box\"\nsize = [0.7, 0.7, 0.5]\nclass = \"table\"",
        "center = [0.0, 1.0, 0.28]\nshape = \"sphere\"\nradius = 0.28\nclass = \"ball\"",
        "center = [-0.15, -1.05, 0.22]\nshape = \"sphere\"\nradius = 0.22\nclass = \"lamp\"",
    ];
    for shape in shapes.iter().take(objects) {
        s.push_str("\n[[object]]\n");
        s.push_str(shape);
        s.push('\n');
    }
    s
}

/// Renders a spec string into `dir/scene` and loads it back with clouds
/// built, ready for the pipeline.
pub fn build_scene(dir: &Path, spec_toml: &str, cfg: &Config) -> Scene {
    std::fs::create_dir_all(dir).unwrap();
    let spec_path = dir.join("spec.toml");
    std::fs::write(&spec_path, spec_toml).unwrap();
    let spec = load_spec(&spec_path).unwrap();
    let scene_dir = dir.join("scene");
    generate_scene(&spec, &scene_dir).unwrap();
    let mut scene = load_scene::<f64>(&scene_dir, cfg).unwrap();
    build_clouds(&mut scene, cfg);
    scene
}
