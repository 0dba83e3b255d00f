use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::voxel::VoxelSet;
use crate::scalar::Scalar;

/// Voxel IoU between prediction and ground truth.
pub fn instance_iou<T: Scalar>(pred: &VoxelSet<T>, gt: &VoxelSet<T>) -> Result<T> {
    if pred.is_empty() && gt.is_empty() {
        return Err(Error::domain("IoU of two empty sets"));
    }
    let inter = pred.intersection_count(gt);
    let union = pred.len() + gt.len() - inter;
    Ok(T::from_usize(inter).unwrap() / T::from_usize(union).unwrap())
}

/// One prediction as the matcher sees it: a cell set, a confidence used for
/// greedy ordering, and an optional class label.
#[derive(Debug, Clone)]
pub struct EvalPrediction<T: Scalar> {
    pub id: u32,
    pub cloud: VoxelSet<T>,
    pub confidence: T,
    pub label_id: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct EvalGroundTruth<T: Scalar> {
    pub id: u32,
    pub cloud: VoxelSet<T>,
    pub label_id: Option<u32>,
}

/// IoU matrix plus the greedy ordering inputs, kept separate so the
/// matching protocol stays swappable.
#[derive(Debug, Clone)]
pub struct MatchMatrix<T: Scalar> {
    /// iou[p][g] for prediction p, ground truth g.
    pub iou: Vec<Vec<T>>,
    /// Prediction indices in descending confidence, ties by id ascending.
    pub order: Vec<usize>,
}

pub fn build_match_matrix<T: Scalar>(
    preds: &[EvalPrediction<T>],
    gts: &[EvalGroundTruth<T>],
) -> MatchMatrix<T> {
    let iou = preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| instance_iou(&p.cloud, &g.cloud).unwrap_or_else(|_| T::zero()))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(preds[a].id.cmp(&preds[b].id))
    });
    MatchMatrix { iou, order }
}

/// AP at one IoU threshold: greedy matching in confidence order (each
/// ground truth claimed once, by the best-IoU still-free one), then
/// all-point interpolation of the precision-recall curve.
pub fn average_precision<T: Scalar>(
    preds: &[EvalPrediction<T>],
    gts: &[EvalGroundTruth<T>],
    iou_threshold: T,
    class_aware: bool,
) -> T {
    if preds.is_empty() || gts.is_empty() {
        return T::zero();
    }
    let m = build_match_matrix(preds, gts);
    let mut gt_taken = vec![false; gts.len()];
    // tp[i] records whether the i-th prediction in greedy order matched.
    let mut tp = vec![false; preds.len()];
    for (rank, &p) in m.order.iter().enumerate() {
        let mut best: Option<(T, usize)> = None;
        for (g, taken) in gt_taken.iter().enumerate() {
            if *taken {
                continue;
            }
            if class_aware && preds[p].label_id != gts[g].label_id {
                continue;
            }
            let iou = m.iou[p][g];
            if iou < iou_threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, _)) => iou > bi,
            };
            if better {
                best = Some((iou, g));
            }
        }
        if let Some((_, g)) = best {
            gt_taken[g] = true;
            tp[rank] = true;
        }
    }

    let denom = T::from_usize(gts.len()).unwrap();
    let mut tp_count = 0usize;
    let mut precision = Vec::with_capacity(preds.len());
    let mut recall = Vec::with_capacity(preds.len());
    for (rank, hit) in tp.iter().enumerate() {
        if *hit {
            tp_count += 1;
        }
        precision.push(T::from_usize(tp_count).unwrap() / T::from_usize(rank + 1).unwrap());
        recall.push(T::from_usize(tp_count).unwrap() / denom);
    }
    // All-point interpolation: integrate precision envelope over recall.
    let mut ap = T::zero();
    let mut prev_recall = T::zero();
    for i in 0..precision.len() {
        let max_prec_from_here = precision[i..]
            .iter()
            .fold(T::zero(), |acc, &p| if p > acc { p } else { acc });
        let dr = recall[i] - prev_recall;
        if dr > T::zero() {
            ap = ap + max_prec_from_here * dr;
            prev_recall = recall[i];
        }
    }
    ap
}

/// Class-aware AP averaged over the classes present in ground truth; each
/// class is scored against the predictions claiming that class.
pub fn semantic_average_precision<T: Scalar>(
    preds: &[EvalPrediction<T>],
    gts: &[EvalGroundTruth<T>],
    iou_threshold: T,
) -> T {
    let mut classes: Vec<Option<u32>> = gts.iter().map(|g| g.label_id).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return T::zero();
    }
    let mut sum = T::zero();
    for class in &classes {
        let cp: Vec<EvalPrediction<T>> =
            preds.iter().filter(|p| p.label_id == *class).cloned().collect();
        let cg: Vec<EvalGroundTruth<T>> =
            gts.iter().filter(|g| g.label_id == *class).cloned().collect();
        sum = sum + average_precision(&cp, &cg, iou_threshold, true);
    }
    sum / T::from_usize(classes.len()).unwrap()
}

/// Thresholds 0.50, 0.55, ..., 0.95 built from exact hundredths.
pub fn map_thresholds<T: Scalar>() -> Vec<T> {
    (0..10)
        .map(|i| T::from_usize(50 + 5 * i).unwrap() / T::from_usize(100).unwrap())
        .collect()
}

pub fn mean_average_precision<T: Scalar>(
    preds: &[EvalPrediction<T>],
    gts: &[EvalGroundTruth<T>],
    class_aware: bool,
) -> T {
    let ths = map_thresholds::<T>();
    let mut sum = T::zero();
    for &t in &ths {
        sum = sum
            + if class_aware {
                semantic_average_precision(preds, gts, t)
            } else {
                average_precision(preds, gts, t, false)
            };
    }
    sum / T::from_usize(ths.len()).unwrap()
}

/// Ranked retrieval attempts for one query plus the query's answer center.
#[derive(Debug, Clone)]
pub struct RetrievalCase<T: Scalar> {
    /// Centroids of retrieved instances, best first.
    pub attempts: Vec<[T; 3]>,
    pub gt_center: [T; 3],
}

fn dist<T: Scalar>(a: [T; 3], b: [T; 3]) -> T {
    let mut s = T::zero();
    for i in 0..3 {
        let d = a[i] - b[i];
        s = s + d * d;
    }
    s.sqrt()
}

/// A retrieval attempt succeeds within 1 meter of the ground-truth center,
/// inclusive at exactly 1.0.
pub fn attempt_succeeds<T: Scalar>(centroid: [T; 3], gt_center: [T; 3]) -> bool {
    dist(centroid, gt_center) <= T::one()
}

/// SR and SR_k as percentages over the query set. SR is SR_1.
pub fn success_rate<T: Scalar>(cases: &[RetrievalCase<T>], k_values: &[usize]) -> BTreeMap<usize, T> {
    let mut out = BTreeMap::new();
    if cases.is_empty() {
        for &k in k_values {
            out.insert(k, T::zero());
        }
        return out;
    }
    let n = T::from_usize(cases.len()).unwrap();
    let hundred = T::from_usize(100).unwrap();
    for &k in k_values {
        let hits = cases
            .iter()
            .filter(|c| c.attempts.iter().take(k).any(|&a| attempt_succeeds(a, c.gt_center)))
            .count();
        out.insert(k, T::from_usize(hits).unwrap() / n * hundred);
    }
    out
}
