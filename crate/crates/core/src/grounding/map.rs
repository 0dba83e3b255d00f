use crate::grounding::kdtree::KdTree;
use crate::merging::Instance3D;
use crate::scalar::{cosine, Scalar};

/// Retrieval view of a built map: instance features plus a centroid index
/// for spatial context queries.
pub struct InstanceMap<T: Scalar> {
    pub instances: Vec<Instance3D<T>>,
    pub feature_dim: usize,
    tree: KdTree<T>,
}

impl<T: Scalar> InstanceMap<T> {
    pub fn new(instances: Vec<Instance3D<T>>, feature_dim: usize) -> Self {
        let tree = KdTree::build(
            instances
                .iter()
                .map(|i| (i.centroid, i.instance_id))
                .collect(),
        );
        Self { instances, feature_dim, tree }
    }

    pub fn index_of(&self, instance_id: u32) -> Option<usize> {
        self.instances.iter().position(|i| i.instance_id == instance_id)
    }

    /// Feature used for retrieval: aggregated when present, representative
    /// otherwise.
    pub fn retrieval_feature(&self, idx: usize) -> &[T] {
        let inst = &self.instances[idx];
        inst.aggregated_feature.as_deref().unwrap_or(&inst.representative_feature)
    }

    /// Top instances by cosine similarity to `feature`, at most `limit`,
    /// descending with instance id breaking exact ties.
    pub fn rank_candidates(&self, feature: &[T], limit: usize) -> Vec<(T, usize)> {
        let mut ranked: Vec<(T, usize)> = (0..self.instances.len())
            .map(|i| (cosine(feature, self.retrieval_feature(i)), i))
            .collect();
        // Instances are stored in ascending id order, so a stable sort keeps
        // the smaller id first on ties.
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarities"));
        ranked.truncate(limit);
        ranked
    }

    /// Up to `count` other instances within `radius` meters of the instance
    /// at `idx`, as (distance, index), closest first, ids breaking ties.
    pub fn spatial_context(&self, idx: usize, radius: T, count: usize) -> Vec<(T, usize)> {
        let me = self.instances[idx].instance_id;
        self.tree
            .within_radius(&self.instances[idx].centroid, radius)
            .into_iter()
            .filter(|&(_, id)| id != me)
            .take(count)
            .map(|(d, id)| (d, self.index_of(id).expect("tree ids come from instances")))
            .collect()
    }
}
