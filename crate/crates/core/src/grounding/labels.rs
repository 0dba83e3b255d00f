use crate::error::Result;
use crate::grounding::TextEmbedder;
use crate::merging::Instance3D;
use crate::scalar::{cosine, Scalar};

/// Label vocabulary with embedded names, for semantic assignment and for
/// naming instances in prompts.
pub struct LabelTable<T: Scalar> {
    pub entries: Vec<(u32, String)>,
    embeddings: Vec<Vec<T>>,
}

impl<T: Scalar> LabelTable<T> {
    pub fn build(
        labels: &crate::scene::manifest::LabelFile,
        embedder: &dyn TextEmbedder<T>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(labels.labels.len());
        let mut embeddings = Vec::with_capacity(labels.labels.len());
        for l in &labels.labels {
            entries.push((l.label_id, l.name.clone()));
            embeddings.push(embedder.embed(&l.name)?);
        }
        Ok(Self { entries, embeddings })
    }

    pub fn name_of(&self, label_id: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|(id, _)| *id == label_id)
            .map(|(_, n)| n.as_str())
    }

    /// Highest cosine similarity between a feature and any label embedding.
    pub fn max_similarity(&self, feature: &[T]) -> Option<T> {
        self.embeddings
            .iter()
            .map(|emb| cosine(feature, emb))
            .fold(None, |acc, c| match acc {
                Some(b) if b >= c => Some(b),
                _ => Some(c),
            })
    }

    /// Best label for a feature: argmax cosine, first entry on exact ties.
    pub fn classify(&self, feature: &[T]) -> Option<u32> {
        let mut best: Option<(T, u32)> = None;
        for ((id, _), emb) in self.entries.iter().zip(&self.embeddings) {
            let c = cosine(feature, emb);
            if best.map_or(true, |(b, _)| c > b) {
                best = Some((c, *id));
            }
        }
        best.map(|(_, id)| id)
    }
}

/// Assigns every instance the label closest to its retrieval feature
/// (aggregated when present, representative otherwise).
pub fn assign_labels<T: Scalar>(instances: &mut [Instance3D<T>], table: &LabelTable<T>) {
    for inst in instances.iter_mut() {
        let feature = inst.aggregated_feature.as_deref().unwrap_or(&inst.representative_feature);
        inst.label_id = table.classify(feature);
    }
}
