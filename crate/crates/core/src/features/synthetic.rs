use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::features::{CropRequest, EmbeddingProvider};
use crate::scalar::{normalize, Scalar};

/// FNV-1a, the stable 64-bit hash used to seed per-token generators.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic stand-in for a text/image embedding model. Every token
/// maps to a fixed unit vector drawn from a seeded generator, and a text
/// embeds to the normalized sum of its token vectors, so related texts
/// (sharing tokens) land near each other while unrelated tokens are nearly
/// orthogonal at reasonable dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticModel {
    pub seed: u64,
    pub dim: usize,
}

impl SyntheticModel {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    fn token_vector<T: Scalar>(&self, token: &str) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        let mut v: Vec<T> = (0..self.dim)
            .map(|_| T::from_f64_cfg(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        if !normalize(&mut v) {
            v[0] = T::one();
        }
        v
    }

    /// Lowercased alphanumeric tokens; everything else separates.
    pub fn tokenize(text: &str) -> Vec<String> {
        text.to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn embed_text<T: Scalar>(&self, text: &str) -> Vec<T> {
        let tokens = Self::tokenize(text);
        let mut sum = vec![T::zero(); self.dim];
        if tokens.is_empty() {
            sum = self.token_vector("");
        }
        for t in &tokens {
            let tv: Vec<T> = self.token_vector(t);
            for (s, v) in sum.iter_mut().zip(tv) {
                *s = *s + v;
            }
        }
        if !normalize(&mut sum) {
            sum = self.token_vector("");
        }
        sum
    }

    /// Embedding of a set of object classes shown together (a joint mask):
    /// normalized sum of the class embeddings.
    pub fn embed_classes<T: Scalar>(&self, classes: &[String]) -> Vec<T> {
        let mut sum = vec![T::zero(); self.dim];
        for c in classes {
            let cv: Vec<T> = self.embed_text(c);
            for (s, v) in sum.iter_mut().zip(cv) {
                *s = *s + v;
            }
        }
        if !normalize(&mut sum) {
            sum = self.token_vector("");
        }
        sum
    }
}

/// Crop embedder for generated scenes: a crop around a mask embeds to the
/// combined class embedding of the objects that mask shows, at every level.
/// The seed and dimension come from the scene's mask-objects sidecar, so the
/// vectors live in the same space as the generated mask features.
pub struct SyntheticCropProvider<T: Scalar> {
    model: SyntheticModel,
    classes: BTreeMap<u32, Vec<T>>,
}

impl<T: Scalar> SyntheticCropProvider<T> {
    pub fn from_scene(scene_dir: &Path) -> Result<Self> {
        let Some(mo) = crate::scene::scene_mask_objects(scene_dir)? else {
            return Err(Error::provider(format!(
                "{}: scene has no mask-objects sidecar; the synthetic provider needs one",
                scene_dir.display()
            )));
        };
        let model = SyntheticModel::new(mo.seed, mo.feature_dim);
        let mut classes = BTreeMap::new();
        for m in &mo.masks {
            classes.insert(m.mask_id, model.embed_classes::<T>(&m.classes));
        }
        Ok(Self { model, classes })
    }
}

impl<T: Scalar> EmbeddingProvider<T> for SyntheticCropProvider<T> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn tag(&self) -> String {
        format!("synthetic(seed={}, dim={})", self.model.seed, self.model.dim)
    }

    fn embed(&self, requests: &[CropRequest]) -> Result<Vec<Vec<T>>> {
        requests
            .iter()
            .map(|r| {
                self.classes
                    .get(&r.mask_id)
                    .cloned()
                    .ok_or_else(|| Error::provider(format!("no classes recorded for mask {}", r.mask_id)))
            })
            .collect()
    }
}
