use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::http::{EMBED_KEY_ENV, EMBED_URL_ENV};
use crate::features::synthetic::SyntheticModel;
use crate::scalar::Scalar;

/// Maps query and label text into the instance feature space. The embedder
/// must share that space (and its dimension) with the map's features or
/// similarity ranking is meaningless; callers enforce the dimension check.
pub trait TextEmbedder<T: Scalar> {
    fn dim(&self) -> usize;
    fn tag(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vec<T>>;
}

/// Text side of the deterministic synthetic model. Seeded identically to the
/// generator of the scene being queried.
pub struct SyntheticTextEmbedder {
    model: SyntheticModel,
}

impl SyntheticTextEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { model: SyntheticModel::new(seed, dim) }
    }

    /// Reads the seed and dimension from the scene's mask-objects sidecar.
    pub fn from_scene(scene_dir: &Path) -> Result<Self> {
        let Some(mo) = crate::scene::scene_mask_objects(scene_dir)? else {
            return Err(Error::provider(format!(
                "{}: scene has no mask-objects sidecar; the synthetic embedder needs one",
                scene_dir.display()
            )));
        };
        Ok(Self::new(mo.seed, mo.feature_dim))
    }
}

impl<T: Scalar> TextEmbedder<T> for SyntheticTextEmbedder {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn tag(&self) -> String {
        format!("synthetic(seed={}, dim={})", self.model.seed, self.model.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<T>> {
        Ok(self.model.embed_text(text))
    }
}

/// Remote text embedder sharing the embedding service with the crop
/// provider: POST {base}/v1/embed_text.
pub struct HttpTextEmbedder {
    base: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct TextRequest<'a> {
    texts: [&'a str; 1],
}

#[derive(Deserialize)]
struct TextResponse {
    embeddings: Vec<Vec<f64>>,
}

impl HttpTextEmbedder {
    pub fn connect(base: Option<&str>) -> Result<Self> {
        let base = match base {
            Some(b) => b.to_string(),
            None => std::env::var(EMBED_URL_ENV).map_err(|_| {
                Error::provider(format!("no embedding endpoint: pass a url or set {EMBED_URL_ENV}"))
            })?,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::provider(format!("http client: {e}")))?;
        let mut e = Self {
            base: base.trim_end_matches('/').to_string(),
            api_key: std::env::var(EMBED_KEY_ENV).ok(),
            dim: 0,
            client,
        };
        let probe = e.call("")?;
        if probe.is_empty() {
            return Err(Error::provider("embedding service reported zero dimension"));
        }
        e.dim = probe.len();
        Ok(e)
    }

    fn call(&self, text: &str) -> Result<Vec<f64>> {
        let url = format!("{}/v1/embed_text", self.base);
        let mut req = self.client.post(&url).json(&TextRequest { texts: [text] });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::provider(format!("{url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::provider(format!("{url}: status {}", resp.status())));
        }
        let parsed: TextResponse = resp
            .json()
            .map_err(|e| Error::provider(format!("{url}: bad response: {e}")))?;
        parsed
            .embeddings
            .into_iter()
            .next()
            .ok_or_else(|| Error::provider(format!("{url}: empty response")))
    }
}

impl<T: Scalar> TextEmbedder<T> for HttpTextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("http({})", self.base)
    }

    fn embed(&self, text: &str) -> Result<Vec<T>> {
        Ok(self.call(text)?.into_iter().map(T::from_f64_cfg).collect())
    }
}
