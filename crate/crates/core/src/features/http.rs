use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CropRequest, EmbeddingProvider};
use crate::scalar::Scalar;

pub const EMBED_URL_ENV: &str = "INSTMAP_EMBED_BASE_URL";
pub const EMBED_KEY_ENV: &str = "INSTMAP_EMBED_API_KEY";

/// Remote crop embedder. POSTs crop references to `{base}/v1/embed` and
/// expects one embedding per crop back; the first response fixes the
/// dimension for the whole map.
pub struct HttpProvider {
    base: String,
    api_key: Option<String>,
    dim: usize,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    crops: Vec<CropWire<'a>>,
}

#[derive(Serialize)]
struct CropWire<'a> {
    frame_id: u32,
    mask_id: u32,
    level: u32,
    #[serde(rename = "box")]
    bbox: &'a [u32; 4],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

impl HttpProvider {
    /// `base` falls back to INSTMAP_EMBED_BASE_URL. The provider probes the
    /// service once to learn its dimension.
    pub fn connect(base: Option<&str>) -> Result<Self> {
        let base = match base {
            Some(b) => b.to_string(),
            None => std::env::var(EMBED_URL_ENV).map_err(|_| {
                Error::provider(format!("no embedding endpoint: pass a url or set {EMBED_URL_ENV}"))
            })?,
        };
        let api_key = std::env::var(EMBED_KEY_ENV).ok();
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| Error::provider(format!("http client: {e}")))?;
        let mut p = Self {
            base: base.trim_end_matches('/').to_string(),
            api_key,
            dim: 0,
            client,
        };
        let probe = p.call(&[CropRequest { frame_id: 0, mask_id: 0, level: 0, bbox: [0, 0, 0, 0] }])?;
        let dim = probe.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::provider("embedding service reported zero dimension"));
        }
        p.dim = dim;
        Ok(p)
    }

    fn call(&self, requests: &[CropRequest]) -> Result<Vec<Vec<f64>>> {
        let body = EmbedRequest {
            crops: requests
                .iter()
                .map(|r| CropWire {
                    frame_id: r.frame_id,
                    mask_id: r.mask_id,
                    level: r.level,
                    bbox: &r.bbox,
                })
                .collect(),
        };
        let url = format!("{}/v1/embed", self.base);
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Error::provider(format!("{url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::provider(format!("{url}: status {}", resp.status())));
        }
        let parsed: EmbedResponse = resp
            .json()
            .map_err(|e| Error::provider(format!("{url}: bad response: {e}")))?;
        if parsed.embeddings.len() != requests.len() {
            return Err(Error::provider(format!(
                "{url}: {} embeddings for {} crops",
                parsed.embeddings.len(),
                requests.len()
            )));
        }
        Ok(parsed.embeddings)
    }
}

impl<T: Scalar> EmbeddingProvider<T> for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("http({})", self.base)
    }

    fn embed(&self, requests: &[CropRequest]) -> Result<Vec<Vec<T>>> {
        let rows = self.call(requests)?;
        Ok(rows
            .into_iter()
            .map(|r| r.into_iter().map(T::from_f64_cfg).collect())
            .collect())
    }
}
