use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CropRequest, CropTable, EmbeddingProvider};
use crate::scalar::Scalar;
use crate::scene::blob;

/// Index for precomputed crop embeddings: rows of a feature blob keyed by
/// (frame, mask, level). The blob path is relative to the index file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropIndexFile {
    pub blob: String,
    #[serde(default, rename = "crop")]
    pub crops: Vec<CropIndexEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropIndexEntry {
    pub frame_id: u32,
    pub mask_id: u32,
    pub level: u32,
    pub row: u32,
}

pub struct FileProvider<T: Scalar> {
    table: CropTable<T>,
    dim: usize,
    source: String,
}

impl<T: Scalar> FileProvider<T> {
    pub fn open(index_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(index_path)
            .map_err(|e| Error::load(index_path, &e.to_string()))?;
        let index: CropIndexFile = toml::from_str(&text)
            .map_err(|e| Error::schema(format!("{}: {e}", index_path.display())))?;
        let blob_path = index_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&index.blob);
        let (rows, dim) = blob::read_features::<T>(&blob_path)?;
        let mut table = CropTable::new();
        for entry in &index.crops {
            let row = rows.get(entry.row as usize).ok_or_else(|| {
                Error::schema(format!(
                    "{}: crop row {} out of range ({} rows)",
                    index_path.display(),
                    entry.row,
                    rows.len()
                ))
            })?;
            let key = (entry.frame_id, entry.mask_id, entry.level);
            if table.insert(key, row.clone()).is_some() {
                return Err(Error::schema(format!(
                    "{}: duplicate crop entry for frame {} mask {} level {}",
                    index_path.display(),
                    entry.frame_id,
                    entry.mask_id,
                    entry.level
                )));
            }
        }
        Ok(Self {
            table,
            dim,
            source: index_path.display().to_string(),
        })
    }

    pub fn from_table(table: CropTable<T>, dim: usize) -> Self {
        Self {
            table,
            dim,
            source: "in-memory".to_string(),
        }
    }
}

impl<T: Scalar> EmbeddingProvider<T> for FileProvider<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn tag(&self) -> String {
        format!("file({})", self.source)
    }

    fn embed(&self, requests: &[CropRequest]) -> Result<Vec<Vec<T>>> {
        requests
            .iter()
            .map(|r| {
                self.table
                    .get(&(r.frame_id, r.mask_id, r.level))
                    .cloned()
                    .ok_or_else(|| {
                        Error::provider(format!(
                            "no embedding for frame {} mask {} level {}",
                            r.frame_id, r.mask_id, r.level
                        ))
                    })
            })
            .collect()
    }
}
