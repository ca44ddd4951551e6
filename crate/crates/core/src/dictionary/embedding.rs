//! Text embedding backends used for nearest-concept retrieval.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{fnv1a, l2_normalize, read_jsonl};

/// Produces unit-norm vectors of a fixed dimension; deterministic per input.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Hashed character-trigram features, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedTrigramProvider {
    dim: usize,
}

impl HashedTrigramProvider {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedTrigramProvider { dim }
    }
}

impl Default for HashedTrigramProvider {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashedTrigramProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let padded: Vec<char> = format!(" {} ", text.trim().to_lowercase()).chars().collect();
        let mut v = vec![0f32; self.dim];
        for gram in padded.windows(3) {
            let s: String = gram.iter().collect();
            let h = fnv1a(s.as_bytes());
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        if v.iter().all(|x| *x == 0.0) {
            // fewer than three characters or perfectly cancelling buckets
            v[(fnv1a(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub name: String,
    pub vector: Vec<f32>,
}

/// Fixed lookup table of precomputed vectors keyed by normalized text.
#[derive(Debug, Clone, Default)]
pub struct TableProvider {
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl TableProvider {
    pub fn from_rows(rows: impl IntoIterator<Item = (String, Vec<f32>)>) -> Result<Self> {
        let mut table = HashMap::new();
        let mut dim = 0;
        for (name, mut vector) in rows {
            if dim == 0 {
                dim = vector.len();
            } else if vector.len() != dim {
                return Err(Error::Shape(format!(
                    "vector for `{name}` has dimension {}, expected {dim}",
                    vector.len()
                )));
            }
            l2_normalize(&mut vector);
            table.insert(name.trim().to_lowercase(), vector);
        }
        Ok(TableProvider { dim, table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<EmbeddingRow> = read_jsonl(path)?;
        Self::from_rows(rows.into_iter().map(|r| (r.name, r.vector)))
    }
}

impl EmbeddingProvider for TableProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.table
            .get(&text.trim().to_lowercase())
            .cloned()
            .ok_or_else(|| Error::Provider(format!("no vector for `{text}`")))
    }
}

#[derive(Serialize)]
struct TextsRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f32>>,
}

/// Remote encoder: POST `{"texts": [...]}`, expects `{"vectors": [[...], ...]}`.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    url: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(url: impl Into<String>, dim: usize, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        HttpProvider {
            url: url.into(),
            dim,
            agent,
        }
    }
}

pub(crate) fn post_texts(agent: &ureq::Agent, url: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
    let resp = agent
        .post(url)
        .send_json(serde_json::to_value(TextsRequest { texts })?)
        .map_err(|e| Error::Provider(format!("POST {url}: {e}")))?;
    if resp.status() != 200 {
        return Err(Error::Provider(format!("POST {url}: status {}", resp.status())));
    }
    let body: VectorsResponse = resp
        .into_json()
        .map_err(|e| Error::Provider(format!("POST {url}: bad response body: {e}")))?;
    if body.vectors.len() != texts.len() {
        return Err(Error::Provider(format!(
            "POST {url}: expected {} vectors, got {}",
            texts.len(),
            body.vectors.len()
        )));
    }
    Ok(body
        .vectors
        .into_iter()
        .map(|mut v| {
            l2_normalize(&mut v);
            v
        })
        .collect())
}

impl EmbeddingProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        let mut out = self.embed_batch(&[text.to_string()])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let vectors = post_texts(&self.agent, &self.url, texts)?;
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(Error::Provider(format!(
                "expected dimension {}, got {}",
                self.dim,
                v.len()
            )));
        }
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn trigram_vectors_are_unit_and_deterministic() {
        let p = HashedTrigramProvider::default();
        for text in ["", "a", "cup", "a herding dog", "High Heels"] {
            let v = p.embed(text).unwrap();
            assert_eq!(v.len(), 64);
            assert!((norm(&v) - 1.0).abs() < 1e-6, "{text}");
            assert_eq!(v, p.embed(text).unwrap());
        }
    }

    #[test]
    fn similar_strings_are_closer_than_unrelated_ones() {
        let p = HashedTrigramProvider::new(256);
        let dot = |a: &str, b: &str| -> f32 {
            let (x, y) = (p.embed(a).unwrap(), p.embed(b).unwrap());
            x.iter().zip(&y).map(|(a, b)| a * b).sum()
        };
        assert!(dot("red circle", "a red circle") > dot("red circle", "blue square"));
    }

    #[test]
    fn table_provider_normalizes_and_reports_missing_keys() {
        let p = TableProvider::from_rows(vec![("Cup".to_string(), vec![3.0, 4.0])]).unwrap();
        assert_eq!(p.embed(" cup ").unwrap(), vec![0.6, 0.8]);
        assert!(matches!(p.embed("mug"), Err(Error::Provider(_))));
        assert!(TableProvider::from_rows(vec![
            ("a".to_string(), vec![1.0]),
            ("b".to_string(), vec![1.0, 0.0]),
        ])
        .is_err());
    }
}
