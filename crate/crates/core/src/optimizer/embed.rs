//! Signature embeddings and similarity clustering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

/// Offline embedder: signed feature hashing of word unigrams and bigrams,
/// L2-normalized. Deterministic across platforms.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 1024 }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn bucket(&self, feature: &str) -> (usize, f32) {
        let h = Sha256::digest(feature.as_bytes());
        let n = u64::from_le_bytes(h[..8].try_into().expect("digest is 32 bytes"));
        let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        ((n % self.dim as u64) as usize, sign)
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        let toks = Self::tokens(text);
        for t in &toks {
            let (i, s) = self.bucket(t);
            v[i] += s;
        }
        for w in toks.windows(2) {
            let (i, s) = self.bucket(&format!("{} {}", w[0], w[1]));
            v[i] += 0.5 * s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> &str {
        "hash"
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// Tools whose signatures link at or above the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeCluster {
    pub members: Vec<String>,
    /// Highest pairwise similarity inside the cluster.
    pub max_similarity: f64,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Single-linkage clustering of `signatures` (name to text). Singletons are
/// dropped; clusters come back ordered by their first member.
pub fn embed_and_cluster(
    signatures: &BTreeMap<String, String>,
    provider: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<Vec<MergeCluster>, EmbedError> {
    let names: Vec<&String> = signatures.keys().collect();
    let texts: Vec<String> = signatures.values().cloned().collect();
    let vectors = provider.embed(&texts)?;
    if vectors.len() != texts.len() {
        return Err(EmbedError::CountMismatch {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    let n = names.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut sims = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = cosine(&vectors[i], &vectors[j])?;
            if s >= threshold {
                sims.push((i, j, s));
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[b.max(a)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, MergeCluster> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups
            .entry(r)
            .or_insert_with(|| MergeCluster {
                members: Vec::new(),
                max_similarity: 0.0,
            })
            .members
            .push(names[i].clone());
    }
    for (i, _, s) in sims {
        let r = find(&mut parent, i);
        let c = groups.get_mut(&r).expect("root has a group");
        c.max_similarity = c.max_similarity.max(s);
    }
    Ok(groups.into_values().filter(|c| c.members.len() > 1).collect())
}
