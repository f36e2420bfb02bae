//! Frozen vector representations: sentence embeddings for similarity
//! ranking, per-token prompt-encoder states, and precomputed image patch
//! embeddings.
//!
//! Each comes in a synthetic flavour (seeded hashing, no model required) and
//! a table flavour backed by JSONL exports of real models.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::split_words;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Deterministic pseudorandom unit vector for `(seed, domain, key)`.
pub fn hashed_unit_vector(seed: u64, domain: &str, key: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize_in_place(&mut v);
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_in_place(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `⟨u,v⟩ / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            op: "cosine_sim",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("zero-norm input to cosine_sim".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TableRecord {
    key: String,
    vector: Vec<f64>,
}

/// Key → vector map read from JSONL `{"key": ..., "vector": [...]}` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut table = EmbeddingTable::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TableRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(path, lineno, format!("invalid record: {e}")))?;
            if rec.vector.is_empty() {
                return Err(Error::format(path, lineno, "empty vector"));
            }
            if table.vectors.is_empty() {
                table.dim = rec.vector.len();
            } else if rec.vector.len() != table.dim {
                return Err(Error::format(
                    path,
                    lineno,
                    format!("vector has dimension {}, expected {}", rec.vector.len(), table.dim),
                ));
            }
            table.vectors.insert(rec.key, rec.vector);
        }
        if table.vectors.is_empty() {
            return Err(Error::EmptyTable);
        }
        Ok(table)
    }

    pub fn from_map(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors.values().next().map(Vec::len).ok_or(Error::EmptyTable)?;
        if vectors.values().any(|v| v.len() != dim) {
            return Err(Error::contract("table vectors differ in dimension"));
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for (key, vector) in &self.vectors {
            serde_json::to_writer(
                &mut buf,
                &TableRecord {
                    key: key.clone(),
                    vector: vector.clone(),
                },
            )?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: &str) -> Result<&[f64]> {
        self.vectors
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))
    }
}

/// The sentence embedder used to rank candidate questions.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    /// Sum of per-word hashed vectors, normalized; texts sharing words get
    /// correlated embeddings.
    Synthetic { seed: u64, dim: usize },
    /// Whole-text lookups, e.g. exported sentence-encoder outputs.
    Table(EmbeddingTable),
}

impl EmbeddingProvider {
    pub fn synthetic(seed: u64, dim: usize) -> Self {
        EmbeddingProvider::Synthetic { seed, dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Synthetic { dim, .. } => *dim,
            EmbeddingProvider::Table(t) => t.dim(),
        }
    }

    /// Unit-norm embedding of `text`.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::contract("cannot embed empty text"));
        }
        let mut v = match self {
            EmbeddingProvider::Synthetic { seed, dim } => {
                let mut acc = vec![0.0; *dim];
                for w in split_words(text) {
                    for (a, x) in acc.iter_mut().zip(hashed_unit_vector(*seed, "text", &w, *dim)) {
                        *a += x;
                    }
                }
                acc
            }
            EmbeddingProvider::Table(t) => t.get(text)?.to_vec(),
        };
        if norm(&v) == 0.0 {
            return Err(Error::DegenerateVector(format!("embedding of {text:?} is zero")));
        }
        normalize_in_place(&mut v);
        Ok(v)
    }
}

pub fn load_embedding_table(path: &Path) -> Result<EmbeddingProvider> {
    Ok(EmbeddingProvider::Table(EmbeddingTable::load(path)?))
}

pub const PAD_TOKEN: &str = "<pad>";

/// The frozen prompt encoder: text → one state per word token.
#[derive(Clone, Debug)]
pub enum TokenStateProvider {
    Synthetic { seed: u64, dim: usize, max_len: usize },
    /// Per-token table lookups (keys are lowercase word tokens plus `<pad>`).
    Table { table: EmbeddingTable, max_len: usize },
}

impl TokenStateProvider {
    pub fn synthetic(seed: u64, dim: usize, max_len: usize) -> Self {
        TokenStateProvider::Synthetic { seed, dim, max_len }
    }

    pub fn dim(&self) -> usize {
        match self {
            TokenStateProvider::Synthetic { dim, .. } => *dim,
            TokenStateProvider::Table { table, .. } => table.dim(),
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            TokenStateProvider::Synthetic { max_len, .. } | TokenStateProvider::Table { max_len, .. } => *max_len,
        }
    }

    fn state(&self, token: &str) -> Result<Vec<f64>> {
        match self {
            TokenStateProvider::Synthetic { seed, dim, .. } => Ok(hashed_unit_vector(*seed, "state", token, *dim)),
            TokenStateProvider::Table { table, .. } => Ok(table.get(token)?.to_vec()),
        }
    }

    /// `[L_s × d]` states for the tokens of `text`, truncated to `max_len`.
    /// Text without tokens encodes as a single padding state.
    pub fn token_states(&self, text: &str) -> Result<Tensor> {
        let mut words = split_words(text);
        words.truncate(self.max_len().max(1));
        if words.is_empty() {
            words.push(PAD_TOKEN.to_string());
        }
        let rows = words.iter().map(|w| self.state(w)).collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Precomputed image-encoder outputs: one `[n × d_v]` patch matrix per image key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageBank {
    patches: usize,
    dim: usize,
    images: BTreeMap<String, Tensor>,
}

impl ImageBank {
    pub fn new(patches: usize, dim: usize) -> Self {
        ImageBank {
            patches,
            dim,
            images: BTreeMap::new(),
        }
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    pub fn insert(&mut self, key: impl Into<String>, patches: Tensor) -> Result<()> {
        if patches.shape() != [self.patches, self.dim] {
            return Err(Error::Dimension {
                op: "image_bank.insert",
                lhs: vec![self.patches, self.dim],
                rhs: patches.shape().to_vec(),
            });
        }
        self.images.insert(key.into(), patches);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.images
            .get(key)
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))
    }

    /// Stored as an embedding table whose vectors are the row-major
    /// flattened patch matrices.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map = self
            .images
            .iter()
            .map(|(k, t)| (k.clone(), t.data().to_vec()))
            .collect();
        EmbeddingTable::from_map(map)?.save(path)
    }

    pub fn load(path: &Path, patches: usize) -> Result<Self> {
        let table = EmbeddingTable::load(path)?;
        if patches == 0 || table.dim() % patches != 0 {
            return Err(Error::format(
                path,
                1,
                format!("vector length {} is not a multiple of {patches} patches", table.dim()),
            ));
        }
        let dim = table.dim() / patches;
        let mut bank = ImageBank::new(patches, dim);
        for (k, v) in table.vectors {
            bank.insert(k, Tensor::new(vec![patches, dim], v)?)?;
        }
        Ok(bank)
    }
}
