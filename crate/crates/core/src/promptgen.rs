//! Stage 2: tags → candidate question/answer pairs → Top-P by similarity to
//! the target question → the rendered prompt bundle.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{cosine_sim, EmbeddingProvider, ImageBank};
use crate::error::{Error, Result};
use crate::numerics::META_KEY;
use crate::vqg::{generate_question, VqgModel};

pub const DEFAULT_TOP_P: usize = 8;
/// Longest question the generator may produce, in tokens.
pub const MAX_QUESTION_TOKENS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub similarity: f64,
}

impl QaPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        QaPair {
            question: question.into(),
            answer: answer.into(),
            similarity: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub pairs: Vec<QaPair>,
    /// No tag survived filtering.
    pub degenerate: bool,
}

/// One generated question per tag, in tag order.
pub fn generate_candidates(
    model: &VqgModel,
    images: &ImageBank,
    image_key: &str,
    filtered_tags: &[String],
) -> Result<Candidates> {
    let pairs = filtered_tags
        .par_iter()
        .map(|tag| {
            let q = generate_question(model, images, image_key, tag, MAX_QUESTION_TOKENS)?;
            Ok(QaPair::new(q, tag.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Candidates {
        degenerate: pairs.is_empty(),
        pairs,
    })
}

/// Orders pairs by descending similarity (ties: original position) and keeps
/// the first `p`.
pub fn rank_top_p(mut pairs: Vec<QaPair>, p: usize) -> Vec<QaPair> {
    // stable sort keeps the original order among equal similarities
    pairs.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
    pairs.truncate(p);
    pairs
}

/// Scores every candidate question against `target_question` and keeps the
/// Top-P.
pub fn select_top_p(
    candidates: &[QaPair],
    target_question: &str,
    provider: &EmbeddingProvider,
    p: usize,
) -> Result<Vec<QaPair>> {
    if p == 0 {
        return Err(Error::contract("P must be at least 1"));
    }
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let target = provider.embed_text(target_question)?;
    let scored = candidates
        .iter()
        .map(|c| {
            let v = provider.embed_text(&c.question)?;
            Ok(QaPair {
                similarity: cosine_sim(&v, &target)?,
                ..c.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_top_p(scored, p))
}

pub fn render_pair(pair: &QaPair) -> String {
    format!("Question: {} Answer: {}", pair.question, pair.answer)
}

pub fn render_prompt_bundle(pairs: &[QaPair]) -> String {
    pairs.iter().map(render_pair).collect::<Vec<_>>().join(" ")
}

/// Splits a rendered bundle back into `(question, answer)` pairs. Questions
/// must not contain `" Answer: "` and answers must not contain
/// `" Question: "`.
pub fn parse_prompt_bundle(text: &str) -> Result<Vec<(String, String)>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text
        .strip_prefix("Question: ")
        .ok_or_else(|| Error::contract("bundle must start with \"Question: \""))?;
    let mut out = Vec::new();
    for segment in body.split(" Question: ") {
        let (q, a) = segment
            .split_once(" Answer: ")
            .ok_or_else(|| Error::contract(format!("segment {segment:?} has no answer")))?;
        out.push((q.to_string(), a.to_string()));
    }
    Ok(out)
}

/// A bundle as stored between stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRecord {
    pub id: String,
    pub pairs: Vec<QaPair>,
    pub bundle: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl BundleRecord {
    pub fn new(id: impl Into<String>, pairs: Vec<QaPair>, config_hash: Option<String>) -> Self {
        BundleRecord {
            id: id.into(),
            bundle: render_prompt_bundle(&pairs),
            pairs,
            config_hash,
        }
    }

    /// The same bundle cut down to its first `p` pairs.
    pub fn truncated(&self, p: usize) -> BundleRecord {
        let pairs: Vec<QaPair> = self.pairs.iter().take(p).cloned().collect();
        BundleRecord::new(self.id.clone(), pairs, self.config_hash.clone())
    }
}

/// Writes a candidate dump: an optional `{"__meta__": …}` header line, then
/// one record per line.
pub fn write_bundles(path: &Path, records: &[BundleRecord], meta: Option<&Value>) -> Result<()> {
    let mut text = String::new();
    if let Some(meta) = meta {
        text.push_str(&serde_json::to_string(&serde_json::json!({ META_KEY: meta }))?);
        text.push('\n');
    }
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a candidate dump and its header, if any. Each record's `bundle`
/// must equal the rendering of its `pairs`.
pub fn read_bundles(path: &Path) -> Result<(Vec<BundleRecord>, Option<Value>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut meta = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::format(path, i + 1, e.to_string()))?;
        if let Some(m) = value.get(META_KEY) {
            if i > 0 || meta.is_some() {
                return Err(Error::format(path, i + 1, "metadata header must be the first line"));
            }
            meta = Some(m.clone());
            continue;
        }
        let rec: BundleRecord = serde_json::from_value(value).map_err(|e| Error::format(path, i + 1, e.to_string()))?;
        if rec.bundle != render_prompt_bundle(&rec.pairs) {
            return Err(Error::format(path, i + 1, "bundle text does not match its pairs"));
        }
        out.push(rec);
    }
    Ok((out, meta))
}
