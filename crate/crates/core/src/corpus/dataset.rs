use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const NUM_ANSWERS: usize = 10;

/// One VQA record: an image, a question, ten reference answers and the
/// image's tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaSample {
    pub id: String,
    pub image_key: String,
    pub question: String,
    pub answers: Vec<String>,
    pub tags: Vec<String>,
}

impl VqaSample {
    /// Most frequent reference answer; ties go to the earliest occurrence.
    pub fn majority_answer(&self) -> &str {
        majority(&self.answers).unwrap_or("")
    }
}

fn majority(answers: &[String]) -> Option<&str> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, a) in answers.iter().enumerate() {
        let e = counts.entry(a.as_str()).or_insert((0, i));
        e.0 += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(a, _)| a)
}

/// Removes duplicates, keeping first occurrences in order.
pub fn dedup_preserving_order(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

fn string_field(obj: &serde_json::Map<String, Value>, field: &str) -> std::result::Result<String, String> {
    match obj.get(field) {
        None => Err(format!("missing field \"{field}\"")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field \"{field}\" must be a string")),
    }
}

fn string_list(obj: &serde_json::Map<String, Value>, field: &str) -> std::result::Result<Vec<String>, String> {
    match obj.get(field) {
        None => Err(format!("missing field \"{field}\"")),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("field \"{field}\" must contain only strings"))
            })
            .collect(),
        Some(_) => Err(format!("field \"{field}\" must be a list")),
    }
}

/// Validates one decoded record. Short answer lists are padded with their
/// majority answer; tags are deduplicated in order.
pub fn sample_from_value(value: &Value) -> std::result::Result<VqaSample, String> {
    let obj = value.as_object().ok_or("record must be a JSON object")?;
    let id = string_field(obj, "id")?;
    let image_key = string_field(obj, "image_key")?;
    let question = string_field(obj, "question")?;
    let mut answers = string_list(obj, "answers")?;
    let tags = string_list(obj, "tags")?;
    if answers.is_empty() || answers.len() > NUM_ANSWERS {
        return Err(format!(
            "expected 1..={NUM_ANSWERS} answers (padded to {NUM_ANSWERS}), got {}",
            answers.len()
        ));
    }
    let pad = majority(&answers).unwrap().to_string();
    answers.resize(NUM_ANSWERS, pad);
    Ok(VqaSample {
        id,
        image_key,
        question,
        answers,
        tags: dedup_preserving_order(tags),
    })
}

/// Reads a dataset JSONL file. Blank lines are skipped; any malformed line
/// fails the whole load with its 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<VqaSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, path)
}

pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<VqaSample>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| Error::format(path, lineno, format!("invalid JSON: {e}")))?;
        let sample = sample_from_value(&value).map_err(|m| Error::format(path, lineno, m))?;
        if !ids.insert(sample.id.clone()) {
            return Err(Error::format(path, lineno, format!("duplicate id {:?}", sample.id)));
        }
        out.push(sample);
    }
    Ok(out)
}

/// One record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, i + 1, e.to_string())))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
