use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::Serialize;

use super::dataset::VqaSample;
use crate::error::{Error, Result};

pub const DEFAULT_STOPLIST_FRACTION: f64 = 0.15;

/// Fraction of distinct images carrying each tag.
pub fn tag_document_frequency(samples: &[VqaSample]) -> BTreeMap<String, f64> {
    let mut per_image: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
    for s in samples {
        per_image
            .entry(s.image_key.as_str())
            .or_default()
            .extend(s.tags.iter().map(String::as_str));
    }
    let images = per_image.len() as f64;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for tags in per_image.values() {
        for t in tags {
            *counts.entry(t.to_string()).or_default() += 1;
        }
    }
    counts.into_iter().map(|(t, c)| (t, c as f64 / images)).collect()
}

/// Tags whose document frequency exceeds `frequency_fraction`.
pub fn build_tag_stoplist(samples: &[VqaSample], frequency_fraction: f64) -> Result<BTreeSet<String>> {
    if samples.is_empty() {
        return Err(Error::contract("cannot build a stoplist from an empty corpus"));
    }
    if !(frequency_fraction > 0.0 && frequency_fraction <= 1.0) {
        return Err(Error::contract(format!(
            "stoplist fraction must lie in (0, 1], got {frequency_fraction}"
        )));
    }
    Ok(tag_document_frequency(samples)
        .into_iter()
        .filter(|(_, df)| *df > frequency_fraction)
        .map(|(t, _)| t)
        .collect())
}

/// One tag per line; blank lines and `#` comments are ignored.
pub fn load_stoplist(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn filter_tags(tags: &[String], stoplist: &BTreeSet<String>) -> Vec<String> {
    tags.iter().filter(|t| !stoplist.contains(*t)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TagStats {
    pub samples: usize,
    pub mean_tags_before: f64,
    pub mean_tags_after: f64,
    /// Filtered tag count → number of samples.
    pub histogram_after: BTreeMap<usize, usize>,
    pub samples_without_tags: usize,
    pub stoplist: Vec<String>,
}

pub fn tag_stats(samples: &[VqaSample], stoplist: &BTreeSet<String>) -> TagStats {
    let n = samples.len().max(1) as f64;
    let mut histogram = BTreeMap::new();
    let mut before = 0usize;
    let mut after = 0usize;
    let mut empty = 0usize;
    for s in samples {
        let kept = filter_tags(&s.tags, stoplist).len();
        before += s.tags.len();
        after += kept;
        if kept == 0 {
            empty += 1;
        }
        *histogram.entry(kept).or_insert(0) += 1;
    }
    TagStats {
        samples: samples.len(),
        mean_tags_before: before as f64 / n,
        mean_tags_after: after as f64 / n,
        histogram_after: histogram,
        samples_without_tags: empty,
        stoplist: stoplist.iter().cloned().collect(),
    }
}
