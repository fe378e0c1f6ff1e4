//! Grounded-semantic image retrieval over prediction records.
//!
//! Two images are similar when their top-5 verb lists share a verb; the best
//! shared pair scores the role-aligned noun matches, boosted by box overlap
//! and discounted by both ranks.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::error::{Error, Result};
use crate::record::{PredictionRecord, VerbEntry};

/// Ranks considered on each side.
pub const MAX_RANK: usize = 5;

fn pair_score(a: &VerbEntry, b: &VerbEntry, i: usize, j: usize) -> Result<f64> {
    if a.roles.len() != b.roles.len() {
        return Err(Error::validation(
            format!("verb {}", a.verb),
            format!("frames differ in length ({} vs {})", a.roles.len(), b.roles.len()),
        ));
    }
    let n = a.roles.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (ra, rb) in a.roles.iter().zip(&b.roles) {
        if ra.noun == rb.noun {
            let overlap = match (&ra.bbox, &rb.bbox) {
                (Some(x), Some(y)) => iou(x, y),
                _ => 0.0,
            };
            sum += 1.0 + overlap;
        }
    }
    Ok(sum / (2 * i * j * n) as f64)
}

/// Similarity in `[0, 1]`; a gated-away box contributes zero overlap.
pub fn grsitsim(a: &PredictionRecord, b: &PredictionRecord) -> Result<f64> {
    let mut best = 0.0f64;
    for (i, ea) in a.entries.iter().take(MAX_RANK).enumerate() {
        for (j, eb) in b.entries.iter().take(MAX_RANK).enumerate() {
            if ea.verb == eb.verb {
                best = best.max(pair_score(ea, eb, i + 1, j + 1)?);
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub image_id: String,
    pub score: f64,
}

pub struct RetrievalIndex {
    records: Vec<PredictionRecord>,
    /// verb → (record index, zero-based rank) for every top-5 occurrence.
    by_verb: HashMap<String, Vec<(usize, usize)>>,
}

pub fn build_index(records: Vec<PredictionRecord>) -> Result<RetrievalIndex> {
    let mut ids = HashSet::with_capacity(records.len());
    let mut by_verb: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    for (r, rec) in records.iter().enumerate() {
        if !ids.insert(rec.image_id.as_str()) {
            return Err(Error::validation(format!("prediction {}", rec.image_id), "duplicate image id"));
        }
        for (rank, e) in rec.entries.iter().take(MAX_RANK).enumerate() {
            by_verb.entry(e.verb.clone()).or_default().push((r, rank));
        }
    }
    Ok(RetrievalIndex { records, by_verb })
}

fn rank_hits(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    hits.retain(|h| h.score > 0.0);
    hits.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.image_id.cmp(&b.image_id)));
    hits.truncate(k);
    hits
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn get(&self, image_id: &str) -> Option<&PredictionRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Top-`k` records by similarity to `probe`, scoring only records that
    /// share a top-5 verb with it.
    pub fn query(&self, probe: &PredictionRecord, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let candidates: BTreeSet<usize> = probe
            .entries
            .iter()
            .take(MAX_RANK)
            .filter_map(|e| self.by_verb.get(&e.verb))
            .flat_map(|v| v.iter().map(|(r, _)| *r))
            .collect();
        let candidates: Vec<usize> = candidates.into_iter().collect();
        let hits = candidates
            .par_iter()
            .map(|&r| Ok(Hit { image_id: self.records[r].image_id.clone(), score: grsitsim(probe, &self.records[r])? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(rank_hits(hits, k))
    }

    /// Same ranking as [`RetrievalIndex::query`], scoring every record.
    pub fn query_exhaustive(&self, probe: &PredictionRecord, k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let hits = self
            .records
            .iter()
            .map(|r| Ok(Hit { image_id: r.image_id.clone(), score: grsitsim(probe, r)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(rank_hits(hits, k))
    }
}
