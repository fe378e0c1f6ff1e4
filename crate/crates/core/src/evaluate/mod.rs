//! Verb, value, value-all, grounded-value and grounded-value-all in the
//! top-1, top-5 and ground-truth-verb settings, macro-averaged over verbs.
//!
//! Per image, value is the fraction of frame roles whose noun matches one of
//! the three annotations; value-all is 1 when every role matches. Grounded
//! variants also require a correct box. Image scores are averaged per verb,
//! then over verbs.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoxXYXY};
use crate::error::{Error, Result};
use crate::ontology::{FrameSpace, SituationAnnotation};
use crate::record::{PredictionRecord, VerbEntry};

pub const IOU_THRESHOLD: f64 = 0.5;

pub fn noun_correct(pred: &str, gt: &[String; 3]) -> bool {
    gt.iter().any(|n| n == pred)
}

/// Existence must agree; present boxes must overlap with IoU ≥ 0.5.
pub fn box_correct(pred: Option<&BoxXYXY>, gt: Option<&BoxXYXY>) -> bool {
    match (pred, gt) {
        (None, None) => true,
        (Some(p), Some(g)) => iou(p, g) >= IOU_THRESHOLD,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleScore {
    pub noun_ok: bool,
    pub box_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub image_id: String,
    pub verb: String,
    pub verb_top1_ok: bool,
    pub verb_top5_ok: bool,
    /// Role scores of the predictions each setting reads, before verb gating.
    pub top1: Vec<RoleScore>,
    pub top5: Vec<RoleScore>,
    pub ground_truth: Vec<RoleScore>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SettingMetrics {
    /// Absent in the ground-truth setting.
    pub verb: Option<f64>,
    pub value: f64,
    pub value_all: f64,
    pub grounded_value: f64,
    pub grounded_value_all: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbMetrics {
    pub verb: String,
    pub images: usize,
    pub top1: SettingMetrics,
    pub top5: SettingMetrics,
    pub ground_truth: SettingMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub top1: SettingMetrics,
    pub top5: SettingMetrics,
    pub ground_truth: SettingMetrics,
    pub per_verb: Vec<VerbMetrics>,
}

fn score_roles(ann: &SituationAnnotation, entry: Option<&VerbEntry>, loc: &str) -> Result<Vec<RoleScore>> {
    let Some(entry) = entry else {
        return Ok(vec![RoleScore { noun_ok: false, box_ok: false }; ann.roles.len()]);
    };
    if entry.verb != ann.verb {
        // Frames of different verbs do not align; nothing can be correct.
        return Ok(vec![RoleScore { noun_ok: false, box_ok: false }; ann.roles.len()]);
    }
    if entry.roles.len() != ann.roles.len() || entry.roles.iter().zip(&ann.roles).any(|(p, g)| p.role != g.role) {
        return Err(Error::validation(loc, format!("predicted roles do not match the frame of \"{}\"", ann.verb)));
    }
    Ok(entry
        .roles
        .iter()
        .zip(&ann.roles)
        .map(|(p, g)| RoleScore { noun_ok: noun_correct(&p.noun, &g.nouns), box_ok: box_correct(p.bbox.as_ref(), g.bbox.as_ref()) })
        .collect())
}

/// Correctness bits of one image.
pub fn score_sample(ann: &SituationAnnotation, rec: &PredictionRecord) -> Result<ScoredSample> {
    let loc = format!("prediction {}", ann.image_id);
    if rec.entries.is_empty() {
        return Err(Error::validation(&loc, "no verb entries"));
    }
    let top1 = &rec.entries[0];
    let gt_in_top5 = rec.entries.iter().take(5).find(|e| e.verb == ann.verb);
    let gt_entry = rec
        .gt_verb_entry
        .as_ref()
        .ok_or_else(|| Error::validation(&loc, "missing ground-truth-verb prediction"))?;
    if gt_entry.verb != ann.verb {
        return Err(Error::validation(&loc, format!("ground-truth-verb prediction is for \"{}\", expected \"{}\"", gt_entry.verb, ann.verb)));
    }
    Ok(ScoredSample {
        image_id: ann.image_id.clone(),
        verb: ann.verb.clone(),
        verb_top1_ok: top1.verb == ann.verb,
        verb_top5_ok: gt_in_top5.is_some(),
        top1: score_roles(ann, Some(top1), &loc)?,
        top5: score_roles(ann, gt_in_top5, &loc)?,
        ground_truth: score_roles(ann, Some(gt_entry), &loc)?,
    })
}

/// `[value, value-all, grounded-value, grounded-value-all]` of one image.
fn image_values(roles: &[RoleScore], gate: bool) -> [f64; 4] {
    if !gate {
        return [0.0; 4];
    }
    let n = roles.len() as f64;
    let nouns = roles.iter().filter(|r| r.noun_ok).count();
    let grounded = roles.iter().filter(|r| r.noun_ok && r.box_ok).count();
    [
        nouns as f64 / n,
        if nouns == roles.len() { 1.0 } else { 0.0 },
        grounded as f64 / n,
        if grounded == roles.len() { 1.0 } else { 0.0 },
    ]
}

fn to_metrics(verb: Option<f64>, v: [f64; 4]) -> SettingMetrics {
    SettingMetrics { verb, value: v[0], value_all: v[1], grounded_value: v[2], grounded_value_all: v[3] }
}

/// Scores `records` against `annotations`. Every annotation needs a record
/// with a ground-truth-verb entry.
pub fn evaluate(annotations: &[SituationAnnotation], records: &[PredictionRecord], space: &FrameSpace) -> Result<MetricsReport> {
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if by_id.insert(r.image_id.as_str(), r).is_some() {
            return Err(Error::validation(format!("prediction {}", r.image_id), "duplicate image id"));
        }
    }
    // Per verb: count and sums of [top1 verb, top5 verb, top1 x4, top5 x4, gt x4].
    let mut sums: BTreeMap<usize, (usize, [f64; 14])> = BTreeMap::new();
    for ann in annotations {
        let verb = space
            .verb_id(&ann.verb)
            .ok_or_else(|| Error::validation(format!("image {}", ann.image_id), format!("verb \"{}\" not in space", ann.verb)))?;
        let rec = by_id
            .get(ann.image_id.as_str())
            .ok_or_else(|| Error::validation(format!("image {}", ann.image_id), "no prediction for image"))?;
        let s = score_sample(ann, rec)?;
        let mut row = [0.0; 14];
        row[0] = if s.verb_top1_ok { 1.0 } else { 0.0 };
        row[1] = if s.verb_top5_ok { 1.0 } else { 0.0 };
        row[2..6].copy_from_slice(&image_values(&s.top1, s.verb_top1_ok));
        row[6..10].copy_from_slice(&image_values(&s.top5, s.verb_top5_ok));
        row[10..14].copy_from_slice(&image_values(&s.ground_truth, true));
        let e = sums.entry(verb).or_insert((0, [0.0; 14]));
        e.0 += 1;
        e.1.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    let mut per_verb = Vec::with_capacity(sums.len());
    let mut overall = [0.0; 14];
    for (&verb, (n, s)) in &sums {
        let mean: Vec<f64> = s.iter().map(|v| 100.0 * v / *n as f64).collect();
        overall.iter_mut().zip(&mean).for_each(|(a, b)| *a += b);
        per_verb.push(VerbMetrics {
            verb: space.verb_name(verb).to_string(),
            images: *n,
            top1: to_metrics(Some(mean[0]), mean[2..6].try_into().expect("4")),
            top5: to_metrics(Some(mean[1]), mean[6..10].try_into().expect("4")),
            ground_truth: to_metrics(None, mean[10..14].try_into().expect("4")),
        });
    }
    let nv = sums.len().max(1) as f64;
    let o: Vec<f64> = overall.iter().map(|v| v / nv).collect();
    Ok(MetricsReport {
        images: annotations.len(),
        top1: to_metrics(Some(o[0]), o[2..6].try_into().expect("4")),
        top5: to_metrics(Some(o[1]), o[6..10].try_into().expect("4")),
        ground_truth: to_metrics(None, o[10..14].try_into().expect("4")),
        per_verb,
    })
}

impl SettingMetrics {
    /// `grounded-value-all ≤ grounded-value ≤ value` and `grounded-value-all ≤ value-all ≤ value`,
    /// all within `[0, 100]` and, when present, bounded by verb accuracy.
    pub fn dominance_holds(&self) -> bool {
        let eps = 1e-9;
        let in_range = [self.value, self.value_all, self.grounded_value, self.grounded_value_all]
            .iter()
            .chain(self.verb.iter())
            .all(|v| (-eps..=100.0 + eps).contains(v));
        let chain = self.grounded_value_all <= self.grounded_value + eps
            && self.grounded_value <= self.value + eps
            && self.grounded_value_all <= self.value_all + eps
            && self.value_all <= self.value + eps;
        let verb_bound = self.verb.map_or(true, |v| self.value <= v + eps);
        in_range && chain && verb_bound
    }
}

impl MetricsReport {
    pub fn dominance_holds(&self) -> bool {
        [self.top1, self.top5, self.ground_truth].iter().all(|s| s.dominance_holds())
            && self.per_verb.iter().all(|v| [v.top1, v.top5, v.ground_truth].iter().all(|s| s.dominance_holds()))
    }

    /// Aligned text table with one row per verb and an overall row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16}|{:^45}|{:^45}|{:^37}\n",
            "", "top-1 predicted verb", "top-5 predicted verbs", "ground-truth verb"
        ));
        let cols = format!("{:>8}{:>8}{:>10}{:>8}{:>11}", "verb", "value", "value-all", "grnd", "grnd-all");
        let gt_cols = format!("{:>8}{:>10}{:>8}{:>11}", "value", "value-all", "grnd", "grnd-all");
        out.push_str(&format!("{:<16}|{cols:<45}|{cols:<45}|{gt_cols:<37}\n", "set"));
        let cell = |s: &SettingMetrics| {
            let verb = s.verb.map_or(String::new(), |v| format!("{v:>8.2}"));
            format!("{verb}{:>8.2}{:>10.2}{:>8.2}{:>11.2}", s.value, s.value_all, s.grounded_value, s.grounded_value_all)
        };
        let mut row = |name: &str, a: &SettingMetrics, b: &SettingMetrics, c: &SettingMetrics| {
            let name: String = name.chars().take(16).collect();
            out.push_str(&format!("{name:<16}|{:<45}|{:<45}|{:<37}\n", cell(a), cell(b), cell(c)));
        };
        for v in &self.per_verb {
            row(&v.verb, &v.top1, &v.top5, &v.ground_truth);
        }
        row(&format!("all ({} imgs)", self.images), &self.top1, &self.top5, &self.ground_truth);
        out
    }
}
