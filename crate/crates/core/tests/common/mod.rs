//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance runner.

#![allow(dead_code)]

use std::collections::HashMap;

use gsrtr::boxes::BoxXYXY;
use gsrtr::evaluate::{MetricsReport, SettingMetrics, VerbMetrics};
use gsrtr::model::ModelConfig;
use gsrtr::ontology::{
    generate_synthetic, required_channels, synthetic_space, FrameSpace, GridShape, RoleEntry, Sample, SituationAnnotation,
};
use gsrtr::optim::OptimizerConfig;
use gsrtr::record::{PredictionRecord, RolePrediction, VerbEntry};
use gsrtr::tensor::Rng;
use gsrtr::train::TrainConfig;

pub const DESK_SEED: u64 = 7;
pub const DESK_STEPS: usize = 500;

/// 8 verbs with 1 to 4 roles, 64 images on a 4×4 grid.
pub fn desk_data(seed: u64) -> (FrameSpace, Vec<Sample>) {
    let space = synthetic_space(8, 6, 12, (1, 4), seed).unwrap();
    let grid = GridShape::new(required_channels(&space), 4, 4);
    let samples = generate_synthetic(&space, 64, grid, seed).unwrap();
    (space, samples)
}

pub fn desk_model_config(space: &FrameSpace) -> ModelConfig {
    ModelConfig::desk(required_channels(space), 4, 4)
}

pub fn desk_train_config(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: usize::MAX,
        batch_size: 16,
        seed,
        max_steps: Some(steps),
        optimizer: OptimizerConfig { lr: 1e-3, backbone_lr: 1e-4, clip_norm: 1.0, ..Default::default() },
        ..Default::default()
    }
}

// ---- evaluator --------------------------------------------------------------

fn s(x: impl Into<String>) -> String {
    x.into()
}

fn random_box(rng: &mut Rng, w: u32, h: u32) -> BoxXYXY {
    let x1 = rng.below(w as usize - 1);
    let y1 = rng.below(h as usize - 1);
    let x2 = x1 + 1 + rng.below(w as usize - x1 - 1);
    let y2 = y1 + 1 + rng.below(h as usize - y1 - 1);
    BoxXYXY::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)
}

/// Small space, annotations and prediction records with plenty of near
/// misses: shared nouns, copied or jittered boxes, verbs outside the top-5.
pub fn random_eval_case(seed: u64) -> (FrameSpace, Vec<SituationAnnotation>, Vec<PredictionRecord>) {
    let mut rng = Rng::new(seed);
    let n_verbs = 2 + rng.below(5);
    let role_pool: Vec<String> = (0..4).map(|i| format!("r{i}")).collect();
    let nouns: Vec<String> = (0..5).map(|i| format!("n{i}")).collect();
    let frames: Vec<(String, Vec<String>)> = (0..n_verbs)
        .map(|v| {
            let k = 1 + rng.below(3);
            let mut pool = role_pool.clone();
            rng.shuffle(&mut pool);
            let mut f = pool[..k].to_vec();
            f.sort();
            (format!("v{v}"), f)
        })
        .collect();
    let space = FrameSpace::new(frames.clone(), role_pool, nouns.clone(), 6).unwrap();
    let (w, h) = (10u32, 10u32);
    let n_images = 1 + rng.below(10);
    let mut anns = Vec::new();
    let mut recs = Vec::new();
    for i in 0..n_images {
        let gv = rng.below(n_verbs);
        let roles: Vec<RoleEntry> = frames[gv]
            .1
            .iter()
            .map(|r| RoleEntry {
                role: r.clone(),
                nouns: [0, 1, 2].map(|_| nouns[rng.below(3)].clone()),
                bbox: (rng.uniform() < 0.6).then(|| random_box(&mut rng, w, h)),
            })
            .collect();
        let ann = SituationAnnotation {
            image_id: format!("img{i}"),
            width: w,
            height: h,
            verb: frames[gv].0.clone(),
            roles,
            features: None,
        };
        let entry_for = |v: usize, rng: &mut Rng| VerbEntry {
            verb: frames[v].0.clone(),
            score: rng.uniform(),
            roles: frames[v]
                .1
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let gt = (v == gv).then(|| &ann.roles[k]);
                    let noun = match gt {
                        Some(g) if rng.uniform() < 0.6 => g.nouns[rng.below(3)].clone(),
                        _ => nouns[rng.below(nouns.len())].clone(),
                    };
                    let bbox = match gt.and_then(|g| g.bbox) {
                        Some(b) if rng.uniform() < 0.5 => Some(b),
                        None if gt.is_some() && rng.uniform() < 0.6 => None,
                        _ => (rng.uniform() < 0.6).then(|| random_box(rng, w, h)),
                    };
                    RolePrediction { role: r.clone(), noun, bbox }
                })
                .collect(),
        };
        let k = 1 + rng.below(n_verbs.min(5));
        let mut order: Vec<usize> = (0..n_verbs).collect();
        rng.shuffle(&mut order);
        if rng.uniform() < 0.4 {
            // Bias towards the gold verb being ranked first.
            let pos = order.iter().position(|&v| v == gv).unwrap();
            order.swap(0, pos);
        }
        let entries: Vec<VerbEntry> = order[..k].iter().map(|&v| entry_for(v, &mut rng)).collect();
        let gt_entry = match entries.iter().find(|e| e.verb == ann.verb) {
            Some(e) => e.clone(),
            None => entry_for(gv, &mut rng),
        };
        recs.push(PredictionRecord { image_id: ann.image_id.clone(), width: w, height: h, entries, gt_verb_entry: Some(gt_entry) });
        anns.push(ann);
    }
    rng.shuffle(&mut recs);
    (space, anns, recs)
}

fn oracle_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    inter / union
}

/// Four image values of one setting, written from the metric definitions.
fn oracle_image(ann: &SituationAnnotation, entry: Option<&VerbEntry>) -> [f64; 4] {
    let Some(e) = entry.filter(|e| e.verb == ann.verb) else { return [0.0; 4] };
    let mut nouns = 0usize;
    let mut grounded = 0usize;
    for (k, g) in ann.roles.iter().enumerate() {
        let p = &e.roles[k];
        let noun_ok = g.nouns.contains(&p.noun);
        let box_ok = match (&p.bbox, &g.bbox) {
            (None, None) => true,
            (Some(a), Some(b)) => oracle_iou(a, b) >= 0.5,
            _ => false,
        };
        nouns += noun_ok as usize;
        grounded += (noun_ok && box_ok) as usize;
    }
    let n = ann.roles.len();
    [
        nouns as f64 / n as f64,
        (nouns == n) as u8 as f64,
        grounded as f64 / n as f64,
        (grounded == n) as u8 as f64,
    ]
}

/// Brute-force scorer: per verb, per setting, straight from the definitions.
pub fn oracle_evaluate(space: &FrameSpace, anns: &[SituationAnnotation], recs: &[PredictionRecord]) -> MetricsReport {
    let by_id: HashMap<&str, &PredictionRecord> = recs.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut per_verb = Vec::new();
    let mut totals = [[0.0f64; 5]; 3];
    for v in 0..space.num_verbs() {
        let name = space.verb_name(v);
        let imgs: Vec<&SituationAnnotation> = anns.iter().filter(|a| a.verb == name).collect();
        if imgs.is_empty() {
            continue;
        }
        // settings × [verb, value, value-all, grnd, grnd-all]
        let mut sums = [[0.0f64; 5]; 3];
        for a in &imgs {
            let r = by_id[a.image_id.as_str()];
            let top1 = &r.entries[0];
            let top5 = r.entries.iter().take(5).find(|e| e.verb == a.verb);
            let chosen = [Some(top1), top5, r.gt_verb_entry.as_ref()];
            let verb_ok = [(top1.verb == a.verb) as u8 as f64, top5.is_some() as u8 as f64, 0.0];
            for st in 0..3 {
                sums[st][0] += verb_ok[st];
                let vals = oracle_image(a, chosen[st]);
                for m in 0..4 {
                    sums[st][m + 1] += vals[m];
                }
            }
        }
        let n = imgs.len() as f64;
        let mean = sums.map(|row| row.map(|x| 100.0 * x / n));
        for st in 0..3 {
            for m in 0..5 {
                totals[st][m] += mean[st][m];
            }
        }
        let sm = |st: usize, verb: bool| SettingMetrics {
            verb: verb.then_some(mean[st][0]),
            value: mean[st][1],
            value_all: mean[st][2],
            grounded_value: mean[st][3],
            grounded_value_all: mean[st][4],
        };
        per_verb.push(VerbMetrics { verb: s(name), images: imgs.len(), top1: sm(0, true), top5: sm(1, true), ground_truth: sm(2, false) });
    }
    let nv = per_verb.len().max(1) as f64;
    let avg = totals.map(|row| row.map(|x| x / nv));
    let sm = |st: usize, verb: bool| SettingMetrics {
        verb: verb.then_some(avg[st][0]),
        value: avg[st][1],
        value_all: avg[st][2],
        grounded_value: avg[st][3],
        grounded_value_all: avg[st][4],
    };
    MetricsReport { images: anns.len(), top1: sm(0, true), top5: sm(1, true), ground_truth: sm(2, false), per_verb }
}

/// Table-1 requirement matrix as inequalities: within a setting grounded
/// metrics never exceed their ungrounded counterparts, and across settings
/// top-1 ≤ top-5 ≤ ground-truth verb.
pub fn requirement_chain_holds(r: &MetricsReport) -> bool {
    let eps = 1e-9;
    let fields = |m: &SettingMetrics| [m.value, m.value_all, m.grounded_value, m.grounded_value_all];
    let ordered = |a: &SettingMetrics, b: &SettingMetrics| fields(a).iter().zip(fields(b)).all(|(x, y)| *x <= y + eps);
    let across = |t1: &SettingMetrics, t5: &SettingMetrics, gt: &SettingMetrics| {
        ordered(t1, t5) && ordered(t5, gt) && t1.verb.unwrap() <= t5.verb.unwrap() + eps
    };
    r.dominance_holds()
        && across(&r.top1, &r.top5, &r.ground_truth)
        && r.per_verb.iter().all(|v| across(&v.top1, &v.top5, &v.ground_truth))
}

// ---- retrieval --------------------------------------------------------------

/// Records over a shared vocabulary of 12 verbs with fixed frame sizes.
pub fn random_records(n: usize, seed: u64) -> Vec<PredictionRecord> {
    let mut rng = Rng::new(seed);
    let frame_len = |v: usize| 1 + v % 4;
    let nouns = ["∅", "a", "b", "c"];
    (0..n)
        .map(|i| {
            let mut verbs: Vec<usize> = (0..12).collect();
            rng.shuffle(&mut verbs);
            let k = 1 + rng.below(5);
            let entries = verbs[..k]
                .iter()
                .map(|&v| VerbEntry {
                    verb: format!("v{v}"),
                    score: 0.0,
                    roles: (0..frame_len(v))
                        .map(|r| RolePrediction {
                            role: format!("role{r}"),
                            noun: nouns[rng.below(nouns.len())].to_string(),
                            bbox: (rng.uniform() < 0.7).then(|| random_box(&mut rng, 8, 8)),
                        })
                        .collect(),
                })
                .collect();
            PredictionRecord { image_id: format!("rec{i:04}"), width: 8, height: 8, entries, gt_verb_entry: None }
        })
        .collect()
}

/// Similarity written directly from its definition.
pub fn oracle_grsitsim(a: &PredictionRecord, b: &PredictionRecord) -> f64 {
    let mut best = 0.0f64;
    for i in 1..=a.entries.len().min(5) {
        for j in 1..=b.entries.len().min(5) {
            let (ea, eb) = (&a.entries[i - 1], &b.entries[j - 1]);
            if ea.verb != eb.verb {
                continue;
            }
            let n = ea.roles.len();
            let mut acc = 0.0;
            for k in 0..n {
                if ea.roles[k].noun == eb.roles[k].noun {
                    let iou = match (&ea.roles[k].bbox, &eb.roles[k].bbox) {
                        (Some(x), Some(y)) => oracle_iou(x, y),
                        _ => 0.0,
                    };
                    acc += 1.0 + iou;
                }
            }
            best = best.max(acc / (2.0 * i as f64 * j as f64 * n as f64));
        }
    }
    best
}
