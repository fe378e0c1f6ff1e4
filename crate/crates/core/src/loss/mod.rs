//! Training losses on the tape, for single samples and role-padded batches.
//!
//! Every per-role term of a sample is averaged over that sample's roles (or
//! grounded roles for the box terms), and a batch loss is the mean of its
//! sample losses. Padding rows carry weight zero everywhere.

use serde::{Deserialize, Serialize};

use crate::boxes::BoxXYXY;
use crate::error::{Error, Result};
use crate::model::{LossWeights, Model};
use crate::ontology::{FeatureGrid, FrameSpace, SituationAnnotation};
use crate::tensor::{Graph, Tape, Tensor, Var};

/// Dummy target for rows without a box; its weight is always zero.
const DUMMY_BOX: [f64; 4] = [0.0, 0.0, 1.0, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub verb: f64,
    pub noun: f64,
    pub exist: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    /// Role slots and grounded role slots that entered the loss.
    pub roles: usize,
    pub grounded: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub verb: Var,
    pub noun: Var,
    pub exist: Var,
    pub l1: Var,
    pub giou: Var,
    pub total: Var,
}

/// `(1−ε)·onehot(gold) + ε/K`.
pub fn smoothed_target(classes: usize, gold: usize, eps: f64) -> Vec<f64> {
    let mut t = vec![eps / classes as f64; classes];
    t[gold] += 1.0 - eps;
    t
}

fn smoothed_rows(classes: usize, golds: &[Option<usize>], eps: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(golds.len() * classes);
    for g in golds {
        match g {
            Some(g) => data.extend(smoothed_target(classes, *g, eps)),
            None => data.extend(std::iter::repeat(0.0).take(classes)),
        }
    }
    Tensor::new(&[golds.len(), classes], data)
}

/// `Σ_i w_i · CE(z_i, smooth(gold_i))` over the rows of `logits [n, K]`.
pub fn verb_loss(tape: &mut Tape, logits: Var, golds: &[usize], weights: &[f64], eps: f64) -> Result<Var> {
    let k = tape.value(logits).cols();
    let golds: Vec<Option<usize>> = golds.iter().map(|g| Some(*g)).collect();
    let targets = smoothed_rows(k, &golds, eps)?;
    tape.cross_entropy_rows(logits, &targets, weights)
}

/// Noun loss over role rows: for every annotator, the weighted role
/// cross-entropy; the three are summed. `nouns[i]` is `None` for padding.
pub fn noun_loss(tape: &mut Tape, logits: Var, nouns: &[Option<[usize; 3]>], weights: &[f64], eps: f64) -> Result<Var> {
    let k = tape.value(logits).cols();
    if nouns.len() != tape.value(logits).rows() {
        return Err(Error::shape("noun_loss", format!("{} label rows for {} logit rows", nouns.len(), tape.value(logits).rows())));
    }
    let mut parts = Vec::with_capacity(3);
    for a in 0..3 {
        let golds: Vec<Option<usize>> = nouns.iter().map(|n| n.map(|n| n[a])).collect();
        let targets = smoothed_rows(k, &golds, eps)?;
        parts.push(tape.cross_entropy_rows(logits, &targets, weights)?);
    }
    let s = tape.add(parts[0], parts[1])?;
    tape.add(s, parts[2])
}

/// `Σ_i w_i · BCE(p_i, t_i)`.
pub fn existence_loss(tape: &mut Tape, probs: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
    tape.bce_rows(probs, targets, weights)
}

/// Per-row `1 − GIoU` between predicted normalized `(cx, cy, w, h)` rows and
/// normalized corner boxes, as an `[n, 1]` variable.
pub fn giou_terms(tape: &mut Tape, pred: Var, gt: &[[f64; 4]]) -> Result<Var> {
    let n = tape.value(pred).rows();
    if gt.len() != n || tape.value(pred).cols() != 4 {
        return Err(Error::shape("giou", format!("pred {:?}, {} targets", tape.value(pred).shape(), gt.len())));
    }
    let col = |t: &mut Tape, j: usize| t.slice(pred, 1, j, 1);
    let (cx, cy, w, h) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let px1 = tape.sub(cx, hw)?;
    let px2 = tape.add(cx, hw)?;
    let py1 = tape.sub(cy, hh)?;
    let py2 = tape.add(cy, hh)?;
    let gcol = |t: &mut Tape, j: usize| t.constant(Tensor::new(&[n, 1], gt.iter().map(|b| b[j]).collect())?);
    let (gx1, gy1, gx2, gy2) = (gcol(tape, 0)?, gcol(tape, 1)?, gcol(tape, 2)?, gcol(tape, 3)?);
    let ix1 = tape.maximum(px1, gx1)?;
    let iy1 = tape.maximum(py1, gy1)?;
    let ix2 = tape.minimum(px2, gx2)?;
    let iy2 = tape.minimum(py2, gy2)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let area_p = tape.mul(w, h)?;
    let area_g = tape.constant(Tensor::new(&[n, 1], gt.iter().map(|b| (b[2] - b[0]) * (b[3] - b[1])).collect())?)?;
    let union = tape.add(area_p, area_g)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let cx1 = tape.minimum(px1, gx1)?;
    let cy1 = tape.minimum(py1, gy1)?;
    let cx2 = tape.maximum(px2, gx2)?;
    let cy2 = tape.maximum(py2, gy2)?;
    let cw = tape.sub(cx2, cx1)?;
    let ch = tape.sub(cy2, cy1)?;
    let c = tape.mul(cw, ch)?;
    let slack = tape.sub(c, union)?;
    let slack = tape.div(slack, c)?;
    let giou = tape.sub(iou, slack)?;
    let neg = tape.scale(giou, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Weighted L1 (in center form) and GIoU losses. `gt[i]` is a normalized
/// corner box or `None`; rows without a box must have zero weight.
pub fn box_regression_losses(tape: &mut Tape, pred: Var, gt: &[Option<BoxXYXY>], weights: &[f64]) -> Result<(Var, Var)> {
    let n = gt.len();
    if tape.value(pred).shape() != [n, 4] || weights.len() != n {
        return Err(Error::shape("box_loss", format!("pred {:?}, {n} targets, {} weights", tape.value(pred).shape(), weights.len())));
    }
    if gt.iter().zip(weights).any(|(g, w)| g.is_none() && *w != 0.0) {
        return Err(Error::InvalidArgument("ungrounded role with non-zero box weight".into()));
    }
    let xyxy: Vec<[f64; 4]> = gt.iter().map(|g| g.map_or(DUMMY_BOX, |b| b.to_array())).collect();
    let cxcywh: Vec<f64> = xyxy.iter().flat_map(|b| BoxXYXY::from_array(*b).to_cxcywh().to_array()).collect();
    let target = tape.constant(Tensor::new(&[n, 4], cxcywh)?)?;
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    let per_elem: Vec<f64> = weights.iter().flat_map(|w| [*w; 4]).collect();
    let l1 = tape.weighted_sum(abs, &per_elem)?;
    let terms = giou_terms(tape, pred, &xyxy)?;
    let giou = tape.weighted_sum(terms, weights)?;
    Ok((l1, giou))
}

/// `λ_v L_v + λ_n L_n + λ_exist L_exist + λ_L1 L_L1 + λ_GIoU L_GIoU`.
pub fn total_loss(tape: &mut Tape, parts: [Var; 5], w: &LossWeights) -> Result<Var> {
    let lambdas = [w.verb, w.noun, w.exist, w.l1, w.giou];
    let mut total = tape.scale(parts[0], lambdas[0])?;
    for (p, l) in parts.iter().zip(lambdas).skip(1) {
        let s = tape.scale(*p, l)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Plain-number λ-combination, same order as [`total_loss`].
pub fn combine(parts: [f64; 5], w: &LossWeights) -> f64 {
    let lambdas = [w.verb, w.noun, w.exist, w.l1, w.giou];
    let mut total = lambdas[0] * parts[0];
    for (p, l) in parts.iter().zip(lambdas).skip(1) {
        total += l * p;
    }
    total
}

/// Supervision for one image with boxes normalized by the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTargets {
    pub verb: usize,
    pub nouns: Vec<[usize; 3]>,
    pub boxes: Vec<Option<BoxXYXY>>,
}

impl SampleTargets {
    pub fn new(ann: &SituationAnnotation, space: &FrameSpace) -> Self {
        let (w, h) = (ann.width as f64, ann.height as f64);
        SampleTargets {
            verb: ann.verb_id(space),
            nouns: ann
                .roles
                .iter()
                .map(|r| std::array::from_fn(|a| space.noun_id(&r.nouns[a]).expect("validated annotation")))
                .collect(),
            boxes: ann.roles.iter().map(|r| r.bbox.map(|b| b.normalized(w, h))).collect(),
        }
    }
}

fn pad_rows(g: &mut Graph<'_>, x: Var, rows: usize) -> Result<Var> {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    if r == rows {
        return Ok(x);
    }
    let z = g.tape.constant(Tensor::zeros(&[rows - r, c]))?;
    g.tape.concat(&[x, z], 0)
}

/// Loss of a batch with the decoder conditioned on each sample's ground-truth
/// verb. Role outputs are zero-padded to the largest frame in the batch.
pub fn batch_loss(
    g: &mut Graph<'_>,
    model: &Model,
    space: &FrameSpace,
    batch: &[(&SituationAnnotation, &FeatureGrid)],
) -> Result<(LossVars, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let b = batch.len() as f64;
    let targets: Vec<SampleTargets> = batch.iter().map(|(a, _)| SampleTargets::new(a, space)).collect();
    let rmax = targets.iter().map(|t| t.nouns.len()).max().unwrap_or(0);
    let mut verb_rows = Vec::with_capacity(batch.len());
    let (mut nouns_l, mut boxes_l, mut exist_l) = (Vec::new(), Vec::new(), Vec::new());
    let mut noun_labels = Vec::new();
    let mut box_targets = Vec::new();
    let mut exist_targets = Vec::new();
    let mut role_w = Vec::new();
    let mut box_w = Vec::new();
    let (mut roles, mut grounded) = (0, 0);
    for ((_, grid), t) in batch.iter().zip(&targets) {
        let out = model.forward_sample(g, space, grid, t.verb)?;
        verb_rows.push(out.verb_logits);
        nouns_l.push(pad_rows(g, out.heads.noun_logits, rmax)?);
        boxes_l.push(pad_rows(g, out.heads.boxes, rmax)?);
        exist_l.push(pad_rows(g, out.heads.exist, rmax)?);
        let r = t.nouns.len();
        let rg = t.boxes.iter().filter(|x| x.is_some()).count();
        roles += r;
        grounded += rg;
        for i in 0..rmax {
            let real = i < r;
            noun_labels.push(if real { Some(t.nouns[i]) } else { None });
            let bx = if real { t.boxes[i] } else { None };
            box_targets.push(bx);
            exist_targets.push(if bx.is_some() { 1.0 } else { 0.0 });
            role_w.push(if real { 1.0 / (b * r as f64) } else { 0.0 });
            box_w.push(if bx.is_some() { 1.0 / (b * rg as f64) } else { 0.0 });
        }
    }
    let cfg = &model.config;
    let z_v = g.tape.concat(&verb_rows, 0)?;
    let golds: Vec<usize> = targets.iter().map(|t| t.verb).collect();
    let verb = verb_loss(&mut g.tape, z_v, &golds, &vec![1.0 / b; batch.len()], cfg.smoothing.verb)?;
    let nl = g.tape.concat(&nouns_l, 0)?;
    let noun = noun_loss(&mut g.tape, nl, &noun_labels, &role_w, cfg.smoothing.noun)?;
    let ex = g.tape.concat(&exist_l, 0)?;
    let exist = existence_loss(&mut g.tape, ex, &exist_targets, &role_w)?;
    let bx = g.tape.concat(&boxes_l, 0)?;
    let (l1, giou) = box_regression_losses(&mut g.tape, bx, &box_targets, &box_w)?;
    let total = total_loss(&mut g.tape, [verb, noun, exist, l1, giou], &cfg.loss_weights)?;
    let v = |g: &Graph<'_>, x: Var| g.value(x).item();
    let breakdown = LossBreakdown {
        verb: v(g, verb),
        noun: v(g, noun),
        exist: v(g, exist),
        l1: v(g, l1),
        giou: v(g, giou),
        total: v(g, total),
        roles,
        grounded,
    };
    Ok((LossVars { verb, noun, exist, l1, giou, total }, breakdown))
}
