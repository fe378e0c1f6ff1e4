//! Mini-batch training with seeded shuffling, JSON-lines logging and
//! per-epoch checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{batch_loss, LossBreakdown};
use crate::model::Model;
use crate::ontology::{FeatureGrid, FrameSpace, SituationAnnotation};
use crate::optim::{clip_gradients, AdamW, OptimizerConfig};
use crate::tensor::{Graph, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    /// Checkpoint overwritten at the end of every epoch.
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines log, one entry per step.
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            seed: 0,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
            checkpoint: None,
            log: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub verb: f64,
    pub noun: f64,
    pub exist: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    /// Step-averaged losses per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub steps: usize,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.verb += b.verb / n;
        m.noun += b.noun / n;
        m.exist += b.exist / n;
        m.l1 += b.l1 / n;
        m.giou += b.giou / n;
        m.total += b.total / n;
        m.roles += b.roles;
        m.grounded += b.grounded;
    }
    m
}

/// Trains `model` in place. Given the same model, data and config, the log
/// and the final parameters are bitwise reproducible.
pub fn train(
    model: &mut Model,
    space: &FrameSpace,
    data: &[(&SituationAnnotation, &FeatureGrid)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("train config", "batch_size must be at least 1"));
    }
    model.check_space(space)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store)?;
    let mut rng = Rng::new(cfg.seed);
    let mut dropout_rng = rng.fork();
    let mut log_file = match &cfg.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut report = TrainReport::default();
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let lr_scale = cfg.optimizer.schedule(epoch);
        let mut seen = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if report.steps >= max_steps {
                break;
            }
            let batch: Vec<_> = chunk.iter().map(|&i| data[i]).collect();
            model.store.zero_grads();
            let (grads, breakdown) = {
                let mut g = Graph::train(&model.store, dropout_rng);
                let (vars, breakdown) = batch_loss(&mut g, model, space, &batch)?;
                let grads = g.backward(vars.total)?;
                dropout_rng = g.take_rng().expect("training graph owns an rng");
                (grads, breakdown)
            };
            model.store.accumulate(&grads);
            let grad_norm = model.store.grad_norm();
            clip_gradients(&mut model.store, cfg.optimizer.clip_norm);
            opt.update(&mut model.store, lr_scale)?;
            report.steps += 1;
            let entry = LogEntry {
                step: report.steps,
                epoch,
                verb: breakdown.verb,
                noun: breakdown.noun,
                exist: breakdown.exist,
                l1: breakdown.l1,
                giou: breakdown.giou,
                total: breakdown.total,
                grad_norm,
                lr: cfg.optimizer.lr * lr_scale,
            };
            if let (Some(f), Some(p)) = (log_file.as_mut(), &cfg.log) {
                let line = serde_json::to_string(&entry).expect("serializable log entry");
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            report.log.push(entry);
            seen.push(breakdown);
        }
        if !seen.is_empty() {
            report.epochs.push(mean_breakdown(&seen));
            if let Some(p) = &cfg.checkpoint {
                model.save(p, report.steps as u64, epoch as u64 + 1, Some(rng.state()))?;
            }
        }
        if report.steps >= max_steps {
            break 'epochs;
        }
    }
    if let (Some(f), Some(p)) = (log_file.as_mut(), &cfg.log) {
        f.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}
