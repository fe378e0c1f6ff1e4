use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutRates {
    pub transformer: f64,
    pub verb_head: f64,
    pub noun_head: f64,
    pub exist_head: f64,
    pub box_head: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates { transformer: 0.15, verb_head: 0.3, noun_head: 0.3, exist_head: 0.2, box_head: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub verb: f64,
    pub noun: f64,
    pub exist: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { verb: 1.0, noun: 1.0, exist: 5.0, l1: 5.0, giou: 5.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Smoothing {
    pub verb: f64,
    pub noun: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing { verb: 0.3, noun: 0.2 }
    }
}

/// Numeric precision of stored checkpoints. Computation is always `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    /// Verb-embedding width of a role query; `d_v + d_r = d`. Zero disables verb embeddings.
    pub d_v: usize,
    pub d_r: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: DropoutRates,
    pub pre_ln: bool,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Backbone feature channels `c`.
    pub channels: usize,
    /// Trainable `c × c` channel mixer before the projection, in the backbone parameter group.
    pub backbone: bool,
    /// Full `hw × d` positional table instead of row half ⊕ column half.
    pub pos_full_table: bool,
    /// Separate positional table for every encoder and decoder layer.
    pub per_layer_pos: bool,
    pub loss_weights: LossWeights,
    pub smoothing: Smoothing,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 512,
            d_v: 256,
            d_r: 256,
            heads: 8,
            encoder_layers: 6,
            decoder_layers: 6,
            ffn_dim: 2048,
            dropout: DropoutRates::default(),
            pre_ln: true,
            grid_h: 16,
            grid_w: 16,
            channels: 2048,
            backbone: false,
            pos_full_table: false,
            per_layer_pos: false,
            loss_weights: LossWeights::default(),
            smoothing: Smoothing::default(),
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    /// Small configuration that trains in seconds on synthetic grids.
    pub fn desk(channels: usize, grid_h: usize, grid_w: usize) -> Self {
        ModelConfig {
            d: 64,
            d_v: 32,
            d_r: 32,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            grid_h,
            grid_w,
            channels,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation("model config", m));
        if self.d == 0 || self.d_r == 0 {
            return bad(format!("d = {} and d_r = {} must be positive", self.d, self.d_r));
        }
        if self.d_v + self.d_r != self.d {
            return bad(format!("d_v + d_r = {} + {} differs from d = {}", self.d_v, self.d_r, self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("{} heads do not divide d = {}", self.heads, self.d));
        }
        if !self.pos_full_table && self.d % 2 != 0 {
            return bad(format!("factored positional table needs even d, got {}", self.d));
        }
        if self.ffn_dim == 0 || self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return bad("ffn_dim, grid and channels must be positive".into());
        }
        let r = &self.dropout;
        for (name, v) in [
            ("transformer", r.transformer),
            ("verb_head", r.verb_head),
            ("noun_head", r.noun_head),
            ("exist_head", r.exist_head),
            ("box_head", r.box_head),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("dropout.{name} = {v} outside [0, 1)"));
            }
        }
        for (name, v) in [("verb", self.smoothing.verb), ("noun", self.smoothing.noun)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("smoothing.{name} = {v} outside [0, 1]"));
            }
        }
        let w = &self.loss_weights;
        if [w.verb, w.noun, w.exist, w.l1, w.giou].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}
