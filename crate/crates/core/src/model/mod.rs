//! The full grounded situation recognizer: feature projection, verb-token
//! encoder, role-query decoder, prediction heads and inference.

mod checkpoint;
mod config;

pub use checkpoint::{meta_path, CheckpointMeta};
pub use config::{DropoutRates, LossWeights, ModelConfig, Precision, Smoothing};

use rayon::prelude::*;

use crate::boxes::{BoxCXCYWH, BoxXYXY};
use crate::error::{Error, Result};
use crate::ontology::{FeatureGrid, FrameSpace, SituationAnnotation, SpaceSummary};
use crate::record::{PredictionRecord, RolePrediction, VerbEntry};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Rng, Tensor, Var};
use crate::transformer::{
    decoder_layer, encoder_layer, AttentionBlock, AttentionMap, AttentionTrace, BlockConfig, DecoderAttention,
    DecoderLayerParams, EncoderLayerParams, NormParams,
};

/// Existence probability at or above which a predicted box is reported.
pub const BOX_THRESHOLD: f64 = 0.5;

/// Stack of affine layers with ReLU and dropout between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn new(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                (
                    store.add_xavier(format!("{prefix}.{i}.w"), w[1], w[0], ParamGroup::Main, rng),
                    store.add_const(format!("{prefix}.{i}.b"), &[w[1]], 0.0, ParamGroup::Main),
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var, dropout: f64) -> Result<Var> {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (g.p(*w)?, g.p(*b)?);
            h = g.tape.linear(h, w, Some(b))?;
            if i + 1 < self.layers.len() {
                h = g.tape.relu(h)?;
                h = g.dropout(h, dropout)?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum PosTable {
    /// Row half `[h, d/2]` and column half `[w, d/2]`.
    Factored { row: ParamId, col: ParamId },
    Full(ParamId),
}

/// Handles into the parameter store for every model component.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub backbone: Option<(ParamId, ParamId)>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub verb_token: ParamId,
    pub pos: Vec<PosTable>,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub verb_norm: NormParams,
    pub dec_norm: NormParams,
    pub verb_embed: Option<ParamId>,
    pub role_embed: ParamId,
    pub verb_head: Mlp,
    pub noun_head: Mlp,
    pub exist_head: Mlp,
    pub box_head: Mlp,
}

pub struct Model {
    pub config: ModelConfig,
    pub space: SpaceSummary,
    pub params: ModelParams,
    pub store: ParamStore,
}

/// Encoder outputs for one image.
pub struct Encoded {
    /// Normalized verb feature `[1, d]`.
    pub e_v: Var,
    /// Image features `[hw, d]`.
    pub e_img: Var,
    /// Per layer, per head self-attention weights `[1+hw, 1+hw]`.
    pub attention: Vec<Vec<Var>>,
}

/// Head outputs for the roles of one frame.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[|R_v|, |N|]` raw logits.
    pub noun_logits: Var,
    /// `[|R_v|, 4]` normalized `(cx, cy, w, h)` in `[0, 1]`.
    pub boxes: Var,
    /// `[|R_v|, 1]` existence probabilities.
    pub exist: Var,
}

/// Full forward pass of one sample.
pub struct SampleOutput {
    pub verb_logits: Var,
    pub heads: HeadOutput,
    pub encoded: Encoded,
    pub decoder_attention: Vec<DecoderAttention>,
}

/// Per-role head values conditioned on one verb.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundedPrediction {
    pub verb: usize,
    pub noun_logits: Vec<Vec<f64>>,
    pub boxes: Vec<BoxCXCYWH>,
    pub exist: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedRole {
    pub role: usize,
    pub noun: usize,
    /// Absolute pixel box, `None` when existence is below the threshold.
    pub bbox: Option<BoxXYXY>,
    pub exist: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SituationPrediction {
    pub verb_logits: Vec<f64>,
    pub verb: usize,
    pub roles: Vec<GatedRole>,
}

/// Indices of the `k` largest values, descending, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn argmax(values: &[f64]) -> usize {
    top_k(values, 1)[0]
}

/// Converts a normalized center box to absolute corners if `p` clears the threshold.
pub fn gate_box(b: BoxCXCYWH, p: f64, width: f64, height: f64) -> Option<BoxXYXY> {
    (p >= BOX_THRESHOLD).then(|| b.to_xyxy().scaled(width, height))
}

/// Closed-form parameter count for a configuration and vocabulary sizes.
/// `nouns` includes the unknown noun.
pub fn parameter_formula(cfg: &ModelConfig, verbs: usize, roles: usize, nouns: usize) -> usize {
    let (c, d, f) = (cfg.channels, cfg.d, cfg.ffn_dim);
    let (h, w) = (cfg.grid_h, cfg.grid_w);
    let tables = if cfg.per_layer_pos { cfg.encoder_layers + cfg.decoder_layers } else { 1 };
    let table = if cfg.pos_full_table { h * w * d } else { (h + w) * d / 2 };
    let ffn = 2 * d * f + f + d;
    let enc = 4 * d * d + ffn + 2 * 2 * d;
    let dec = 8 * d * d + ffn + 3 * 2 * d;
    let hidden = 2 * d;
    let two_layer = |out: usize| d * hidden + hidden + hidden * out + out;
    let backbone = if cfg.backbone { c * c + c } else { 0 };
    backbone
        + c * d
        + d
        + d
        + tables * table
        + cfg.encoder_layers * enc
        + cfg.decoder_layers * dec
        + 2 * 2 * d
        + verbs * cfg.d_v
        + roles * cfg.d_r
        + two_layer(verbs)
        + two_layer(nouns)
        + two_layer(1)
        + (d * hidden + hidden + hidden * hidden + hidden + hidden * 4 + 4)
}

impl Model {
    /// Freshly initialized model for `space`. All randomness comes from `seed`.
    pub fn new(config: ModelConfig, space: &FrameSpace, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (c, d) = (config.channels, config.d);
        let backbone = config.backbone.then(|| {
            (
                store.add("backbone.mix.w", Tensor::identity(c), ParamGroup::Backbone),
                store.add_const("backbone.mix.b", &[c], 0.0, ParamGroup::Backbone),
            )
        });
        let proj_w = store.add_xavier("input_proj.w", d, c, ParamGroup::Main, &mut rng);
        let proj_b = store.add_const("input_proj.b", &[d], 0.0, ParamGroup::Main);
        let verb_token = store.add_normal("verb_token", 1, d, &mut rng);
        let tables = if config.per_layer_pos { config.encoder_layers + config.decoder_layers } else { 1 };
        let pos = (0..tables)
            .map(|t| {
                if config.pos_full_table {
                    PosTable::Full(store.add_normal(format!("pos{t}.full"), config.cells(), d, &mut rng))
                } else {
                    PosTable::Factored {
                        row: store.add_normal(format!("pos{t}.row"), config.grid_h, d / 2, &mut rng),
                        col: store.add_normal(format!("pos{t}.col"), config.grid_w, d / 2, &mut rng),
                    }
                }
            })
            .collect();
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayerParams::new(&mut store, &format!("enc{l}"), d, config.heads, config.ffn_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayerParams::new(&mut store, &format!("dec{l}"), d, config.heads, config.ffn_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let verb_norm = NormParams::new(&mut store, "verb_norm", d);
        let dec_norm = NormParams::new(&mut store, "dec_norm", d);
        let verb_embed = (config.d_v > 0).then(|| store.add_normal("verb_embed", space.num_verbs(), config.d_v, &mut rng));
        let role_embed = store.add_normal("role_embed", space.num_roles(), config.d_r, &mut rng);
        let hd = 2 * d;
        let verb_head = Mlp::new(&mut store, "verb_head", &[d, hd, space.num_verbs()], &mut rng);
        let noun_head = Mlp::new(&mut store, "noun_head", &[d, hd, space.num_nouns()], &mut rng);
        let exist_head = Mlp::new(&mut store, "exist_head", &[d, hd, 1], &mut rng);
        let box_head = Mlp::new(&mut store, "box_head", &[d, hd, hd, 4], &mut rng);
        let params = ModelParams {
            backbone,
            proj_w,
            proj_b,
            verb_token,
            pos,
            encoder,
            decoder,
            verb_norm,
            dec_norm,
            verb_embed,
            role_embed,
            verb_head,
            noun_head,
            exist_head,
            box_head,
        };
        Ok(Model { config, space: SpaceSummary::from(space), params, store })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    /// Errors when `space` has different vocabulary sizes than the model was built for.
    pub fn check_space(&self, space: &FrameSpace) -> Result<()> {
        let s = SpaceSummary::from(space);
        if s != self.space {
            return Err(Error::validation(
                "space",
                format!(
                    "model expects {} verbs, {} roles, {} nouns; space has {}, {}, {}",
                    self.space.verbs, self.space.roles, self.space.nouns, s.verbs, s.roles, s.nouns
                ),
            ));
        }
        Ok(())
    }

    fn block_config(&self) -> BlockConfig {
        BlockConfig { pre_ln: self.config.pre_ln, dropout: self.config.dropout.transformer }
    }

    /// Channel reduction `c → d` of the grid: one output row per cell, row `j`
    /// is cell `(j / w, j % w)`.
    pub fn project_features(&self, g: &mut Graph<'_>, grid: &FeatureGrid) -> Result<Var> {
        let cfg = &self.config;
        if (grid.channels, grid.height, grid.width) != (cfg.channels, cfg.grid_h, cfg.grid_w) {
            return Err(Error::shape(
                "project_features",
                format!(
                    "grid {}x{}x{} vs configured {}x{}x{}",
                    grid.channels, grid.height, grid.width, cfg.channels, cfg.grid_h, cfg.grid_w
                ),
            ));
        }
        let mut x = g.tape.constant(grid.cell_matrix())?;
        if let Some((w, b)) = self.params.backbone {
            let (w, b) = (g.p(w)?, g.p(b)?);
            x = g.tape.linear(x, w, Some(b))?;
        }
        let (w, b) = (g.p(self.params.proj_w)?, g.p(self.params.proj_b)?);
        g.tape.linear(x, w, Some(b))
    }

    /// Positional encodings `[hw, d]`, one entry per table.
    pub fn positions(&self, g: &mut Graph<'_>) -> Result<Vec<Var>> {
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        let rows: Vec<usize> = (0..h * w).map(|j| j / w).collect();
        let cols: Vec<usize> = (0..h * w).map(|j| j % w).collect();
        self.params
            .pos
            .iter()
            .map(|t| match t {
                PosTable::Full(p) => g.p(*p),
                PosTable::Factored { row, col } => {
                    let (r, c) = (g.p(*row)?, g.p(*col)?);
                    let r = g.tape.gather_rows(r, &rows)?;
                    let c = g.tape.gather_rows(c, &cols)?;
                    g.tape.concat(&[r, c], 1)
                }
            })
            .collect()
    }

    fn encoder_pos(&self, pos: &[Var], layer: usize) -> Var {
        if self.config.per_layer_pos {
            pos[layer]
        } else {
            pos[0]
        }
    }

    fn decoder_pos(&self, pos: &[Var], layer: usize) -> Var {
        if self.config.per_layer_pos {
            pos[self.config.encoder_layers + layer]
        } else {
            pos[0]
        }
    }

    /// Prepends the verb token, runs the encoder and splits its output.
    pub fn encode(&self, g: &mut Graph<'_>, f_img: Var, pos: &[Var]) -> Result<Encoded> {
        let (d, hw) = (self.config.d, self.config.cells());
        if g.value(f_img).shape() != [hw, d] {
            return Err(Error::shape("encode", format!("features {:?} vs [{hw}, {d}]", g.value(f_img).shape())));
        }
        let token = g.p(self.params.verb_token)?;
        let mut x = g.tape.concat(&[token, f_img], 0)?;
        let zero = g.tape.constant(Tensor::zeros(&[1, d]))?;
        let cfg = self.block_config();
        let mut attention = Vec::with_capacity(self.params.encoder.len());
        for (l, layer) in self.params.encoder.iter().enumerate() {
            let p = self.encoder_pos(pos, l);
            let p_prime = g.tape.concat(&[zero, p], 0)?;
            let (y, w) = encoder_layer(g, x, p_prime, layer, &cfg)?;
            x = y;
            attention.push(w);
        }
        let v = g.tape.slice(x, 0, 0, 1)?;
        let e_v = self.params.verb_norm.apply(g, v)?;
        let e_img = g.tape.slice(x, 0, 1, hw)?;
        Ok(Encoded { e_v, e_img, attention })
    }

    /// Verb logits `[1, |V|]`.
    pub fn classify_verb(&self, g: &mut Graph<'_>, e_v: Var) -> Result<Var> {
        self.params.verb_head.apply(g, e_v, self.config.dropout.verb_head)
    }

    /// Role queries `[|R_v|, d]`, row `k` is verb embedding ⊕ role embedding of the k-th frame role.
    pub fn build_role_queries(&self, g: &mut Graph<'_>, space: &FrameSpace, verb: usize) -> Result<Var> {
        if verb >= space.num_verbs() {
            return Err(Error::InvalidArgument(format!("verb index {verb} outside {} verbs", space.num_verbs())));
        }
        let frame = space.frame(verb);
        let roles = g.p(self.params.role_embed)?;
        let r = g.tape.gather_rows(roles, frame)?;
        match self.params.verb_embed {
            None => Ok(r),
            Some(ve) => {
                let table = g.p(ve)?;
                let v = g.tape.gather_rows(table, &vec![verb; frame.len()])?;
                g.tape.concat(&[v, r], 1)
            }
        }
    }

    /// Runs the decoder from a zero input and normalizes its output.
    pub fn decode(&self, g: &mut Graph<'_>, queries: Var, e_img: Var, pos: &[Var]) -> Result<(Var, Vec<DecoderAttention>)> {
        let shape = g.value(queries).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.d {
            return Err(Error::shape("decode", format!("queries {shape:?}")));
        }
        let mut x = g.tape.constant(Tensor::zeros(&shape))?;
        let cfg = self.block_config();
        let mut attention = Vec::with_capacity(self.params.decoder.len());
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let p = self.decoder_pos(pos, l);
            let (y, a) = decoder_layer(g, x, queries, e_img, p, layer, &cfg)?;
            x = y;
            attention.push(a);
        }
        Ok((self.params.dec_norm.apply(g, x)?, attention))
    }

    pub fn predict_heads(&self, g: &mut Graph<'_>, features: Var) -> Result<HeadOutput> {
        let r = &self.config.dropout;
        let noun_logits = self.params.noun_head.apply(g, features, r.noun_head)?;
        let b = self.params.box_head.apply(g, features, r.box_head)?;
        let boxes = g.tape.sigmoid(b)?;
        let e = self.params.exist_head.apply(g, features, r.exist_head)?;
        let exist = g.tape.sigmoid(e)?;
        Ok(HeadOutput { noun_logits, boxes, exist })
    }

    /// Complete forward pass with the decoder conditioned on `verb`.
    pub fn forward_sample(&self, g: &mut Graph<'_>, space: &FrameSpace, grid: &FeatureGrid, verb: usize) -> Result<SampleOutput> {
        let f = self.project_features(g, grid)?;
        let pos = self.positions(g)?;
        let encoded = self.encode(g, f, &pos)?;
        let verb_logits = self.classify_verb(g, encoded.e_v)?;
        let q = self.build_role_queries(g, space, verb)?;
        let (feat, decoder_attention) = self.decode(g, q, encoded.e_img, &pos)?;
        let heads = self.predict_heads(g, feat)?;
        Ok(SampleOutput { verb_logits, heads, encoded, decoder_attention })
    }

    fn grounded(&self, g: &mut Graph<'_>, space: &FrameSpace, e_img: Var, pos: &[Var], verb: usize) -> Result<GroundedPrediction> {
        let q = self.build_role_queries(g, space, verb)?;
        let (feat, _) = self.decode(g, q, e_img, pos)?;
        let h = self.predict_heads(g, feat)?;
        let nl = g.value(h.noun_logits);
        Ok(GroundedPrediction {
            verb,
            noun_logits: (0..nl.rows()).map(|i| nl.row(i).to_vec()).collect(),
            boxes: (0..nl.rows()).map(|i| BoxCXCYWH::from_array(g.value(h.boxes).row(i).try_into().expect("4 columns"))).collect(),
            exist: g.value(h.exist).data().to_vec(),
        })
    }

    fn gated(&self, space: &FrameSpace, p: &GroundedPrediction, width: f64, height: f64) -> Vec<GatedRole> {
        space
            .frame(p.verb)
            .iter()
            .enumerate()
            .map(|(k, &role)| GatedRole {
                role,
                noun: argmax(&p.noun_logits[k]),
                bbox: gate_box(p.boxes[k], p.exist[k], width, height),
                exist: p.exist[k],
            })
            .collect()
    }

    /// Encodes the image once and returns verb logits plus what decoding needs.
    fn encode_image<'g>(&self, g: &mut Graph<'g>, grid: &FeatureGrid) -> Result<(Vec<f64>, Var, Vec<Var>)> {
        let f = self.project_features(g, grid)?;
        let pos = self.positions(g)?;
        let enc = self.encode(g, f, &pos)?;
        let z = self.classify_verb(g, enc.e_v)?;
        Ok((g.value(z).data().to_vec(), enc.e_img, pos))
    }

    /// Head values conditioned on `verb`, with dropout off.
    pub fn predict_grounded(&self, space: &FrameSpace, grid: &FeatureGrid, verb: usize) -> Result<GroundedPrediction> {
        self.check_space(space)?;
        let mut g = Graph::eval(&self.store);
        let (_, e_img, pos) = self.encode_image(&mut g, grid)?;
        self.grounded(&mut g, space, e_img, &pos, verb)
    }

    pub fn infer(&self, space: &FrameSpace, grid: &FeatureGrid, width: u32, height: u32) -> Result<SituationPrediction> {
        self.check_space(space)?;
        let mut g = Graph::eval(&self.store);
        let (verb_logits, e_img, pos) = self.encode_image(&mut g, grid)?;
        let verb = argmax(&verb_logits);
        let p = self.grounded(&mut g, space, e_img, &pos, verb)?;
        let roles = self.gated(space, &p, width as f64, height as f64);
        Ok(SituationPrediction { verb_logits, verb, roles })
    }

    fn entry(&self, space: &FrameSpace, p: &GroundedPrediction, score: f64, width: f64, height: f64) -> VerbEntry {
        VerbEntry {
            verb: space.verb_name(p.verb).to_string(),
            score,
            roles: self
                .gated(space, p, width, height)
                .into_iter()
                .map(|r| RolePrediction {
                    role: space.role_name(r.role).to_string(),
                    noun: space.noun_name(r.noun).to_string(),
                    bbox: r.bbox,
                })
                .collect(),
        }
    }

    /// Gated predictions for each of the top-`k` verbs, plus one conditioned on
    /// `gt_verb` when given.
    #[allow(clippy::too_many_arguments)]
    pub fn infer_topk(
        &self,
        space: &FrameSpace,
        grid: &FeatureGrid,
        image_id: &str,
        width: u32,
        height: u32,
        k: usize,
        gt_verb: Option<usize>,
    ) -> Result<PredictionRecord> {
        self.check_space(space)?;
        if k == 0 || k > space.num_verbs() {
            return Err(Error::InvalidArgument(format!("k = {k} outside 1..={}", space.num_verbs())));
        }
        let mut g = Graph::eval(&self.store);
        let (logits, e_img, pos) = self.encode_image(&mut g, grid)?;
        let (w, h) = (width as f64, height as f64);
        let mut entries = Vec::with_capacity(k);
        for v in top_k(&logits, k) {
            let p = self.grounded(&mut g, space, e_img, &pos, v)?;
            entries.push(self.entry(space, &p, logits[v], w, h));
        }
        let gt_verb_entry = match gt_verb {
            Some(v) => {
                let p = self.grounded(&mut g, space, e_img, &pos, v)?;
                Some(self.entry(space, &p, logits[v], w, h))
            }
            None => None,
        };
        Ok(PredictionRecord { image_id: image_id.to_string(), width, height, entries, gt_verb_entry })
    }

    /// Top-`k` records for many images, in input order, computed in parallel.
    pub fn predict_dataset(
        &self,
        space: &FrameSpace,
        items: &[(&SituationAnnotation, &FeatureGrid)],
        k: usize,
    ) -> Result<Vec<PredictionRecord>> {
        items
            .par_iter()
            .map(|(a, grid)| {
                let gt = space.verb_id(&a.verb);
                self.infer_topk(space, grid, &a.image_id, a.width, a.height, k, gt)
            })
            .collect()
    }

    /// Attention weights of every layer and head with the decoder conditioned on `verb`.
    pub fn extract_attention(&self, space: &FrameSpace, grid: &FeatureGrid, verb: usize, image_id: &str) -> Result<AttentionTrace> {
        self.check_space(space)?;
        let mut g = Graph::eval(&self.store);
        let out = self.forward_sample(&mut g, space, grid, verb)?;
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        let cells: Vec<String> = (0..h * w).map(|j| format!("cell_{}_{}", j / w, j % w)).collect();
        let mut tokens = vec!["verb_token".to_string()];
        tokens.extend(cells.iter().cloned());
        let roles: Vec<String> = space.frame_names(verb).into_iter().map(String::from).collect();
        let mut maps = Vec::new();
        let mut push = |block, layer, ws: &[Var], q: &[String], k: &[String]| {
            for (head, wv) in ws.iter().enumerate() {
                maps.push(AttentionMap {
                    block,
                    layer,
                    head,
                    query_labels: q.to_vec(),
                    key_labels: k.to_vec(),
                    weights: g.value(*wv).clone(),
                });
            }
        };
        for (l, ws) in out.encoded.attention.iter().enumerate() {
            push(AttentionBlock::EncoderSelf, l, ws, &tokens, &tokens);
        }
        for (l, a) in out.decoder_attention.iter().enumerate() {
            push(AttentionBlock::DecoderSelf, l, &a.self_weights, &roles, &roles);
            push(AttentionBlock::DecoderCross, l, &a.cross_weights, &roles, &cells);
        }
        Ok(AttentionTrace { image_id: image_id.to_string(), verb: space.verb_name(verb).to_string(), grid_h: h, grid_w: w, maps })
    }
}
