//! Attention, encoder-layer and decoder-layer math.
//!
//! Sequences are stored token-major: one row per token, `d` columns. Positional
//! encodings and role queries are added to attention keys/queries only, never
//! to values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// Stacked per-head projections, `[d, d]`; rows `m·d′..(m+1)·d′` belong to head `m`.
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide width {dim}")));
        }
        let mut mk = |n: &str| store.add_xavier(format!("{prefix}.{n}"), dim, dim, ParamGroup::Main, rng);
        Ok(AttentionParams { wq: mk("w_q"), wk: mk("w_k"), wv: mk("w_v"), wo: mk("w_o"), heads, dim })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        FfnParams {
            w1: store.add_xavier(format!("{prefix}.w1"), hidden, dim, ParamGroup::Main, rng),
            b1: store.add_const(format!("{prefix}.b1"), &[hidden], 0.0, ParamGroup::Main),
            w2: store.add_xavier(format!("{prefix}.w2"), dim, hidden, ParamGroup::Main, rng),
            b2: store.add_const(format!("{prefix}.b2"), &[dim], 0.0, ParamGroup::Main),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        NormParams {
            gain: store.add_const(format!("{prefix}.gain"), &[dim], 1.0, ParamGroup::Main),
            bias: store.add_const(format!("{prefix}.bias"), &[dim], 0.0, ParamGroup::Main),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.p(self.gain)?;
        let bias = g.p(self.bias)?;
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl EncoderLayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderLayerParams {
            self_attn: AttentionParams::new(store, &format!("{prefix}.self_attn"), dim, heads, rng)?,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), dim, ffn_dim, rng),
            norm1: NormParams::new(store, &format!("{prefix}.norm1"), dim),
            norm2: NormParams::new(store, &format!("{prefix}.norm2"), dim),
        })
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FfnParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub norm3: NormParams,
}

impl DecoderLayerParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, ffn_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: AttentionParams::new(store, &format!("{prefix}.self_attn"), dim, heads, rng)?,
            cross_attn: AttentionParams::new(store, &format!("{prefix}.cross_attn"), dim, heads, rng)?,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), dim, ffn_dim, rng),
            norm1: NormParams::new(store, &format!("{prefix}.norm1"), dim),
            norm2: NormParams::new(store, &format!("{prefix}.norm2"), dim),
            norm3: NormParams::new(store, &format!("{prefix}.norm3"), dim),
        })
    }
}

/// Residual wiring shared by every block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// `x + Dropout(Block(LN(x)))` when true, `LN(x + Dropout(Block(x)))` otherwise.
    pub pre_ln: bool,
    pub dropout: f64,
}

/// Scaled dot-product attention for one head: `q [n_q, d′]`, `k, v [n_kv, d′]`.
/// Returns the output `[n_q, d′]` and the row-stochastic weights `[n_q, n_kv]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (nq, dq) = (tape.value(q).rows(), tape.value(q).cols());
    let (nk, dk) = (tape.value(k).rows(), tape.value(k).cols());
    let nv = tape.value(v).rows();
    if dq != dk || nk != nv || tape.value(q).ndim() != 2 {
        return Err(Error::shape("attention", format!("q [{nq},{dq}], k [{nk},{dk}], v rows {nv}")));
    }
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (dq as f64).sqrt())?;
    let weights = tape.softmax(scaled, 1)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention. `q_add` is added to the query input and `k_add` to
/// the key input before projection; values always use the raw `x_kv`.
/// Returns the projected output and the per-head weights.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    x_q: Var,
    x_kv: Var,
    params: &AttentionParams,
    q_add: Option<Var>,
    k_add: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = params.dim;
    for (name, v) in [("query", Some(x_q)), ("key/value", Some(x_kv)), ("query additive", q_add), ("key additive", k_add)] {
        if let Some(v) = v {
            if g.value(v).cols() != d || g.value(v).ndim() != 2 {
                return Err(Error::shape("multi_head_attention", format!("{name} {:?} vs width {d}", g.value(v).shape())));
            }
        }
    }
    let q_in = match q_add {
        Some(a) => g.tape.add(x_q, a)?,
        None => x_q,
    };
    let k_in = match k_add {
        Some(a) => g.tape.add(x_kv, a)?,
        None => x_kv,
    };
    let (wq, wk, wv, wo) = (g.p(params.wq)?, g.p(params.wk)?, g.p(params.wv)?, g.p(params.wo)?);
    let q = g.tape.linear(q_in, wq, None)?;
    let k = g.tape.linear(k_in, wk, None)?;
    let v = g.tape.linear(x_kv, wv, None)?;
    let dh = params.head_dim();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for m in 0..params.heads {
        let (qm, km, vm) = if params.heads == 1 {
            (q, k, v)
        } else {
            (g.tape.slice(q, 1, m * dh, dh)?, g.tape.slice(k, 1, m * dh, dh)?, g.tape.slice(v, 1, m * dh, dh)?)
        };
        let (out, w) = attention(&mut g.tape, qm, km, vm)?;
        heads.push(out);
        weights.push(w);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.tape.concat(&heads, 1)? };
    Ok((g.tape.linear(cat, wo, None)?, weights))
}

/// Two-layer ReLU network with dropout on the hidden activation.
pub fn ffn(g: &mut Graph<'_>, x: Var, p: &FfnParams, dropout: f64) -> Result<Var> {
    let (w1, b1, w2, b2) = (g.p(p.w1)?, g.p(p.b1)?, g.p(p.w2)?, g.p(p.b2)?);
    let h = g.tape.linear(x, w1, Some(b1))?;
    let h = g.tape.relu(h)?;
    let h = g.dropout(h, dropout)?;
    g.tape.linear(h, w2, Some(b2))
}

/// Wraps `block` in a residual connection with layer normalization placed
/// according to `cfg.pre_ln`.
pub fn residual<F>(g: &mut Graph<'_>, x: Var, norm: &NormParams, cfg: &BlockConfig, block: F) -> Result<Var>
where
    F: FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
{
    if cfg.pre_ln {
        let h = norm.apply(g, x)?;
        let y = block(g, h)?;
        if g.value(y).shape() != g.value(x).shape() {
            return Err(Error::shape("residual", format!("block output {:?} vs input {:?}", g.value(y).shape(), g.value(x).shape())));
        }
        let y = g.dropout(y, cfg.dropout)?;
        g.tape.add(x, y)
    } else {
        let y = block(g, x)?;
        if g.value(y).shape() != g.value(x).shape() {
            return Err(Error::shape("residual", format!("block output {:?} vs input {:?}", g.value(y).shape(), g.value(x).shape())));
        }
        let y = g.dropout(y, cfg.dropout)?;
        let s = g.tape.add(x, y)?;
        norm.apply(g, s)
    }
}

/// One encoder layer over `[1+hw, d]` tokens; row 0 is the verb token and
/// `pos` must have a zero row 0. Returns the new tokens and per-head
/// self-attention weights.
pub fn encoder_layer(g: &mut Graph<'_>, x: Var, pos: Var, p: &EncoderLayerParams, cfg: &BlockConfig) -> Result<(Var, Vec<Var>)> {
    if g.value(pos).shape() != g.value(x).shape() {
        return Err(Error::shape("encoder_layer", format!("pos {:?} vs tokens {:?}", g.value(pos).shape(), g.value(x).shape())));
    }
    if g.value(pos).row(0).iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidArgument("positional row of the verb token must be zero".into()));
    }
    let mut weights = Vec::new();
    let x = residual(g, x, &p.norm1, cfg, |g, h| {
        let (out, w) = multi_head_attention(g, h, h, &p.self_attn, Some(pos), Some(pos))?;
        weights = w;
        Ok(out)
    })?;
    let x = residual(g, x, &p.norm2, cfg, |g, h| ffn(g, h, &p.ffn, cfg.dropout))?;
    Ok((x, weights))
}

/// Per-head attention weights of one decoder layer.
#[derive(Clone, Debug)]
pub struct DecoderAttention {
    pub self_weights: Vec<Var>,
    pub cross_weights: Vec<Var>,
}

/// One decoder layer. `x` and `queries` are `[|R_v|, d]`; `memory` and `pos`
/// are `[hw, d]`.
pub fn decoder_layer(
    g: &mut Graph<'_>,
    x: Var,
    queries: Var,
    memory: Var,
    pos: Var,
    p: &DecoderLayerParams,
    cfg: &BlockConfig,
) -> Result<(Var, DecoderAttention)> {
    if g.value(queries).shape() != g.value(x).shape() || g.value(pos).shape() != g.value(memory).shape() {
        return Err(Error::shape(
            "decoder_layer",
            format!(
                "x {:?}, queries {:?}, memory {:?}, pos {:?}",
                g.value(x).shape(),
                g.value(queries).shape(),
                g.value(memory).shape(),
                g.value(pos).shape()
            ),
        ));
    }
    let mut self_weights = Vec::new();
    let mut cross_weights = Vec::new();
    let x = residual(g, x, &p.norm1, cfg, |g, h| {
        let (out, w) = multi_head_attention(g, h, h, &p.self_attn, Some(queries), Some(queries))?;
        self_weights = w;
        Ok(out)
    })?;
    let x = residual(g, x, &p.norm2, cfg, |g, h| {
        let (out, w) = multi_head_attention(g, h, memory, &p.cross_attn, Some(queries), Some(pos))?;
        cross_weights = w;
        Ok(out)
    })?;
    let x = residual(g, x, &p.norm3, cfg, |g, h| ffn(g, h, &p.ffn, cfg.dropout))?;
    Ok((x, DecoderAttention { self_weights, cross_weights }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionBlock {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl AttentionBlock {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionBlock::EncoderSelf => "enc_self",
            AttentionBlock::DecoderSelf => "dec_self",
            AttentionBlock::DecoderCross => "dec_cross",
        }
    }
}

/// Weights of one head in one layer: rows are queries, columns keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub block: AttentionBlock,
    pub layer: usize,
    pub head: usize,
    pub query_labels: Vec<String>,
    pub key_labels: Vec<String>,
    pub weights: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub image_id: String,
    pub verb: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub maps: Vec<AttentionMap>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    file: String,
    block: AttentionBlock,
    layer: usize,
    head: usize,
    query_labels: Vec<String>,
    key_labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TraceIndex {
    image_id: String,
    verb: String,
    grid_h: usize,
    grid_w: usize,
    maps: Vec<IndexEntry>,
}

impl AttentionTrace {
    pub fn find(&self, block: AttentionBlock, layer: usize, head: usize) -> Option<&AttentionMap> {
        self.maps.iter().find(|m| m.block == block && m.layer == layer && m.head == head)
    }

    /// Verb-token attention over image cells as an `h × w` map, renormalized
    /// to sum to 1 after dropping the verb token's attention to itself.
    pub fn verb_token_map(&self, layer: usize, head: usize) -> Option<Tensor> {
        let m = self.find(AttentionBlock::EncoderSelf, layer, head)?;
        let cells = &m.weights.row(0)[1..];
        let z: f64 = cells.iter().sum();
        let data = cells.iter().map(|v| if z > 0.0 { v / z } else { 1.0 / cells.len() as f64 }).collect();
        Tensor::new(&[self.grid_h, self.grid_w], data).ok()
    }

    /// Cross-attention of one role over image cells as an `h × w` map.
    pub fn role_map(&self, layer: usize, head: usize, role: usize) -> Option<Tensor> {
        let m = self.find(AttentionBlock::DecoderCross, layer, head)?;
        if role >= m.weights.rows() {
            return None;
        }
        Tensor::new(&[self.grid_h, self.grid_w], m.weights.row(role).to_vec()).ok()
    }

    /// Writes one CSV per map plus `index.json` into `dir`. Returns the CSV paths.
    pub fn write_dir(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        let mut paths = Vec::new();
        for m in &self.maps {
            let file = format!("{}_l{}_h{}.csv", m.block.tag(), m.layer, m.head);
            let path = dir.join(&file);
            let mut text = String::from("query");
            for k in &m.key_labels {
                text.push(',');
                text.push_str(k);
            }
            text.push('\n');
            for (i, q) in m.query_labels.iter().enumerate() {
                text.push_str(q);
                for v in m.weights.row(i) {
                    text.push_str(&format!(",{v:e}"));
                }
                text.push('\n');
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            paths.push(path);
            entries.push(IndexEntry {
                file,
                block: m.block,
                layer: m.layer,
                head: m.head,
                query_labels: m.query_labels.clone(),
                key_labels: m.key_labels.clone(),
            });
        }
        let index = TraceIndex {
            image_id: self.image_id.clone(),
            verb: self.verb.clone(),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            maps: entries,
        };
        let path = dir.join("index.json");
        let json = serde_json::to_string_pretty(&index).expect("serializable index");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(paths)
    }
}

/// Reads back a CSV written by [`AttentionTrace::write_dir`] as `(query labels, key labels, weights)`.
pub fn read_attention_csv(path: &std::path::Path) -> Result<(Vec<String>, Vec<String>, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::validation(path.display().to_string(), "empty file"))?;
    let keys: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let mut queries = Vec::new();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let mut parts = l.split(',');
        queries.push(parts.next().unwrap_or_default().to_string());
        let row: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let row = row.map_err(|e| Error::validation(format!("{}:{}", path.display(), i + 2), e.to_string()))?;
        rows.push(row);
    }
    Ok((queries, keys, Tensor::from_rows(&rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_params, Tensor};

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_examples() {
        let mut t = Tape::new();
        // Single key: output is the single value.
        let q = t.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![0.2, 5.0]]).unwrap()).unwrap();
        let k = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        let v = t.constant(Tensor::from_rows(&[vec![7.0, 8.0]]).unwrap()).unwrap();
        let (o, _) = attention(&mut t, q, k, v).unwrap();
        assert_eq!(t.value(o).data(), &[7.0, 8.0, 7.0, 8.0]);

        // Identical keys: uniform weights.
        let k = t.constant(Tensor::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap()).unwrap();
        let v = t.constant(Tensor::from_rows(&vec![vec![0.0, 0.0]; 4]).unwrap()).unwrap();
        let (_, w) = attention(&mut t, q, k, v).unwrap();
        assert!(t.value(w).data().iter().all(|x| (x - 0.25).abs() < 1e-15));

        // d′ = 1, q = 2, keys (0, 1), values (10, 20): weights softmax([0, 2]).
        let q = t.constant(Tensor::from_rows(&[vec![2.0]]).unwrap()).unwrap();
        let k = t.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap()).unwrap();
        let v = t.constant(Tensor::from_rows(&[vec![10.0], vec![20.0]]).unwrap()).unwrap();
        let (o, w) = attention(&mut t, q, k, v).unwrap();
        let e2 = 2f64.exp();
        let oracle = [1.0 / (1.0 + e2), e2 / (1.0 + e2)];
        assert!((t.value(w).data()[0] - oracle[0]).abs() < 1e-15);
        assert!((t.value(w).data()[0] - 0.1192).abs() < 1e-4);
        assert!((t.value(w).data()[1] - 0.8808).abs() < 1e-4);
        assert!((t.value(o).item() - (10.0 * oracle[0] + 20.0 * oracle[1])).abs() < 1e-12);
        assert!((t.value(o).item() - 18.808).abs() < 1e-3);

        let bad = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(attention(&mut t, q, bad, v).is_err());
    }

    /// Straight-line multi-head attention on plain arrays: every head uses an
    /// explicit `d′ × d` block of each projection and nested loops.
    fn reference_mha(store: &ParamStore, p: &AttentionParams, xq: &Tensor, xkv: &Tensor, qa: &Tensor, ka: &Tensor) -> Vec<f64> {
        let d = p.dim;
        let dh = p.head_dim();
        let (nq, nk) = (xq.rows(), xkv.rows());
        let w = |id: ParamId, r: usize, c: usize| store.get(id).value.at(r, c);
        let proj = |id: ParamId, x: &Tensor, add: Option<&Tensor>, m: usize, i: usize, a: usize| -> f64 {
            (0..d).map(|c| w(id, m * dh + a, c) * (x.at(i, c) + add.map_or(0.0, |t| t.at(i, c)))).sum()
        };
        let mut cat = vec![vec![0.0; d]; nq];
        for m in 0..p.heads {
            for i in 0..nq {
                let scores: Vec<f64> = (0..nk)
                    .map(|j| (0..dh).map(|a| proj(p.wq, xq, Some(qa), m, i, a) * proj(p.wk, xkv, Some(ka), m, j, a)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for a in 0..dh {
                    cat[i][m * dh + a] = (0..nk).map(|j| (scores[j] - mx).exp() / z * proj(p.wv, xkv, None, m, j, a)).sum();
                }
            }
        }
        let mut out = Vec::new();
        for row in cat {
            for r in 0..d {
                out.push((0..d).map(|c| w(p.wo, r, c) * row[c]).sum());
            }
        }
        out
    }

    #[test]
    fn mha_matches_reference_implementation() {
        let mut rng = Rng::new(17);
        for (heads, nq, nk) in [(1, 4, 4), (2, 4, 4), (4, 3, 5)] {
            let mut store = ParamStore::new();
            let p = AttentionParams::new(&mut store, "a", 4, heads, &mut rng).unwrap();
            let xq = rand_tensor(&mut rng, &[nq, 4]);
            let xkv = rand_tensor(&mut rng, &[nk, 4]);
            let qa = rand_tensor(&mut rng, &[nq, 4]);
            let ka = rand_tensor(&mut rng, &[nk, 4]);
            let mut g = Graph::eval(&store);
            let (vq, vkv) = (g.tape.constant(xq.clone()).unwrap(), g.tape.constant(xkv.clone()).unwrap());
            let (vqa, vka) = (g.tape.constant(qa.clone()).unwrap(), g.tape.constant(ka.clone()).unwrap());
            let (out, w) = multi_head_attention(&mut g, vq, vkv, &p, Some(vqa), Some(vka)).unwrap();
            let oracle = reference_mha(&store, &p, &xq, &xkv, &qa, &ka);
            for (a, b) in g.value(out).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert_eq!(w.len(), heads);
            for wm in w {
                for r in 0..nq {
                    assert!((g.value(wm).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
            // Zero additives reproduce plain attention.
            let zq = g.tape.constant(Tensor::zeros(&[nq, 4])).unwrap();
            let zk = g.tape.constant(Tensor::zeros(&[nk, 4])).unwrap();
            let (a, _) = multi_head_attention(&mut g, vq, vkv, &p, Some(zq), Some(zk)).unwrap();
            let (b, _) = multi_head_attention(&mut g, vq, vkv, &p, None, None).unwrap();
            assert_eq!(g.value(a), g.value(b));
        }
    }

    #[test]
    fn bad_head_count_rejected() {
        let mut store = ParamStore::new();
        assert!(AttentionParams::new(&mut store, "a", 6, 4, &mut Rng::new(1)).is_err());
    }

    fn block_cfg(pre_ln: bool) -> BlockConfig {
        BlockConfig { pre_ln, dropout: 0.15 }
    }

    #[test]
    fn residual_with_zero_block_is_identity_and_ln_placements_differ() {
        let mut store = ParamStore::new();
        let norm = NormParams::new(&mut store, "n", 4);
        let mut rng = Rng::new(2);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut g = Graph::train(&store, Rng::new(5));
        let xv = g.tape.constant(x.clone()).unwrap();
        let y = residual(&mut g, xv, &norm, &block_cfg(true), |g, h| g.tape.scale(h, 0.0)).unwrap();
        assert_eq!(g.value(y), &x);

        let mut g = Graph::eval(&store);
        let xv = g.tape.constant(x.clone()).unwrap();
        let block = |g: &mut Graph<'_>, h: Var| g.tape.scale(h, 2.0);
        let pre = residual(&mut g, xv, &norm, &block_cfg(true), block).unwrap();
        let pre2 = residual(&mut g, xv, &norm, &block_cfg(true), block).unwrap();
        let post = residual(&mut g, xv, &norm, &block_cfg(false), block).unwrap();
        assert_eq!(g.value(pre), g.value(pre2));
        assert_ne!(g.value(pre), g.value(post));
    }

    struct Setup {
        store: ParamStore,
        enc: EncoderLayerParams,
        dec: DecoderLayerParams,
    }

    fn setup(d: usize, heads: usize) -> Setup {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(23);
        let enc = EncoderLayerParams::new(&mut store, "enc", d, heads, 2 * d, &mut rng).unwrap();
        let dec = DecoderLayerParams::new(&mut store, "dec", d, heads, 2 * d, &mut rng).unwrap();
        // Non-trivial norms so the check covers gain/bias paths.
        for p in store.iter_mut() {
            if p.name.contains("norm") {
                for v in p.value.data_mut() {
                    *v += rng.uniform_range(-0.3, 0.3);
                }
            }
        }
        Setup { store, enc, dec }
    }

    fn with_zero_first_row(mut t: Tensor) -> Tensor {
        let c = t.cols();
        t.data_mut()[..c].iter_mut().for_each(|v| *v = 0.0);
        t
    }

    #[test]
    fn encoder_layer_shape_sensitivity_and_equivariance() {
        let s = setup(8, 2);
        let mut rng = Rng::new(4);
        let cfg = block_cfg(true);
        let x = rand_tensor(&mut rng, &[2, 8]);
        let pos = with_zero_first_row(rand_tensor(&mut rng, &[2, 8]));
        let mut g = Graph::eval(&s.store);
        let (xv, pv) = (g.tape.constant(x).unwrap(), g.tape.constant(pos).unwrap());
        let (y, w) = encoder_layer(&mut g, xv, pv, &s.enc, &cfg).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8]);
        assert_eq!(w.len(), 2);

        let bad = g.tape.constant(rand_tensor(&mut rng, &[2, 8])).unwrap();
        assert!(encoder_layer(&mut g, xv, bad, &s.enc, &cfg).is_err());

        // Permuting image tokens with their encodings permutes the outputs.
        let n = 6;
        let x = rand_tensor(&mut rng, &[1 + n, 8]);
        let pos = with_zero_first_row(rand_tensor(&mut rng, &[1 + n, 8]));
        let perm = [0, 3, 1, 6, 2, 5, 4];
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::eval(&s.store);
        let (a, pa) = (g.tape.constant(x.clone()).unwrap(), g.tape.constant(pos.clone()).unwrap());
        let (b, pb) = (g.tape.constant(permute(&x)).unwrap(), g.tape.constant(permute(&pos)).unwrap());
        let (ya, _) = encoder_layer(&mut g, a, pa, &s.enc, &cfg).unwrap();
        let (yb, _) = encoder_layer(&mut g, b, pb, &s.enc, &cfg).unwrap();
        let expect = permute(g.value(ya));
        for (p, q) in expect.data().iter().zip(g.value(yb).data()) {
            assert!((p - q).abs() < 1e-12);
        }

        // Changing one image feature changes the verb-token output.
        let mut x2 = x.clone();
        x2.data_mut()[3 * 8 + 5] += 0.5;
        let c = g.tape.constant(x2).unwrap();
        let (yc, _) = encoder_layer(&mut g, c, pa, &s.enc, &cfg).unwrap();
        let diff: f64 = g.value(ya).row(0).iter().zip(g.value(yc).row(0)).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn decoder_layer_equivariance_and_stochastic_rows() {
        let s = setup(8, 4);
        let mut rng = Rng::new(8);
        let cfg = block_cfg(true);
        let (r, hw) = (4, 5);
        let x = rand_tensor(&mut rng, &[r, 8]);
        let q = rand_tensor(&mut rng, &[r, 8]);
        let mem = rand_tensor(&mut rng, &[hw, 8]);
        let pos = rand_tensor(&mut rng, &[hw, 8]);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::eval(&s.store);
        let m = g.tape.constant(mem).unwrap();
        let p = g.tape.constant(pos).unwrap();
        let (xa, qa) = (g.tape.constant(x.clone()).unwrap(), g.tape.constant(q.clone()).unwrap());
        let (xb, qb) = (g.tape.constant(permute(&x)).unwrap(), g.tape.constant(permute(&q)).unwrap());
        let (ya, att) = decoder_layer(&mut g, xa, qa, m, p, &s.dec, &cfg).unwrap();
        let (yb, _) = decoder_layer(&mut g, xb, qb, m, p, &s.dec, &cfg).unwrap();
        let expect = permute(g.value(ya));
        for (a, b) in expect.data().iter().zip(g.value(yb).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for w in att.cross_weights.iter().chain(&att.self_weights) {
            let t = g.value(*w);
            for i in 0..t.rows() {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(g.value(att.cross_weights[0]).shape(), &[r, hw]);

        // A single role degenerates self-attention to a self-loop.
        let one = g.tape.constant(rand_tensor(&mut rng, &[1, 8])).unwrap();
        let (y1, att1) = decoder_layer(&mut g, one, one, m, p, &s.dec, &cfg).unwrap();
        assert_eq!(g.value(y1).shape(), &[1, 8]);
        assert_eq!(g.value(att1.self_weights[0]).data(), &[1.0]);
    }

    #[test]
    fn block_gradients_pass_grad_check() {
        let s = setup(8, 2);
        let mut rng = Rng::new(12);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let pos = with_zero_first_row(rand_tensor(&mut rng, &[3, 8]));
        let q = rand_tensor(&mut rng, &[2, 8]);
        let mem = rand_tensor(&mut rng, &[3, 8]);
        let proj = rand_tensor(&mut rng, &[2, 8]);
        let proj_e = rand_tensor(&mut rng, &[3, 8]);
        for pre_ln in [true, false] {
            let cfg = block_cfg(pre_ln);
            let report = grad_check_params(
                &s.store,
                |g| {
                    let (xv, pv) = (g.tape.constant(x.clone())?, g.tape.constant(pos.clone())?);
                    let (e, _) = encoder_layer(g, xv, pv, &s.enc, &cfg)?;
                    let qv = g.tape.constant(q.clone())?;
                    let mv = g.tape.constant(mem.clone())?;
                    let zero = g.tape.constant(Tensor::zeros(&[2, 8]))?;
                    let (dd, _) = decoder_layer(g, zero, qv, mv, mv, &s.dec, &cfg)?;
                    let pe = g.tape.constant(proj_e.clone())?;
                    let pd = g.tape.constant(proj.clone())?;
                    let a = g.tape.mul(e, pe)?;
                    let b = g.tape.mul(dd, pd)?;
                    let sa = g.tape.sum(a)?;
                    let sb = g.tape.sum(b)?;
                    g.tape.add(sa, sb)
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "pre_ln={pre_ln}: {report:?}");
        }
    }
}
