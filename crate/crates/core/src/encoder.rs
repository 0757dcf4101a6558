//! Post-norm Transformer encoder producing one hidden vector per token.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::segmenter::TokenizedFunction;
use crate::tensor::{Binding, Graph, ParamStore, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// Layer norm applied after each residual addition.
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub norm: NormPlacement,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            hidden: 64,
            ffn_dim: 256,
            max_len: 512,
            vocab_size: 4096,
            dropout: 0.1,
            norm: NormPlacement::Post,
        }
    }
}

impl EncoderConfig {
    /// 12 layers, 12 heads, hidden size 768.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            heads: 12,
            hidden: 768,
            ffn_dim: 3072,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1".into());
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph handles of one encoder block.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub token_table: Var,
    pub pos_table: Var,
    pub layers: Vec<LayerVars>,
}

fn layer_name(l: usize, what: &str) -> String {
    format!("encoder.layer{l}.{what}")
}

fn head_name(l: usize, h: usize, what: &str) -> String {
    format!("encoder.layer{l}.head{h}.{what}")
}

fn normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("finite init")
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    normal(rng, vec![fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt())
}

fn filled(n: usize, v: f64) -> Tensor {
    Tensor::vector(vec![v; n]).expect("finite init")
}

/// Adds freshly initialized encoder parameters to `store`.
pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R, store: &mut ParamStore) {
    let d = cfg.hidden;
    let dk = cfg.head_dim();
    store.insert("encoder.token_table", normal(rng, vec![cfg.vocab_size, d], 0.02));
    store.insert("encoder.pos_table", normal(rng, vec![cfg.max_len, d], 0.02));
    for l in 0..cfg.layers {
        for h in 0..cfg.heads {
            store.insert(head_name(l, h, "wq"), xavier(rng, d, dk));
            store.insert(head_name(l, h, "wk"), xavier(rng, d, dk));
            store.insert(head_name(l, h, "wv"), xavier(rng, d, dk));
        }
        store.insert(layer_name(l, "wo"), xavier(rng, d, d));
        store.insert(layer_name(l, "ln1.gamma"), filled(d, 1.0));
        store.insert(layer_name(l, "ln1.beta"), filled(d, 0.0));
        store.insert(layer_name(l, "ffn.w1"), xavier(rng, d, cfg.ffn_dim));
        store.insert(layer_name(l, "ffn.b1"), filled(cfg.ffn_dim, 0.0));
        store.insert(layer_name(l, "ffn.w2"), xavier(rng, cfg.ffn_dim, d));
        store.insert(layer_name(l, "ffn.b2"), filled(d, 0.0));
        store.insert(layer_name(l, "ln2.gamma"), filled(d, 1.0));
        store.insert(layer_name(l, "ln2.beta"), filled(d, 0.0));
    }
}

impl EncoderVars {
    pub fn from_binding(cfg: &EncoderConfig, b: &Binding) -> Result<Self, TensorError> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let per_head = |what: &str| {
                    (0..cfg.heads)
                        .map(|h| b.get(&head_name(l, h, what)))
                        .collect::<Result<Vec<_>, _>>()
                };
                Ok(LayerVars {
                    wq: per_head("wq")?,
                    wk: per_head("wk")?,
                    wv: per_head("wv")?,
                    wo: b.get(&layer_name(l, "wo"))?,
                    ln1_gamma: b.get(&layer_name(l, "ln1.gamma"))?,
                    ln1_beta: b.get(&layer_name(l, "ln1.beta"))?,
                    ffn_w1: b.get(&layer_name(l, "ffn.w1"))?,
                    ffn_b1: b.get(&layer_name(l, "ffn.b1"))?,
                    ffn_w2: b.get(&layer_name(l, "ffn.w2"))?,
                    ffn_b2: b.get(&layer_name(l, "ffn.b2"))?,
                    ln2_gamma: b.get(&layer_name(l, "ln2.gamma"))?,
                    ln2_beta: b.get(&layer_name(l, "ln2.beta"))?,
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(Self {
            token_table: b.get("encoder.token_table")?,
            pos_table: b.get("encoder.pos_table")?,
            layers,
        })
    }
}

/// Token embedding plus positional embedding, one row per token.
pub fn embed(g: &mut Graph, vars: &EncoderVars, tokens: &TokenizedFunction) -> Result<Var, ModelError> {
    let max_len = g.shape(vars.pos_table)[0];
    let vocab = g.shape(vars.token_table)[0];
    if tokens.len() > max_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max_len,
        });
    }
    if let Some(&id) = tokens.token_ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(ModelError::TokenOutOfVocab { id, vocab });
    }
    let ids: Vec<usize> = tokens.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = tokens.positions().collect();
    let tok = g.embedding(vars.token_table, &ids)?;
    let pos = g.embedding(vars.pos_table, &positions)?;
    Ok(g.add(tok, pos)?)
}

/// `softmax(Q Kᵀ / √d_k) V`, softmax taken over keys.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, d_k: usize) -> Result<Var, TensorError> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v)
}

/// `Concat(head_1..head_h) W^O` with `head_i = Attention(X W^Q_i, X W^K_i, X W^V_i)`.
pub fn multi_head_attention(g: &mut Graph, x: Var, layer: &LayerVars) -> Result<Var, TensorError> {
    let heads = layer.wq.len();
    if heads == 0 || layer.wk.len() != heads || layer.wv.len() != heads {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            detail: "per-head projection counts differ".into(),
        });
    }
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.matmul(x, layer.wq[h])?;
        let k = g.matmul(x, layer.wk[h])?;
        let v = g.matmul(x, layer.wv[h])?;
        let d_k = g.shape(q)[1];
        outs.push(scaled_dot_attention(g, q, k, v, d_k)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.matmul(cat, layer.wo)
}

fn block<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    layer: &LayerVars,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let rate = if mode == Mode::Train { dropout } else { 0.0 };
    let attn = multi_head_attention(g, x, layer)?;
    let attn = g.dropout(attn, rate, rng)?;
    let res = g.add(x, attn)?;
    let x1 = g.layer_norm(res, layer.ln1_gamma, layer.ln1_beta, LN_EPS)?;
    let hid = g.matmul(x1, layer.ffn_w1)?;
    let hid = g.add_row(hid, layer.ffn_b1)?;
    let hid = g.relu(hid)?;
    let ff = g.matmul(hid, layer.ffn_w2)?;
    let ff = g.add_row(ff, layer.ffn_b2)?;
    let ff = g.dropout(ff, rate, rng)?;
    let res = g.add(x1, ff)?;
    g.layer_norm(res, layer.ln2_gamma, layer.ln2_beta, LN_EPS)
}

/// Final hidden states `h_1..h_n` as an `n×d` node. Dropout is applied only
/// in [`Mode::Train`]; `rng` is untouched in eval mode.
pub fn encode<R: Rng + ?Sized>(
    g: &mut Graph,
    cfg: &EncoderConfig,
    vars: &EncoderVars,
    tokens: &TokenizedFunction,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, ModelError> {
    let x = embed(g, vars, tokens)?;
    let rate = if mode == Mode::Train { cfg.dropout } else { 0.0 };
    let mut x = g.dropout(x, rate, rng)?;
    for (l, layer) in vars.layers.iter().enumerate() {
        x = block(g, x, layer, cfg.dropout, mode, rng).map_err(|e| match e {
            TensorError::NonFinite { .. } => ModelError::NonFinite { layer: l },
            other => other.into(),
        })?;
    }
    Ok(x)
}
