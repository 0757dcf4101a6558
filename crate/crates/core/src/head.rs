//! Statement pooling, per-channel classifiers and score fusion.
//!
//! Token vectors of one statement are pooled two ways. The max channel keeps
//! the strongest local activations and the mean channel keeps the average.
//! Each channel has its own `d → 2` linear layer with a softmax, and the
//! probability of class 1 (vulnerable) from both is blended into `p`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::segmenter::TokenizedFunction;
use crate::tensor::{Binding, Graph, ParamStore, Tensor, TensorError, Var};

pub const VULNERABLE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Fixed,
    /// A trainable pair of logits, softmax-normalized into the two weights.
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub fusion: FusionMode,
    /// Max-channel weight; the mean channel gets `1 - w_max`. In learnable
    /// mode this is the starting value.
    pub w_max: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Fixed,
            w_max: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = match self.fusion {
            FusionMode::Fixed => (0.0..=1.0).contains(&self.w_max),
            FusionMode::Learnable => self.w_max > 0.0 && self.w_max < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "w_max {} is not a valid {:?} fusion weight",
                self.w_max, self.fusion
            )))
        }
    }
}

/// Adds the two channel classifiers (and fusion logits if learnable).
pub fn init_params<R: Rng + ?Sized>(cfg: &HeadConfig, hidden: usize, rng: &mut R, store: &mut ParamStore) {
    let dist = Normal::new(0.0, 0.02).expect("positive std");
    for ch in ["max", "mean"] {
        let w = (0..hidden * 2).map(|_| dist.sample(rng)).collect();
        store.insert(format!("head.{ch}.w"), Tensor::matrix(hidden, 2, w).expect("finite init"));
        store.insert(format!("head.{ch}.b"), Tensor::vector(vec![0.0; 2]).expect("finite init"));
    }
    if cfg.fusion == FusionMode::Learnable {
        let logits = vec![cfg.w_max.ln(), (1.0 - cfg.w_max).ln()];
        store.insert("head.fusion", Tensor::vector(logits).expect("finite init"));
    }
}

/// Current `(w_max, w_mean)` for a parameter set.
pub fn fusion_weights(cfg: &HeadConfig, store: &ParamStore) -> Result<(f64, f64), TensorError> {
    match cfg.fusion {
        FusionMode::Fixed => Ok((cfg.w_max, 1.0 - cfg.w_max)),
        FusionMode::Learnable => {
            let l = store.get("head.fusion")?.data();
            let m = l[0].max(l[1]);
            let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
            Ok((a / (a + b), b / (a + b)))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub max_w: Var,
    pub max_b: Var,
    pub mean_w: Var,
    pub mean_b: Var,
    pub fusion: Fusion,
}

#[derive(Debug, Clone, Copy)]
pub enum Fusion {
    Fixed(f64),
    Learnable(Var),
}

impl HeadVars {
    pub fn from_binding(cfg: &HeadConfig, b: &Binding) -> Result<Self, TensorError> {
        Ok(Self {
            max_w: b.get("head.max.w")?,
            max_b: b.get("head.max.b")?,
            mean_w: b.get("head.mean.w")?,
            mean_b: b.get("head.mean.b")?,
            fusion: match cfg.fusion {
                FusionMode::Fixed => Fusion::Fixed(cfg.w_max),
                FusionMode::Learnable => Fusion::Learnable(b.get("head.fusion")?),
            },
        })
    }
}

fn members(tokens: &TokenizedFunction, j: usize) -> Result<Vec<usize>, ModelError> {
    if j >= tokens.num_statements() {
        return Err(ModelError::NoSuchStatement(j));
    }
    let m: Vec<usize> = tokens
        .statement_of_token
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s == j)
        .map(|(i, _)| i)
        .collect();
    if m.is_empty() {
        return Err(ModelError::EmptyStatement(j));
    }
    Ok(m)
}

/// Coordinate-wise max over the member rows of statement `j`, as a `1×d`
/// node. Non-members take no part in the max.
pub fn max_pool_statement(g: &mut Graph, h: Var, tokens: &TokenizedFunction, j: usize) -> Result<Var, ModelError> {
    let m = members(tokens, j)?;
    Ok(g.segment_max(h, &[m])?)
}

/// Mean over the member rows of statement `j`, as a `1×d` node.
pub fn mean_pool_statement(g: &mut Graph, h: Var, tokens: &TokenizedFunction, j: usize) -> Result<Var, ModelError> {
    let m = members(tokens, j)?;
    Ok(g.segment_mean(h, &[m])?)
}

/// Graph nodes for the scores of one function, one entry per scored
/// statement.
#[derive(Debug, Clone)]
pub struct StatementVars {
    pub p: Var,
    pub p_max: Var,
    pub p_mean: Var,
    /// Statement index of each entry.
    pub statements: Vec<usize>,
    pub lines: Vec<usize>,
}

fn channel(g: &mut Graph, pooled: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let logits = g.matmul(pooled, w)?;
    let logits = g.add_row(logits, b)?;
    let probs = g.softmax(logits, 1)?;
    g.column(probs, VULNERABLE_CLASS)
}

/// Pools, classifies and fuses every statement that kept at least one token.
pub fn classify_statements(
    g: &mut Graph,
    h: Var,
    tokens: &TokenizedFunction,
    head: &HeadVars,
) -> Result<StatementVars, ModelError> {
    let segments = tokens.segments();
    if segments.is_empty() {
        return Err(ModelError::EmptyStatement(0));
    }
    let pooled_max = g.segment_max(h, &segments)?;
    let pooled_mean = g.segment_mean(h, &segments)?;
    let p_max = channel(g, pooled_max, head.max_w, head.max_b)?;
    let p_mean = channel(g, pooled_mean, head.mean_w, head.mean_b)?;
    let p = match head.fusion {
        Fusion::Fixed(w) => {
            let a = g.scale(p_max, w)?;
            let b = g.scale(p_mean, 1.0 - w)?;
            g.add(a, b)?
        }
        Fusion::Learnable(logits) => {
            let w = g.softmax(logits, 0)?;
            let w_max = g.gather(w, &[0])?;
            let w_mean = g.gather(w, &[1])?;
            let a = g.scale_by(w_max, p_max)?;
            let b = g.scale_by(w_mean, p_mean)?;
            g.add(a, b)?
        }
    };
    Ok(StatementVars {
        p,
        p_max,
        p_mean,
        statements: tokens.scored_statements(),
        lines: tokens.scored_lines(),
    })
}

/// Fused and per-channel vulnerability probabilities of one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatementScores {
    pub statements: Vec<usize>,
    pub lines: Vec<usize>,
    pub p: Vec<f64>,
    pub p_max: Vec<f64>,
    pub p_mean: Vec<f64>,
}

impl StatementScores {
    pub fn from_graph(g: &Graph, vars: &StatementVars) -> Self {
        Self {
            statements: vars.statements.clone(),
            lines: vars.lines.clone(),
            p: g.value(vars.p).data().to_vec(),
            p_max: g.value(vars.p_max).data().to_vec(),
            p_mean: g.value(vars.p_mean).data().to_vec(),
        }
    }

    /// Number of scored statements.
    pub fn m_eff(&self) -> usize {
        self.p.len()
    }
}
