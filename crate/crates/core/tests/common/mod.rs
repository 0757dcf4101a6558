#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vulnmil::encoder::{EncoderConfig, Mode};
use vulnmil::head::{HeadConfig, StatementScores};
use vulnmil::metrics::{evaluate_predictions, predict_function, EvalReport, FunctionPrediction};
use vulnmil::model::{Model, ModelConfig};
use vulnmil::segmenter::{FunctionSample, PreparedSample, Split, TokenizedFunction};
use vulnmil::tensor::{Graph, Tensor, TensorError, Var};
use vulnmil::trainer::{mil_loss, select_topk_pseudo_labels};

pub const FD_STEP: f64 = 1e-5;
/// Below this magnitude gradients are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// `sum_i w_i * y_i` over every entry of `y`, built from graph ops.
pub fn weighted_sum(g: &mut Graph, y: Var, weights: &[f64]) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let cols: Vec<Var> = match shape.as_slice() {
        [_] => vec![y],
        [_, n] => (0..*n).map(|c| g.column(y, c)).collect::<Result<_, _>>()?,
        s => panic!("unsupported shape {s:?}"),
    };
    let rows = g.shape(cols[0])[0];
    let mut terms = Vec::new();
    for (c, &col) in cols.iter().enumerate() {
        for r in 0..rows {
            let e = g.gather(col, &[r])?;
            terms.push(g.scale(e, weights[r * cols.len() + c])?);
        }
    }
    g.sum(&terms)
}

pub fn random_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative error between backprop and central differences of the
/// scalar built by `f` over every entry of every input.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect();

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let bump = |delta: f64| {
                let mut ts = inputs.to_vec();
                let mut data = ts[i].data().to_vec();
                data[e] += delta;
                ts[i] = Tensor::new(t.shape().to_vec(), data).unwrap();
                eval(&ts)
            };
            let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i][e], numeric));
        }
    }
    worst
}

/// The tiny model used for whole-model gradient checks: one layer, one
/// head, four hidden units.
pub fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            heads: 1,
            hidden: 4,
            ffn_dim: 8,
            max_len: 16,
            vocab_size: 12,
            dropout: 0.1,
            ..Default::default()
        },
        head: HeadConfig::default(),
    };
    Model::init(cfg, seed).unwrap()
}

/// A function of `statements` statements with the given token counts.
pub fn tokens_of(ids: &[u32], counts: &[usize]) -> TokenizedFunction {
    let statement_of_token = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &c)| std::iter::repeat(j).take(c))
        .collect::<Vec<_>>();
    assert_eq!(statement_of_token.len(), ids.len());
    TokenizedFunction {
        token_ids: ids.to_vec(),
        statement_of_token,
        statement_lines: (0..counts.len()).collect(),
        truncated_statements: BTreeSet::new(),
    }
}

/// Backprop vs central differences of the MIL loss over every parameter of
/// `model`, with pseudo-labels fixed from the unperturbed forward pass.
pub fn model_gradient_error(model: &Model, batch: &[(TokenizedFunction, u8)], k: usize, mode: Mode) -> f64 {
    let loss_of = |m: &Model, assignments: Option<&Vec<_>>, grads: bool| {
        let mut g = Graph::new();
        let vars = if grads { m.bind(&mut g).unwrap() } else { m.bind_frozen(&mut g).unwrap() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let outs: Vec<Var> = batch
            .iter()
            .map(|(t, _)| m.forward(&mut g, &vars, t, mode, &mut rng).unwrap().p)
            .collect();
        let sel: Vec<_> = match assignments {
            Some(a) => a.clone(),
            None => outs
                .iter()
                .zip(batch)
                .map(|(&p, (_, y))| select_topk_pseudo_labels(g.value(p).data(), *y, k))
                .collect(),
        };
        let pairs: Vec<_> = outs.iter().copied().zip(sel.iter()).collect();
        let loss = mil_loss(&mut g, &pairs).unwrap();
        let value = g.value(loss).item().unwrap();
        let mut grad = Vec::new();
        if grads {
            g.backward(loss).unwrap();
            for (name, _) in m.params.iter() {
                let v = vars.binding.get(name).unwrap();
                grad.push(g.grad(v).unwrap().to_vec());
            }
        }
        (value, grad, sel)
    };

    let (_, analytic, sel) = loss_of(model, None, true);
    let largest = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(largest > 1e-4, "gradients vanish: largest {largest:e}");
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let numel = model.params.get(name).unwrap().numel();
        for e in 0..numel {
            let bump = |delta: f64| {
                let mut m = model.clone();
                let t = m.params.get_mut(name).unwrap();
                let mut data = t.data().to_vec();
                data[e] += delta;
                *t = Tensor::new(t.shape().to_vec(), data).unwrap().with_requires_grad(true);
                loss_of(&m, Some(&sel), false).0
            };
            let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[pi][e], numeric));
        }
    }
    worst
}

/// One function of a random metric instance.
#[derive(Debug, Clone)]
pub struct OracleFunction {
    pub label: u8,
    pub p: Vec<f64>,
    /// Statement indices that are truly vulnerable.
    pub truth: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub st_acc: f64,
    pub st_precision: f64,
    pub st_recall: f64,
    pub st_f1: f64,
    pub top: [f64; 3],
    pub mfr: f64,
    pub mar: f64,
    pub ifa: f64,
    pub ranked: usize,
}

/// Scores drawn from a coarse grid so that ties are common.
pub fn random_instance(rng: &mut impl Rng) -> Vec<OracleFunction> {
    let n = rng.gen_range(1..=10);
    (0..n)
        .map(|_| {
            let m = rng.gen_range(1..=15);
            let label = u8::from(rng.gen_bool(0.5));
            let p: Vec<f64> = (0..m).map(|_| f64::from(rng.gen_range(0..=20u32)) / 20.0).collect();
            let truth = if label == 1 {
                (0..m).filter(|_| rng.gen_bool(0.3)).collect()
            } else {
                BTreeSet::new()
            };
            OracleFunction { label, p, truth }
        })
        .collect()
}

fn prf(tp: usize, fp: usize, fn_: usize, tn: usize) -> (f64, f64, f64, f64) {
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = div(tp, tp + fp);
    let r = div(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (div(tp + tn, tp + fp + fn_ + tn), p, r, f1)
}

/// Direct recomputation: a statement's rank is one plus the number of
/// statements that beat it (higher score, or equal score and earlier).
pub fn oracle_metrics(fs: &[OracleFunction], threshold: f64) -> OracleMetrics {
    let mut c = [0usize; 4];
    let mut s = [0usize; 4];
    let bump = |c: &mut [usize; 4], pred: bool, truth: bool| match (pred, truth) {
        (true, true) => c[0] += 1,
        (true, false) => c[1] += 1,
        (false, true) => c[2] += 1,
        (false, false) => c[3] += 1,
    };
    let mut firsts = Vec::new();
    let mut avgs = Vec::new();
    for f in fs {
        let any = f.p.iter().any(|&p| p > threshold);
        bump(&mut c, any, f.label == 1);
        if f.label == 0 || !f.truth.is_empty() {
            for (j, &p) in f.p.iter().enumerate() {
                bump(&mut s, p > threshold, f.truth.contains(&j));
            }
        }
        if f.label == 1 && !f.truth.is_empty() {
            let rank = |j: usize| {
                1 + (0..f.p.len())
                    .filter(|&i| f.p[i] > f.p[j] || (f.p[i] == f.p[j] && i < j))
                    .count()
            };
            let ranks: Vec<usize> = f.truth.iter().map(|&j| rank(j)).collect();
            firsts.push(*ranks.iter().min().unwrap());
            avgs.push(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64);
        }
    }
    let (acc, precision, recall, f1) = prf(c[0], c[1], c[2], c[3]);
    let (st_acc, st_precision, st_recall, st_f1) = prf(s[0], s[1], s[2], s[3]);
    let n = firsts.len() as f64;
    let frac = |k: usize| firsts.iter().filter(|&&r| r <= k).count() as f64 / n;
    OracleMetrics {
        acc,
        precision,
        recall,
        f1,
        st_acc,
        st_precision,
        st_recall,
        st_f1,
        top: [frac(1), frac(3), frac(5)],
        mfr: firsts.iter().sum::<usize>() as f64 / n,
        mar: avgs.iter().sum::<f64>() / n,
        ifa: firsts.iter().map(|r| r - 1).sum::<usize>() as f64 / n,
        ranked: firsts.len(),
    }
}

/// Mean over functions of the mean cross-entropy over the top
/// `min(k, m)` statements, computed from a full sort.
pub fn oracle_loss(scores: &[(Vec<f64>, u8)], k: usize) -> f64 {
    let mut total = 0.0;
    for (p, y) in scores {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
        let take = k.min(p.len());
        let y = f64::from(*y);
        let ce: f64 = idx[..take]
            .iter()
            .map(|&j| {
                let q = p[j].clamp(1e-12, 1.0 - 1e-12);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        total += ce / take as f64;
    }
    total / scores.len() as f64
}

/// The instance as prepared samples, one token and one line per statement.
pub fn prepared_instance(fs: &[OracleFunction]) -> (Vec<PreparedSample>, Vec<FunctionPrediction>) {
    fs.iter()
        .enumerate()
        .map(|(i, f)| {
            let m = f.p.len();
            let id = format!("f{i}");
            let sample = FunctionSample {
                id: id.clone(),
                source: vec!["x;"; m].join("\n"),
                label: f.label,
                vulnerable_lines: Some(f.truth.clone()),
                cwe: None,
                split: Split::Test,
            };
            let tokens = tokens_of(&vec![0; m], &vec![1; m]);
            let scores = StatementScores {
                statements: (0..m).collect(),
                lines: (0..m).collect(),
                p: f.p.clone(),
                p_max: f.p.clone(),
                p_mean: f.p.clone(),
            };
            (PreparedSample { sample, tokens }, predict_function(&id, scores, 0.5))
        })
        .unzip()
}

pub fn library_report(fs: &[OracleFunction]) -> EvalReport {
    let (samples, preds) = prepared_instance(fs);
    evaluate_predictions(&samples, &preds, 0.5).unwrap()
}

fn positive_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap()
}

/// Entries spread at least 0.05 apart with magnitude at least 0.05, so
/// kinks of max and relu stay far from the probe step.
fn spread_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let mut vals: Vec<f64> = (0..rows * cols).map(|i| (i as f64 + 1.0) * 0.05 * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    vals.shuffle(rng);
    Tensor::matrix(rows, cols, vals).unwrap()
}

/// Worst relative error of every differentiable graph op, each probed
/// through a random weighted sum of its output.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_weights(64, seed ^ 0xabc);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>| {
        out.push((name, max_gradient_error(&inputs, |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, &w)
        })));
    };

    let (a, b) = (random_matrix(3, 4, &mut rng), random_matrix(4, 2, &mut rng));
    check("matmul", vec![a, b], &|g, v| g.matmul(v[0], v[1]));
    check("transpose", vec![random_matrix(3, 2, &mut rng)], &|g, v| g.transpose(v[0]));
    let (a, b) = (random_matrix(2, 3, &mut rng), random_matrix(2, 3, &mut rng));
    check("add", vec![a, b], &|g, v| g.add(v[0], v[1]));
    let bias = Tensor::vector(vec![0.3, -0.2, 0.5]).unwrap();
    check("add_row", vec![random_matrix(4, 3, &mut rng), bias], &|g, v| g.add_row(v[0], v[1]));
    check("scale", vec![random_matrix(2, 2, &mut rng)], &|g, v| g.scale(v[0], -1.7));
    let s = Tensor::vector(vec![0.8]).unwrap();
    check("scale_by", vec![s, random_matrix(2, 3, &mut rng)], &|g, v| g.scale_by(v[0], v[1]));
    check("dropout", vec![random_matrix(3, 4, &mut rng)], &|g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        g.dropout(v[0], 0.3, &mut r)
    });
    check("relu", vec![spread_matrix(3, 4, &mut rng)], &|g, v| g.relu(v[0]));
    check("softmax rows", vec![random_matrix(3, 4, &mut rng)], &|g, v| g.softmax(v[0], 1));
    check("softmax cols", vec![random_matrix(3, 4, &mut rng)], &|g, v| g.softmax(v[0], 0));
    check("softmax masked", vec![random_matrix(2, 3, &mut rng)], &|g, v| {
        g.softmax_masked(v[0], 1, Some(&[true, false, true, false, true, true]))
    });
    let gamma = Tensor::vector(vec![1.2, 0.7, -0.4, 1.0]).unwrap();
    let beta = Tensor::vector(vec![0.1, 0.0, -0.3, 0.2]).unwrap();
    check("layer_norm", vec![random_matrix(3, 4, &mut rng), gamma, beta], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check("embedding", vec![random_matrix(5, 3, &mut rng)], &|g, v| g.embedding(v[0], &[4, 0, 4, 2]));
    let (a, b) = (random_matrix(3, 2, &mut rng), random_matrix(3, 1, &mut rng));
    check("concat_cols", vec![a, b], &|g, v| g.concat_cols(&[v[0], v[1]]));
    let segs = vec![vec![0, 1], vec![2], vec![3, 4, 5]];
    let seg_max = segs.clone();
    check("segment_max", vec![spread_matrix(6, 3, &mut rng)], &move |g, v| g.segment_max(v[0], &seg_max));
    check("segment_mean", vec![random_matrix(6, 3, &mut rng)], &move |g, v| g.segment_mean(v[0], &segs));
    check("column", vec![random_matrix(3, 4, &mut rng)], &|g, v| g.column(v[0], 2));
    let vecn = Tensor::vector((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    check("gather", vec![vecn], &|g, v| g.gather(v[0], &[3, 1, 3]));
    let probs = positive_rows(1, 5, &mut rng);
    check("binary_cross_entropy", vec![probs], &|g, v| {
        let p = g_row(g, v[0])?;
        g.binary_cross_entropy(p, &[1.0, 0.0, 1.0, 0.0, 0.5])
    });
    let (a, b) = (random_matrix(2, 2, &mut rng), random_matrix(2, 2, &mut rng));
    check("sum", vec![a, b], &|g, v| g.sum(&[v[0], v[1], v[0]]));
    let (q, k, vv) = (random_matrix(3, 2, &mut rng), random_matrix(3, 2, &mut rng), random_matrix(3, 2, &mut rng));
    check("scaled_dot_attention", vec![q, k, vv], &|g, v| {
        vulnmil::encoder::scaled_dot_attention(g, v[0], v[1], v[2], 2)
    });
    out
}

/// Row 0 of a `1×n` matrix as a vector.
fn g_row(g: &mut Graph, m: Var) -> Result<Var, TensorError> {
    let t = g.transpose(m)?;
    g.column(t, 0)
}

/// A small batch for the whole-model check: one vulnerable and one clean
/// function, plus a single-statement function.
pub fn tiny_batch() -> Vec<(TokenizedFunction, u8)> {
    vec![
        (tokens_of(&[1, 4, 7, 2, 9, 3, 3, 11], &[3, 2, 3]), 1),
        (tokens_of(&[5, 6, 0, 8, 10], &[1, 2, 2]), 0),
        (tokens_of(&[2, 7], &[2]), 1),
    ]
}

/// A handful of C-like lines for training small vocabularies in tests.
pub const TINY_VOCAB_TEXTS: &[&str] = &[
    "int len = strlen(buf);",
    "strcpy(dst, src);",
    "for (int i = 0; i < n; i++) total += i;",
    "if (len > 16) return -1;",
    "memcpy(out, data, len * 4);",
    "printf(\"%d\\n\", count);",
];
