use rand::Rng;

use super::{matmul_raw, shape_err, Result, Tensor, TensorError, PROB_EPS};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MaskMul(Var, Vec<f64>),
    Relu(Var),
    Softmax {
        input: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SegmentMax {
        input: Var,
        argmax: Vec<usize>,
    },
    SegmentMean {
        input: Var,
        segments: Vec<Vec<usize>>,
    },
    Column {
        input: Var,
        col: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    BinaryCrossEntropy {
        input: Var,
        targets: Vec<f64>,
        clamped: Vec<bool>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        let rg = value.requires_grad();
        value.set_requires_grad(rg);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant input (no gradient).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, node_op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        let rg = parents(&node_op).iter().any(|&p| self.requires_grad(p));
        let value = Tensor::from_parts(shape, data).with_requires_grad(rg);
        self.nodes.push(Node { value, op: node_op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn dims1(&self, v: Var, op: &'static str) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            s => Err(shape_err(op, format!("expected a vector, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents {k} and {k2} differ")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], data, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, Op::Add(a, b))
    }

    /// Adds vector `bias[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        let nb = self.dims1(bias, "add_row")?;
        if nb != n {
            return Err(shape_err("add_row", format!("bias length {nb} vs {n} columns")));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, bv) in row.iter_mut().zip(b) {
                *x += bv;
            }
        }
        self.push("add_row", vec![m, n], data, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, factor))
    }

    /// Multiplies `a` by a single-element node `s`.
    pub fn scale_by(&mut self, s: Var, a: Var) -> Result<Var> {
        let Some(sv) = self.value(s).item() else {
            return Err(shape_err("scale_by", "scale factor must have one element"));
        };
        let data = self.value(a).data().iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale_by", shape, data, Op::ScaleBy(s, a))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales
    /// the rest by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = zip_map(self.value(a).data(), &mask, |x, m| x * m);
        let shape = self.shape(a).to_vec();
        self.push("dropout", shape, data, Op::MaskMul(a, mask))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", shape, data, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis`. Entries with `mask[i] == false` are treated as
    /// `-inf` logits; a slice with every entry masked is an error.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} for rank {}", shape.len())));
        }
        if let Some(m) = mask {
            if m.len() != self.value(a).numel() {
                return Err(shape_err("softmax", "mask length differs from input"));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let extent = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |e: usize| (o * extent + e) * inner + i;
                let live = |e: usize| mask.map_or(true, |m| m[idx(e)]);
                let mut max = f64::NEG_INFINITY;
                for e in 0..extent {
                    if live(e) {
                        max = max.max(x[idx(e)]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::MaskedRow { row: o * inner + i });
                }
                let mut sum = 0.0;
                for e in 0..extent {
                    let v = if live(e) { (x[idx(e)] - max).exp() } else { 0.0 };
                    out[idx(e)] = v;
                    sum += v;
                }
                for e in 0..extent {
                    out[idx(e)] /= sum;
                }
            }
        }
        self.push(
            "softmax",
            shape,
            out,
            Op::Softmax {
                input: a,
                outer,
                extent,
                inner,
            },
        )
    }

    /// Normalizes each row of `x[m×n]` and applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.dims1(gamma, "layer_norm")? != n || self.dims1(beta, "layer_norm")? != n {
            return Err(shape_err("layer_norm", "gamma/beta length must equal row width"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = g[c] * h + b[c];
            }
        }
        self.push(
            "layer_norm",
            vec![m, n],
            out,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids"));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    extent: rows,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            "embedding",
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "nothing to concatenate"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", format!("row counts {m} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, total], data, Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise maximum over each segment's member rows of `h[n×d]`.
    ///
    /// Non-members never take part in the maximum. Ties go to the lowest row
    /// index, which also receives the whole gradient.
    pub fn segment_max(&mut self, h: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.dims2(h, "segment_max")?;
        check_segments(segments, n, "segment_max")?;
        let src = self.value(h).data();
        let mut data = vec![0.0; segments.len() * d];
        let mut argmax = vec![0usize; segments.len() * d];
        for (s, members) in segments.iter().enumerate() {
            for c in 0..d {
                let mut best_i = members[0];
                let mut best = src[best_i * d + c];
                for &i in &members[1..] {
                    let v = src[i * d + c];
                    if v > best || (v == best && i < best_i) {
                        best = v;
                        best_i = i;
                    }
                }
                data[s * d + c] = best;
                argmax[s * d + c] = best_i;
            }
        }
        self.push(
            "segment_max",
            vec![segments.len(), d],
            data,
            Op::SegmentMax { input: h, argmax },
        )
    }

    /// Arithmetic mean over each segment's member rows of `h[n×d]`.
    pub fn segment_mean(&mut self, h: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let (n, d) = self.dims2(h, "segment_mean")?;
        check_segments(segments, n, "segment_mean")?;
        let src = self.value(h).data();
        let mut data = vec![0.0; segments.len() * d];
        for (s, members) in segments.iter().enumerate() {
            let out = &mut data[s * d..(s + 1) * d];
            for &i in members {
                for (o, v) in out.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                    *o += v;
                }
            }
            let count = members.len() as f64;
            out.iter_mut().for_each(|o| *o /= count);
        }
        self.push(
            "segment_mean",
            vec![segments.len(), d],
            data,
            Op::SegmentMean {
                input: h,
                segments: segments.to_vec(),
            },
        )
    }

    /// Column `col` of `a[m×n]` as a vector of length `m`.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "column")?;
        if col >= n {
            return Err(TensorError::Index {
                op: "column",
                index: col,
                extent: n,
            });
        }
        let src = self.value(a).data();
        let data = (0..m).map(|r| src[r * n + col]).collect();
        self.push("column", vec![m], data, Op::Column { input: a, col })
    }

    /// Picks entries of a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.dims1(a, "gather")?;
        if indices.is_empty() {
            return Err(shape_err("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index {
                op: "gather",
                index: bad,
                extent: n,
            });
        }
        let src = self.value(a).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        self.push(
            "gather",
            vec![indices.len()],
            data,
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against targets in
    /// `[0, 1]`. Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`;
    /// clamped entries pass no gradient.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let n = self.dims1(p, "binary_cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("{} targets for {n} probabilities", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(TensorError::Domain {
                op: "binary_cross_entropy",
                detail: format!("target {t} outside [0, 1]"),
            });
        }
        let probs = self.value(p).data();
        // Convex blends of probabilities can overshoot [0, 1] by an ulp.
        if let Some(v) = probs.iter().find(|v| !(-1e-9..=1.0 + 1e-9).contains(*v)) {
            return Err(TensorError::Domain {
                op: "binary_cross_entropy",
                detail: format!("probability {v} outside [0, 1]"),
            });
        }
        let mut clamped = Vec::with_capacity(n);
        let mut total = 0.0;
        for (&pv, &y) in probs.iter().zip(targets) {
            let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
            clamped.push(pc != pv);
            total += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        self.push(
            "binary_cross_entropy",
            vec![1],
            vec![total / n as f64],
            Op::BinaryCrossEntropy {
                input: p,
                targets: targets.to_vec(),
                clamped,
            },
        )
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("sum", "nothing to sum"));
        };
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).numel()];
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(shape_err("sum", "operands differ in shape"));
            }
            for (o, v) in data.iter_mut().zip(self.value(p).data()) {
                *o += v;
            }
        }
        self.push("sum", shape, data, Op::Sum(parts.to_vec()))
    }

    /// Reverse pass from a single-element `root`. Gradients accumulate into
    /// every node on the tape that requires them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(shape_err("backward", "root must hold a single value"));
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        if let Some(g) = self.nodes[root.0].value.grad_mut() {
            g[0] = 1.0;
        }
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            let out_grad = self.nodes[idx].value.grad().map(<[f64]>::to_vec).unwrap_or_default();
            if out_grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let contributions = self.local_grads(idx, &out_grad);
            for (parent, contrib) in contributions {
                if let Some(g) = self.nodes[parent.0].value.grad_mut() {
                    for (acc, c) in g.iter_mut().zip(contrib) {
                        *acc += c;
                    }
                }
            }
        }
        for node in &self.nodes {
            if node.value.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let want = |v: Var| self.requires_grad(v);
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if want(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let dci = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = dci.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    res.push((*a, da));
                }
                if want(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let dci = &dy[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for (o, g) in db[p * n..(p + 1) * n].iter_mut().zip(dci) {
                                *o += aip * g;
                            }
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = dy[j * m + i];
                    }
                }
                res.push((*a, da));
            }
            Op::Add(a, b) => {
                if want(*a) {
                    res.push((*a, dy.to_vec()));
                }
                if want(*b) {
                    res.push((*b, dy.to_vec()));
                }
            }
            Op::AddRow(a, bias) => {
                let n = out_shape[1];
                if want(*a) {
                    res.push((*a, dy.to_vec()));
                }
                if want(*bias) {
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (o, g) in db.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    res.push((*bias, db));
                }
            }
            Op::Scale(a, f) => res.push((*a, dy.iter().map(|g| g * f).collect())),
            Op::ScaleBy(s, a) => {
                let sv = self.value(*s).data()[0];
                if want(*s) {
                    let ds = self.value(*a).data().iter().zip(dy).map(|(x, g)| x * g).sum();
                    res.push((*s, vec![ds]));
                }
                if want(*a) {
                    res.push((*a, dy.iter().map(|g| g * sv).collect()));
                }
            }
            Op::MaskMul(a, mask) => res.push((*a, zip_map(dy, mask, |g, m| g * m))),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                res.push((*a, zip_map(dy, x, |g, v| if v > 0.0 { g } else { 0.0 })));
            }
            Op::Softmax {
                input,
                outer,
                extent,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |e: usize| (o * extent + e) * inner + i;
                        let dot: f64 = (0..*extent).map(|e| dy[idx(e)] * y[idx(e)]).sum();
                        for e in 0..*extent {
                            dx[idx(e)] = y[idx(e)] * (dy[idx(e)] - dot);
                        }
                    }
                }
                res.push((*input, dx));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (out_shape[0], out_shape[1]);
                let g = self.value(*gamma).data();
                if want(*input) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let dyr = &dy[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / n as f64;
                        for c in 0..n {
                            dx[r * n + c] = scale * (n as f64 * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    res.push((*input, dx));
                }
                if want(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += dy[r * n + c] * xhat[r * n + c];
                        }
                    }
                    res.push((*gamma, dg));
                }
                if want(*beta) {
                    let mut db = vec![0.0; n];
                    for row in dy.chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    res.push((*beta, db));
                }
            }
            Op::Embedding { table, ids } => {
                let d = out_shape[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, g) in dt[id * d..(id + 1) * d].iter_mut().zip(&dy[i * d..(i + 1) * d]) {
                        *o += g;
                    }
                }
                res.push((*table, dt));
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out_shape[0], out_shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if want(p) {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::SegmentMax { input, argmax } => {
                let d = out_shape[1];
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (k, &row) in argmax.iter().enumerate() {
                    dx[row * d + k % d] += dy[k];
                }
                res.push((*input, dx));
            }
            Op::SegmentMean { input, segments } => {
                let d = out_shape[1];
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (s, members) in segments.iter().enumerate() {
                    let inv = 1.0 / members.len() as f64;
                    for &i in members {
                        for c in 0..d {
                            dx[i * d + c] += dy[s * d + c] * inv;
                        }
                    }
                }
                res.push((*input, dx));
            }
            Op::Column { input, col } => {
                let n = self.shape(*input)[1];
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (r, g) in dy.iter().enumerate() {
                    dx[r * n + col] = *g;
                }
                res.push((*input, dx));
            }
            Op::Gather { input, indices } => {
                let mut dx = vec![0.0; self.value(*input).numel()];
                for (&i, g) in indices.iter().zip(dy) {
                    dx[i] += g;
                }
                res.push((*input, dx));
            }
            Op::BinaryCrossEntropy {
                input,
                targets,
                clamped,
            } => {
                let p = self.value(*input).data();
                let n = p.len() as f64;
                let dx = p
                    .iter()
                    .zip(targets)
                    .zip(clamped)
                    .map(|((&pv, &y), &c)| {
                        if c {
                            0.0
                        } else {
                            dy[0] * (-(y / pv) + (1.0 - y) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                res.push((*input, dx));
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if want(p) {
                        res.push((p, dy.to_vec()));
                    }
                }
            }
        }
        res
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::Transpose(a) | Op::Scale(a, _) | Op::MaskMul(a, _) | Op::Relu(a) => vec![*a],
        Op::Softmax { input, .. }
        | Op::SegmentMax { input, .. }
        | Op::SegmentMean { input, .. }
        | Op::Column { input, .. }
        | Op::Gather { input, .. }
        | Op::BinaryCrossEntropy { input, .. } => vec![*input],
        Op::LayerNorm {
            input, gamma, beta, ..
        } => vec![*input, *gamma, *beta],
        Op::Embedding { table, .. } => vec![*table],
        Op::ConcatCols(parts) | Op::Sum(parts) => parts.clone(),
    }
}

fn check_segments(segments: &[Vec<usize>], n: usize, op: &'static str) -> Result<()> {
    if segments.is_empty() {
        return Err(shape_err(op, "no segments"));
    }
    for (s, members) in segments.iter().enumerate() {
        if members.is_empty() {
            return Err(TensorError::EmptySegment(s));
        }
        if let Some(&bad) = members.iter().find(|&&i| i >= n) {
            return Err(TensorError::Index {
                op,
                index: bad,
                extent: n,
            });
        }
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
