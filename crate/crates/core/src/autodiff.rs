//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes one node holding
//! its output value and enough saved state to run its backward rule, so node
//! indices are already a topological order. [`Graph::backward`] walks the tape
//! once in reverse and accumulates (`+=`) into input gradients, which handles
//! fan-out.
//!
//! All forward outputs are checked for NaN/Inf; a non-finite value is reported
//! as [`Error::NonFinite`] naming the op that produced it.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    L1 {
        pred: Var,
        target: Var,
        rows: Vec<bool>,
        count: usize,
    },
    Cosine {
        pred: Var,
        target: Var,
        rows: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// The gradient tape. Confined to one thread; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// A constant copy of `v`'s value; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product over the last two axes.
    ///
    /// Leading (batch) axes must match exactly, or one side must be a plain
    /// matrix which is then broadcast across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let geo = MatMulGeometry::new(&sa, &sb)?;
        let mut out = vec![0.0; geo.batch * geo.n * geo.m];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for batch in 0..geo.batch {
            let (ao, bo, oo) = geo.offsets(batch);
            matmul_acc(
                &av[ao..ao + geo.n * geo.k],
                &bv[bo..bo + geo.k * geo.m],
                &mut out[oo..oo + geo.n * geo.m],
                geo.n,
                geo.k,
                geo.m,
            );
        }
        let value = Tensor::new(&geo.out_shape, out)?;
        self.push("matmul", value, &[a, b], Op::MatMul(a, b))
    }

    /// Elementwise sum; `b` may broadcast over `a`'s leading axes when its
    /// shape is a suffix of `a`'s (e.g. a bias row).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bv = self.value(b).data();
        let step = bv.len().max(1);
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % step])
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, &[x], Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", value, &[x], Op::Relu(x))
    }

    /// Softmax along the last axis, with max subtraction. `-inf` entries get
    /// exactly zero weight. A row of all `-inf` is a contract error.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.last_dim();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            softmax_in_place(row).map_err(|_| {
                Error::Contract(format!("softmax row {r} has no finite entry"))
            })?;
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.rows();
        let mut normalized = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        self.push(
            "layer_norm",
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` at train time and
    /// evaluation is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |v, m| v * m);
        let value = Tensor::new(self.shape(x), data)?;
        self.push("dropout", value, &[x], Op::Dropout { x, mask })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(
            "concat",
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        self.push("narrow", value, &[x], Op::Narrow { x, axis, start })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract(format!("transpose of rank-{} tensor", shape.len())));
        }
        let (n, m) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for (src, dst) in data.chunks(n * m).zip(out.chunks_mut(n * m)) {
            transpose_into(src, dst, n, m);
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(&out_shape, out)?;
        self.push("transpose", value, &[x], Op::Transpose(x))
    }

    /// Row lookup into a `[V, d]` table. Ids outside `0..V` are a vocabulary error.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Contract(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary { id, size: vocab });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push(
            "embedding_lookup",
            value,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects rows of a matrix; out-of-range indices are a contract error.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(x).first().copied().unwrap_or(0);
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Contract(format!("gather row {r} of {n}")));
        }
        self.embedding_lookup(x, rows)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean token cross-entropy of `logits: [T, V]` against `targets`,
    /// skipping positions whose target equals `pad_id`. With no scored
    /// positions the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let vocab = t.shape()[1];
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (row, &target) in probs.chunks_mut(vocab).zip(targets) {
            if target == pad_id {
                continue;
            }
            if target >= vocab {
                return Err(Error::Vocabulary { id: target, size: vocab });
            }
            softmax_in_place(row).map_err(|_| Error::NonFinite { op: "cross_entropy" })?;
            total -= row[target].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
        )
    }

    /// Mean absolute error over the elements of rows where `mask` is true.
    pub fn l1_loss(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.check_dense_pair("l1_loss", pred, target, mask)?;
        let d = self.value(pred).last_dim();
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let mut total = 0.0;
        let mut count = 0;
        for r in (0..rows).filter(|&r| mask[r]) {
            for j in 0..d {
                total += (p[r * d + j] - t[r * d + j]).abs();
            }
            count += d;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "l1_loss",
            Tensor::scalar(loss),
            &[pred, target],
            Op::L1 {
                pred,
                target,
                rows: mask.to_vec(),
                count,
            },
        )
    }

    /// Mean over masked rows of `1 - cos(pred_row, target_row)`.
    pub fn cosine_similarity_loss(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.check_dense_pair("cosine_similarity_loss", pred, target, mask)?;
        let d = self.value(pred).last_dim();
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let mut total = 0.0;
        let mut count = 0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let (pr, tr) = (&p[r * d..(r + 1) * d], &t[r * d..(r + 1) * d]);
            total += 1.0 - cosine_parts(pr, tr).0;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cosine_similarity_loss",
            Tensor::scalar(loss),
            &[pred, target],
            Op::Cosine {
                pred,
                target,
                rows: mask.to_vec(),
            },
        )
    }

    fn check_dense_pair(&self, op: &'static str, pred: Var, target: Var, mask: &[bool]) -> Result<usize> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::shape(op, sp, st));
        }
        let rows = self.value(pred).rows();
        if mask.len() != rows {
            return Err(Error::shape(op, sp, &[mask.len()]));
        }
        Ok(rows)
    }

    /// Fingerprint of the branch taken at every non-differentiable point
    /// of the tape (sign of each `relu` input, sign of each `l1_loss`
    /// difference). Two evaluations with equal fingerprints lie on the same
    /// smooth piece.
    pub fn kink_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::L1 { pred, target, rows, .. } => {
                    let d = self.value(*pred).last_dim();
                    let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                    for r in (0..rows.len()).filter(|&r| rows[r]) {
                        for k in r * d..(r + 1) * d {
                            (p[k] - t[k]).partial_cmp(&0.0).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Fills `grad` for every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let geo = MatMulGeometry::new(nodes[a.0].value.shape(), nodes[b.0].value.shape())
                .expect("shapes validated in forward");
            if wants(nodes, *a) {
                let bv = nodes[b.0].value.data();
                let mut da = vec![0.0; nodes[a.0].value.numel()];
                for batch in 0..geo.batch {
                    let (ao, bo, oo) = geo.offsets(batch);
                    matmul_nt_acc(
                        &g[oo..oo + geo.n * geo.m],
                        &bv[bo..bo + geo.k * geo.m],
                        &mut da[ao..ao + geo.n * geo.k],
                        geo.n,
                        geo.m,
                        geo.k,
                    );
                }
                accumulate(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                let av = nodes[a.0].value.data();
                let mut db = vec![0.0; nodes[b.0].value.numel()];
                for batch in 0..geo.batch {
                    let (ao, bo, oo) = geo.offsets(batch);
                    matmul_tn_acc(
                        &av[ao..ao + geo.n * geo.k],
                        &g[oo..oo + geo.n * geo.m],
                        &mut db[bo..bo + geo.k * geo.m],
                        geo.n,
                        geo.k,
                        geo.m,
                    );
                }
                accumulate(nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g);
            if wants(nodes, *b) {
                let n = nodes[b.0].value.numel().max(1);
                let mut db = vec![0.0; n];
                for (i, gv) in g.iter().enumerate() {
                    db[i % n] += gv;
                }
                accumulate(nodes, *b, &db);
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let da = zip_map(g, nodes[b.0].value.data(), |x, y| x * y);
                accumulate(nodes, *a, &da);
            }
            if wants(nodes, *b) {
                let db = zip_map(g, nodes[a.0].value.data(), |x, y| x * y);
                accumulate(nodes, *b, &db);
            }
        }
        Op::Scale(x, factor) => {
            let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Relu(x) => {
            let dx = zip_map(g, nodes[x.0].value.data(), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
            accumulate(nodes, *x, &dx);
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let cols = node.value.last_dim().max(1);
            let mut dx = vec![0.0; y.len()];
            for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = node.value.last_dim();
            if wants(nodes, *x) {
                let gv = nodes[gain.0].value.data();
                let mut dx = vec![0.0; normalized.len()];
                let mut dxh = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let xh = &normalized[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        dxh[j] = gr[j] * gv[j];
                    }
                    let sum_dxh: f64 = dxh.iter().sum();
                    let sum_dxh_xh: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] =
                            inv / d as f64 * (d as f64 * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                accumulate(nodes, *x, &dx);
            }
            if wants(nodes, *gain) {
                let mut dg = vec![0.0; d];
                for (i, (gv, xh)) in g.iter().zip(normalized).enumerate() {
                    dg[i % d] += gv * xh;
                }
                accumulate(nodes, *gain, &dg);
            }
            if wants(nodes, *bias) {
                let mut db = vec![0.0; d];
                for (i, gv) in g.iter().enumerate() {
                    db[i % d] += gv;
                }
                accumulate(nodes, *bias, &db);
            }
        }
        Op::Dropout { x, mask } => {
            let dx = zip_map(g, mask, |a, b| a * b);
            accumulate(nodes, *x, &dx);
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for v in inputs {
                let chunk = nodes[v.0].value.shape()[*axis] * inner;
                if wants(nodes, *v) {
                    let mut dv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        dv.extend_from_slice(&g[base..base + chunk]);
                    }
                    accumulate(nodes, *v, &dv);
                }
                offset += chunk;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[x.0].value.shape();
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            let mut dx = vec![0.0; nodes[x.0].value.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * in_shape[*axis] + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Transpose(x) => {
            let s = node.value.shape();
            let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
            let mut dx = vec![0.0; g.len()];
            for (src, dst) in g.chunks(n * m).zip(dx.chunks_mut(n * m)) {
                transpose_into(src, dst, n, m);
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Gather { table, ids } => {
            let d = node.value.last_dim();
            let mut dt = vec![0.0; nodes[table.0].value.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    dt[id * d + j] += g[r * d + j];
                }
            }
            accumulate(nodes, *table, &dt);
        }
        Op::Sum(x) => {
            let dx = vec![g[0]; nodes[x.0].value.numel()];
            accumulate(nodes, *x, &dx);
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad_id,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let vocab = nodes[logits.0].value.last_dim();
            let scale = g[0] / *count as f64;
            let mut dl = vec![0.0; probs.len()];
            for (r, &target) in targets.iter().enumerate() {
                if target == *pad_id {
                    continue;
                }
                for j in 0..vocab {
                    dl[r * vocab + j] = probs[r * vocab + j] * scale;
                }
                dl[r * vocab + target] -= scale;
            }
            accumulate(nodes, *logits, &dl);
        }
        Op::L1 {
            pred,
            target,
            rows,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let d = nodes[pred.0].value.last_dim();
            let scale = g[0] / *count as f64;
            let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
            let mut dp = vec![0.0; p.len()];
            for r in (0..rows.len()).filter(|&r| rows[r]) {
                for j in 0..d {
                    let diff = p[r * d + j] - t[r * d + j];
                    dp[r * d + j] = if diff > 0.0 {
                        scale
                    } else if diff < 0.0 {
                        -scale
                    } else {
                        0.0
                    };
                }
            }
            let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
            accumulate(nodes, *pred, &dp);
            accumulate(nodes, *target, &dt);
        }
        Op::Cosine { pred, target, rows } => {
            let count = rows.iter().filter(|&&r| r).count();
            if count == 0 {
                return;
            }
            let d = nodes[pred.0].value.last_dim();
            let scale = g[0] / count as f64;
            let (p, t) = (nodes[pred.0].value.data(), nodes[target.0].value.data());
            let mut dp = vec![0.0; p.len()];
            let mut dt = vec![0.0; t.len()];
            for r in (0..rows.len()).filter(|&r| rows[r]) {
                let (pr, tr) = (&p[r * d..(r + 1) * d], &t[r * d..(r + 1) * d]);
                let (cos, np, nt) = cosine_parts(pr, tr);
                let denom = (np * nt).max(COSINE_FLOOR);
                for j in 0..d {
                    // d(1 - cos)/dp = -(t / (|p||t|) - cos * p / |p|^2)
                    let gp = tr[j] / denom - cos * pr[j] / (np * np).max(COSINE_FLOOR);
                    let gt = pr[j] / denom - cos * tr[j] / (nt * nt).max(COSINE_FLOOR);
                    dp[r * d + j] = -scale * gp;
                    dt[r * d + j] = -scale * gt;
                }
            }
            accumulate(nodes, *pred, &dp);
            accumulate(nodes, *target, &dt);
        }
    }
}

const COSINE_FLOOR: f64 = 1e-12;

/// (cosine, |p|, |t|) with the denominator floored away from zero.
fn cosine_parts(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (np * nt).max(COSINE_FLOOR), np, nt)
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn accumulate(nodes: &mut [Node], v: Var, delta: &[f64]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Numerically stable softmax of one row. Errors if no entry is finite.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(());
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

struct MatMulGeometry {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatMulGeometry {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (n, k) = (sa[ra - 2], sa[ra - 1]);
        let (k2, m) = (sb[rb - 2], sb[rb - 1]);
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch_dims = if ba.is_empty() { bb } else { ba };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([n, m]);
        Ok(MatMulGeometry {
            batch: batch_dims.iter().product(),
            n,
            k,
            m,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    fn offsets(&self, batch: usize) -> (usize, usize, usize) {
        let ao = if self.a_batched { batch * self.n * self.k } else { 0 };
        let bo = if self.b_batched { batch * self.k * self.m } else { 0 };
        (ao, bo, batch * self.n * self.m)
    }
}

/// out[n,m] += a[n,k] · b[k,m]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[n,k] += g[n,m] · b[k,m]ᵀ
fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,m] += a[n,k]ᵀ · g[n,m]
fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], n: usize, m: usize) {
    for i in 0..n {
        for j in 0..m {
            dst[j * n + i] = src[i * m + j];
        }
    }
}
