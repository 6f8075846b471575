//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] borrows the parameter tensors, evaluates every operation eagerly
//! as it is recorded, and replays the record backwards in [`Tape::backward`].
//! Parameter leaves are never copied onto the tape. Constants (including the
//! detached label embeddings) do not receive gradients.

use crate::tensor::{log_sum_exp, sigmoid, softmax, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Param(usize),
    Const,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Gather { table: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<F>, inv_std: Vec<F> },
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ColumnGather { x: Var, map: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Tensor<F> },
    KlDivergence { logits: Var, target: Vec<F>, probs: Vec<F> },
    BceWithLogits { logits: Var, targets: Vec<F> },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    op: Op<F>,
    value: Option<Tensor<F>>,
    requires_grad: bool,
}

pub struct Tape<'p, F> {
    params: &'p [Tensor<F>],
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p [Tensor<F>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => &self.params[*id],
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.value(v).data()[0]
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: usize) -> Var {
        assert!(id < self.params.len(), "unknown parameter id {id}");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value: Some(t),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v, &[a, b])
    }

    /// `a @ b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(Op::MatMulBt(a, b), v, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v, &[a, b])
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(x).cols());
        let r = r.data().to_vec();
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *o = *o + b;
            }
        }
        self.push(Op::AddRow(x, row), v, &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(Op::Scale(x, c), v, &[x])
    }

    /// Row lookup into a parameter table.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        assert!(
            matches!(self.nodes[table.0].op, Op::Param(_)),
            "gather requires a parameter table"
        );
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols(), data);
        self.push(
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            v,
            &[table],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.rows());
        let v = Tensor::from_vec(
            len,
            t.cols(),
            t.data()[start * t.cols()..(start + len) * t.cols()].to_vec(),
        );
        self.push(Op::SliceRows { x, start }, v, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.cols());
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(t.rows(), len, data);
        self.push(Op::SliceCols { x, start }, v, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
                offset += t.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), v, parts)
    }

    /// Stacks a `1 x c` row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), 1);
        let v = Tensor::from_vec(n, t.cols(), t.data().repeat(n));
        self.push(Op::RepeatRows(x), v, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = F::of(cols as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = F::of(GELU_C);
        let a = F::of(GELU_A);
        let half = F::of(0.5);
        let v = self
            .value(x)
            .map(|z| half * z * (F::one() + (c * (z + a * z * z * z)).tanh()));
        self.push(Op::Gelu(x), v, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut v = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            v.row_mut(r).copy_from_slice(&softmax(t.row(r)));
        }
        self.push(Op::SoftmaxRows(x), v, &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut v = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            let lse = log_sum_exp(t.row(r));
            for (o, &z) in v.row_mut(r).iter_mut().zip(t.row(r)) {
                *o = z - lse;
            }
        }
        self.push(Op::LogSoftmaxRows(x), v, &[x])
    }

    /// `out[:, j] = x[:, map[j]]`
    pub fn column_gather(&mut self, x: Var, map: &[usize]) -> Var {
        let t = self.value(x);
        let mut v = Tensor::zeros(t.rows(), map.len());
        for r in 0..t.rows() {
            for (j, &m) in map.iter().enumerate() {
                v.set(r, j, t.get(r, m));
            }
        }
        self.push(
            Op::ColumnGather {
                x,
                map: map.to_vec(),
            },
            v,
            &[x],
        )
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    /// Rows with `None` are ignored; with no targeted row the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), targets.len());
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            probs.row_mut(r).copy_from_slice(&softmax(t.row(r)));
            if let Some(k) = *target {
                total = total + log_sum_exp(t.row(r)) - t.get(r, k);
                count += 1;
            }
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::of(count as f64)
        };
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::row_vector(vec![loss]),
            &[logits],
        )
    }

    /// `KL(target || softmax(logits))` for a single `1 x k` row of logits.
    pub fn kl_divergence(&mut self, logits: Var, target: &[F]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), 1);
        assert_eq!(t.cols(), target.len());
        let z = t.row(0);
        let lse = log_sum_exp(z);
        let mut loss = F::zero();
        for (&p, &zi) in target.iter().zip(z) {
            if p > F::zero() {
                loss = loss + p * (p.ln() - (zi - lse));
            }
        }
        let probs = softmax(z);
        self.push(
            Op::KlDivergence {
                logits,
                target: target.to_vec(),
                probs,
            },
            Tensor::row_vector(vec![loss]),
            &[logits],
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` (an `m x 1` column)
    /// against targets in `[0, 1]`. Zero when `m == 0`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[F]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.cols(), 1);
        assert_eq!(t.rows(), targets.len());
        let mut total = F::zero();
        for (&z, &y) in t.data().iter().zip(targets) {
            // max(z, 0) - z y + ln(1 + e^{-|z|})
            total = total + z.max(F::zero()) - z * y + (F::one() + (-z.abs()).exp()).ln();
        }
        let loss = if targets.is_empty() {
            F::zero()
        } else {
            total / F::of(targets.len() as f64)
        };
        self.push(
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::row_vector(vec![loss]),
            &[logits],
        )
    }

    /// `sum_i c_i * x_i` over `1 x 1` scalars.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut total = F::zero();
        for &(v, c) in terms {
            total = total + c * self.scalar(v);
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            Op::WeightedSum(terms.to_vec()),
            Tensor::row_vector(vec![total]),
            &inputs,
        )
    }

    /// Back-propagates from the scalar `loss`, returning one gradient tensor
    /// per parameter (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: Var) -> Vec<Tensor<F>> {
        let mut grads: Vec<Tensor<F>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        self.backward_into(loss, &mut grads);
        grads
    }

    /// Like [`Tape::backward`] but accumulates into existing buffers.
    pub fn backward_into(&self, loss: Var, param_grads: &mut [Tensor<F>]) {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        assert_eq!(param_grads.len(), self.params.len());
        let mut node_grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::filled(1, 1, F::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                node_grads: &mut node_grads,
                param_grads: &mut *param_grads,
            };
            match &node.op {
                Op::Param(id) => param_grads[*id].add_assign(&g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.matmul_bt(self.value(*b)));
                    }
                    if acc.wants(*b) {
                        acc.add(*b, self.value(*a).matmul_at(&g));
                    }
                }
                Op::MatMulBt(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.matmul(self.value(*b)));
                    }
                    if acc.wants(*b) {
                        acc.add(*b, g.matmul_at(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.clone());
                    }
                    if acc.wants(*b) {
                        acc.add(*b, g);
                    }
                }
                Op::AddRow(x, row) => {
                    if acc.wants(*row) {
                        acc.add(*row, column_sums(&g));
                    }
                    if acc.wants(*x) {
                        acc.add(*x, g);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc.add(*x, g.map(|a| a * c));
                }
                Op::Gather { table, idx } => {
                    let Op::Param(id) = self.nodes[table.0].op else {
                        unreachable!()
                    };
                    let dst = &mut param_grads[id];
                    for (r, &row) in idx.iter().enumerate() {
                        for (o, &v) in dst.row_mut(row).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut full = Tensor::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    full.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    acc.add(*x, full);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut full = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        full.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc.add(*x, full);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if acc.wants(p) {
                            let mut part = Tensor::zeros(g.rows(), cols);
                            for r in 0..g.rows() {
                                part.row_mut(r)
                                    .copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            acc.add(p, part);
                        }
                        offset += cols;
                    }
                }
                Op::RepeatRows(x) => acc.add(*x, column_sums(&g)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let (rows, cols) = g.shape();
                    if acc.wants(*gamma) {
                        let mut dg = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let cur = dg.get(0, c);
                                dg.set(0, c, cur + g.get(r, c) * xhat.get(r, c));
                            }
                        }
                        acc.add(*gamma, dg);
                    }
                    if acc.wants(*beta) {
                        acc.add(*beta, column_sums(&g));
                    }
                    if acc.wants(*x) {
                        let n = F::of(cols as f64);
                        let mut dx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let dxhat: Vec<F> = (0..cols).map(|c| g.get(r, c) * gv[c]).collect();
                            let sum_d: F = dxhat.iter().copied().sum();
                            let sum_dx: F =
                                (0..cols).map(|c| dxhat[c] * xhat.get(r, c)).sum();
                            for c in 0..cols {
                                let v = inv_std[r] / n
                                    * (n * dxhat[c] - sum_d - xhat.get(r, c) * sum_dx);
                                dx.set(r, c, v);
                            }
                        }
                        acc.add(*x, dx);
                    }
                }
                Op::Gelu(x) => {
                    let c = F::of(GELU_C);
                    let a = F::of(GELU_A);
                    let half = F::of(0.5);
                    let three = F::of(3.0);
                    let src = self.value(*x);
                    let mut dx = g.clone();
                    for (o, &z) in dx.data_mut().iter_mut().zip(src.data()) {
                        let t = (c * (z + a * z * z * z)).tanh();
                        let d = half * (F::one() + t)
                            + half * z * (F::one() - t * t) * c * (F::one() + three * a * z * z);
                        *o = *o * d;
                    }
                    acc.add(*x, dx);
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: F = y.row(r).iter().zip(g.row(r)).map(|(&p, &d)| p * d).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - s));
                        }
                    }
                    acc.add(*x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = node.value.as_ref().expect("log-softmax value");
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let s: F = g.row(r).iter().copied().sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, g.get(r, c) - y.get(r, c).exp() * s);
                        }
                    }
                    acc.add(*x, dx);
                }
                Op::ColumnGather { x, map } => {
                    let src = self.value(*x);
                    let mut dx = Tensor::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for (j, &m) in map.iter().enumerate() {
                            let cur = dx.get(r, m);
                            dx.set(r, m, cur + g.get(r, j));
                        }
                    }
                    acc.add(*x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    if count > 0 {
                        let scale = g.data()[0] / F::of(count as f64);
                        let mut dz = Tensor::zeros(probs.rows(), probs.cols());
                        for (r, target) in targets.iter().enumerate() {
                            if let Some(k) = *target {
                                for c in 0..probs.cols() {
                                    let onehot = if c == k { F::one() } else { F::zero() };
                                    dz.set(r, c, (probs.get(r, c) - onehot) * scale);
                                }
                            }
                        }
                        acc.add(*logits, dz);
                    }
                }
                Op::KlDivergence {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g.data()[0];
                    let mass: F = target.iter().copied().sum();
                    let dz: Vec<F> = probs
                        .iter()
                        .zip(target)
                        .map(|(&q, &p)| (q * mass - p) * scale)
                        .collect();
                    acc.add(*logits, Tensor::row_vector(dz));
                }
                Op::BceWithLogits { logits, targets } => {
                    if !targets.is_empty() {
                        let scale = g.data()[0] / F::of(targets.len() as f64);
                        let z = self.value(*logits);
                        let dz: Vec<F> = z
                            .data()
                            .iter()
                            .zip(targets)
                            .map(|(&zi, &y)| (sigmoid(zi) - y) * scale)
                            .collect();
                        acc.add(*logits, Tensor::from_vec(targets.len(), 1, dz));
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        if acc.wants(v) {
                            acc.add(v, Tensor::filled(1, 1, g.data()[0] * c));
                        }
                    }
                }
            }
        }
    }
}

struct Accumulator<'a, F> {
    nodes: &'a [Node<F>],
    node_grads: &'a mut [Option<Tensor<F>>],
    param_grads: &'a mut [Tensor<F>],
}

impl<F: Scalar> Accumulator<'_, F> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Tensor<F>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        if let Op::Param(id) = node.op {
            self.param_grads[id].add_assign(&g);
            return;
        }
        match &mut self.node_grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

fn column_sums<F: Scalar>(g: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o = *o + v;
        }
    }
    out
}
