use crate::error::{contract, NumError, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a node in a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    NarrowLast { x: Var, start: usize },
    ConcatLast(Var, Var),
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::NarrowLast { .. } => "narrow_last",
            Op::ConcatLast(..) => "concat_last",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![a, b],
            Op::ConcatLast(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![a, b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::CausalSoftmax(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Permute { x, .. } | Op::NarrowLast { x, .. } | Op::SelectRows { x, .. } => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value for scalar reductions.
    scalar: Option<f64>,
}

/// Define-by-run computation graph. Nodes are appended in execution order,
/// so the node list is always a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            scalar: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Scalar value of a one-element node, at f64 precision when the op
    /// reduced in f64.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.numel() != 1 {
            return contract(format!("node {} is not a scalar", v.0));
        }
        Ok(node.scalar.unwrap_or(node.value.data()[0] as f64))
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; `None` for nodes that
    /// do not require grad or were unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        self.push_scalar(value, op, None)
    }

    fn push_scalar(&mut self, value: Tensor, op: Op, scalar: Option<f64>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(NumError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar,
        });
        Ok(Var(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x[.., n] + bias[n]`, broadcasting over leading dims.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.numel() != n {
            return contract(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                tb.shape(),
                tx.shape()
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias))
    }

    /// `a[.., k] · w[k, n]`, or `a[.., k] · w[n, k]ᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, w: Var, trans_b: bool) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.shape().len() != 2 {
            return contract(format!("matmul: rhs must be 2-D, got {:?}", tw.shape()));
        }
        let k = ta.last_dim();
        let (wk, n) = if trans_b {
            (tw.shape()[1], tw.shape()[0])
        } else {
            (tw.shape()[0], tw.shape()[1])
        };
        if wk != k {
            return contract(format!(
                "matmul: inner dims differ, lhs {:?} rhs {:?} (trans_b={trans_b})",
                ta.shape(),
                tw.shape()
            ));
        }
        let m = ta.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tw.data(), trans_b, &mut out, false);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::MatMul { a, b: w, trans_b })
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        self.matmul_impl(a, w, false)
    }

    /// `a · wᵀ` with `w` stored `[n, k]`; used for the tied LM head.
    pub fn matmul_nt(&mut self, a: Var, w: Var) -> Result<Var> {
        self.matmul_impl(a, w, true)
    }

    /// Batched matmul over matching leading dims: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return contract(format!("bmm: incompatible shapes {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (bk, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if bk != k {
            return contract(format!("bmm: inner dims differ {sa:?} vs {sb:?}"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..(i + 1) * m * k],
                false,
                &tb.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa.to_vec();
        shape[r - 1] = n;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::BatchMatMul { a, b, trans_b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), gelu)
    }

    /// Softmax over the last dimension; the denominator accumulates in f64.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x))
    }

    /// Softmax over the last dimension of `[.., t, t]` score blocks where row
    /// `i` only attends to columns `0..=i`. Masked entries are exactly zero,
    /// which is what an additive −∞ mask produces.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return contract(format!("causal_softmax: expects [.., t, t], got {s:?}"));
        }
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let i = r % n;
            softmax_row(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        let out = Tensor::new(s.to_vec(), data)?;
        self.push(out, Op::CausalSoftmax(x))
    }

    /// Layer normalization over the last dimension with affine scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.last_dim();
        if tg.numel() != n || tb.numel() != n {
            return contract(format!(
                "layer_norm: affine params {:?}/{:?} do not match {:?}",
                tg.shape(),
                tb.shape(),
                tx.shape()
            ));
        }
        let mut data = vec![0.0f32; tx.numel()];
        let mut rstds = Vec::with_capacity(tx.rows());
        for (row, out) in tx.data().chunks(n).zip(data.chunks_mut(n)) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] as f64 - mean) * rstd;
                out[j] = (xhat * tg.data()[j] as f64 + tb.data()[j] as f64) as f32;
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd: rstds,
            },
        )
    }

    /// Row gather: `table[v, d]`, ids → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return contract(format!("embedding: table must be 2-D, got {:?}", t.shape()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return contract(format!("embedding: id {id} out of range for {v} rows"));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean cross-entropy of `logits[.., v]` rows against target classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let v = t.last_dim();
        if t.rows() != targets.len() || targets.is_empty() {
            return contract(format!(
                "cross_entropy: {} logit rows vs {} targets",
                t.rows(),
                targets.len()
            ));
        }
        let mut total = 0.0f64;
        for (row, &target) in t.data().chunks(v).zip(targets) {
            if target >= v {
                return contract(format!("cross_entropy: target {target} out of range {v}"));
            }
            total += log_sum_exp(row) - row[target] as f64;
        }
        let loss = total / targets.len() as f64;
        self.push_scalar(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Some(loss),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.shape().len()];
        if perm.len() != seen.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return contract(format!("permute: {perm:?} is not a permutation of {:?}", t.shape()));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if start + len > n || len == 0 {
            return contract(format!("narrow_last: [{start}, {}) outside last dim {n}", start + len));
        }
        let data: Vec<f32> = t.data().chunks(n).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::NarrowLast { x, start })
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return contract(format!("concat_last: incompatible {sa:?} and {sb:?}"));
        }
        let (na, nb) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for (ra, rb) in ta.data().chunks(na).zip(tb.data().chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::ConcatLast(a, b))
    }

    /// Pick rows of `x` viewed as `[rows, last_dim]`; output `[idx.len(), last_dim]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= t.rows() {
                return contract(format!("select_rows: row {r} out of range {}", t.rows()));
            }
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push_scalar(Tensor::scalar(s as f32), Op::Sum(x), Some(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        self.push_scalar(Tensor::scalar(s as f32), Op::Mean(x), Some(s))
    }

    /// Reverse-mode sweep from a scalar `loss`. Populates gradients for every
    /// node that requires grad and is reachable from `loss`; each node is
    /// visited once, in reverse creation order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NumError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if needs(a) {
                    acc(grads, a, val(a).numel(), |ga| add_into(ga, g));
                }
                if needs(b) {
                    acc(grads, b, val(b).numel(), |gb| add_into(gb, g));
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    acc(grads, a, val(a).numel(), |ga| add_into(ga, g));
                }
                if needs(b) {
                    acc(grads, b, val(b).numel(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                    });
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let bv = val(b).data();
                    acc(grads, a, bv.len(), |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    });
                }
                if needs(b) {
                    let av = val(a).data();
                    acc(grads, b, av.len(), |gb| {
                        for j in 0..gb.len() {
                            gb[j] += g[j] * av[j];
                        }
                    });
                }
            }
            &Op::Scale(x, s) => {
                acc(grads, x, g.len(), |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
            }
            &Op::AddBias(x, bias) => {
                if needs(x) {
                    acc(grads, x, g.len(), |gx| add_into(gx, g));
                }
                if needs(bias) {
                    let n = val(bias).numel();
                    acc(grads, bias, n, |gb| {
                        let mut sums = vec![0.0f64; n];
                        for row in g.chunks(n) {
                            for (s, v) in sums.iter_mut().zip(row) {
                                *s += *v as f64;
                            }
                        }
                        for (o, s) in gb.iter_mut().zip(sums) {
                            *o += s as f32;
                        }
                    });
                }
            }
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                let k = ta.last_dim();
                let m = ta.rows();
                let n = node.value.last_dim();
                if needs(a) {
                    // dA[m,k] = dC[m,n] · op(B)ᵀ
                    acc(grads, a, m * k, |ga| gemm(m, n, k, g, false, tb.data(), !trans_b, ga, true));
                }
                if needs(b) {
                    if trans_b {
                        // dB[n,k] = dCᵀ · A
                        acc(grads, b, n * k, |gb| gemm(n, m, k, g, true, ta.data(), false, gb, true));
                    } else {
                        // dB[k,n] = Aᵀ · dC
                        acc(grads, b, k * n, |gb| gemm(k, m, n, ta.data(), true, g, false, gb, true));
                    }
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                let r = ta.shape().len();
                let (m, k) = (ta.shape()[r - 2], ta.shape()[r - 1]);
                let n = node.value.last_dim();
                let batch = ta.numel() / (m * k);
                if needs(a) {
                    acc(grads, a, ta.numel(), |ga| {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..(i + 1) * m * n],
                                false,
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                !trans_b,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                }
                if needs(b) {
                    acc(grads, b, tb.numel(), |gb| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                            let out = &mut gb[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                gemm(n, m, k, gi, true, ai, false, out, true);
                            } else {
                                gemm(k, m, n, ai, true, gi, false, out, true);
                            }
                        }
                    });
                }
            }
            &Op::Relu(x) => {
                let xv = val(x).data();
                acc(grads, x, g.len(), |gx| {
                    for j in 0..gx.len() {
                        if xv[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = val(x).data();
                acc(grads, x, g.len(), |gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            &Op::Softmax(x) | &Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                acc(grads, x, g.len(), |gx| {
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| *a as f64 * *b as f64).sum();
                        for j in 0..n {
                            out[j] += (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (tx, tg) = (val(x), val(gamma));
                let n = tx.last_dim();
                let xhat_row = |r: usize, row: &[f32]| -> Vec<f64> {
                    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    row.iter().map(|&v| (v as f64 - mean) * rstd[r]).collect()
                };
                if needs(x) {
                    acc(grads, x, tx.numel(), |gx| {
                        for (r, (row, gr)) in tx.data().chunks(n).zip(g.chunks(n)).enumerate() {
                            let xhat = xhat_row(r, row);
                            let dxhat: Vec<f64> =
                                gr.iter().zip(tg.data()).map(|(a, b)| *a as f64 * *b as f64).collect();
                            let m1 = dxhat.iter().sum::<f64>() / n as f64;
                            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            let out = &mut gx[r * n..(r + 1) * n];
                            for j in 0..n {
                                out[j] += (rstd[r] * (dxhat[j] - m1 - xhat[j] * m2)) as f32;
                            }
                        }
                    });
                }
                if needs(gamma) {
                    acc(grads, gamma, n, |gg| {
                        let mut sums = vec![0.0f64; n];
                        for (r, (row, gr)) in tx.data().chunks(n).zip(g.chunks(n)).enumerate() {
                            let xhat = xhat_row(r, row);
                            for j in 0..n {
                                sums[j] += gr[j] as f64 * xhat[j];
                            }
                        }
                        for (o, s) in gg.iter_mut().zip(sums) {
                            *o += s as f32;
                        }
                    });
                }
                if needs(beta) {
                    acc(grads, beta, n, |gb| {
                        let mut sums = vec![0.0f64; n];
                        for gr in g.chunks(n) {
                            for (s, v) in sums.iter_mut().zip(gr) {
                                *s += *v as f64;
                            }
                        }
                        for (o, s) in gb.iter_mut().zip(sums) {
                            *o += s as f32;
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.shape()[1];
                acc(grads, *table, t.numel(), |gt| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[id * d..(id + 1) * d], row);
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let t = val(*logits);
                let v = t.last_dim();
                let scale = g[0] as f64 / targets.len() as f64;
                acc(grads, *logits, t.numel(), |gl| {
                    for ((row, out), &target) in t.data().chunks(v).zip(gl.chunks_mut(v)).zip(targets) {
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] as f64 - lse).exp();
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            out[j] += ((p - onehot) * scale) as f32;
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(grads, x, g.len(), |gx| add_into(gx, g)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inverse[p] = d;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                acc(grads, *x, back.len(), |gx| add_into(gx, &back));
            }
            &Op::NarrowLast { x, start } => {
                let n = val(x).last_dim();
                let len = node.value.last_dim();
                acc(grads, x, val(x).numel(), |gx| {
                    for (out, gr) in gx.chunks_mut(n).zip(g.chunks(len)) {
                        add_into(&mut out[start..start + len], gr);
                    }
                });
            }
            &Op::ConcatLast(a, b) => {
                let (na, nb) = (val(a).last_dim(), val(b).last_dim());
                if needs(a) {
                    acc(grads, a, val(a).numel(), |ga| {
                        for (out, gr) in ga.chunks_mut(na).zip(g.chunks(na + nb)) {
                            add_into(out, &gr[..na]);
                        }
                    });
                }
                if needs(b) {
                    acc(grads, b, val(b).numel(), |gb| {
                        for (out, gr) in gb.chunks_mut(nb).zip(g.chunks(na + nb)) {
                            add_into(out, &gr[na..]);
                        }
                    });
                }
            }
            Op::SelectRows { x, rows } => {
                let t = val(*x);
                let d = t.last_dim();
                acc(grads, *x, t.numel(), |gx| {
                    for (gr, &r) in g.chunks(d).zip(rows) {
                        add_into(&mut gx[r * d..(r + 1) * d], gr);
                    }
                });
            }
            &Op::Sum(x) => {
                let n = val(x).numel();
                acc(grads, x, n, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            &Op::Mean(x) => {
                let n = val(x).numel();
                let s = g[0] / n as f32;
                acc(grads, x, n, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize, f: impl FnOnce(&mut [f32])) {
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / denom) as f32;
    }
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}
