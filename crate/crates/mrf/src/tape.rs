//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is a Wengert list: every operation appends one node, so
//! creation order is a topological order and the backward pass walks the
//! list in exact reverse. Variables ([`Var`]) are indices into the tape.
//! Leaves enter via [`Tape::param`] (participates in gradients) or
//! [`Tape::constant`]; an interior node needs a gradient iff any of its
//! inputs does, and the backward pass skips the rest.
//!
//! Shape violations panic — they are programming errors, not runtime
//! conditions. In debug builds every op additionally checks its output for
//! NaN/Inf and panics naming the op. A tape can be consumed by
//! [`Tape::backward`] exactly once.
//!
//! All kernels are sequential with a fixed reduction order, so identical
//! inputs reproduce identical bits.

use std::cell::RefCell;

use crate::tensor::{matmul_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const RMS_EPS: f64 = 1e-6;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// GELU (tanh approximation) on a plain value, identical to the tape op.
pub fn gelu_value(x: f64) -> f64 {
    gelu_scalar(x)
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Node {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SoftmaxRows { x: Var },
    CausalSoftmax { x: Var },
    LogSumExpRows { x: Var },
    GatherRows { x: Var, ids: Vec<usize> },
    ScatterAddRows { base: Var, src: Var, ids: Vec<usize> },
    GatherElems { x: Var, pos: Vec<(usize, usize)> },
    ScaleRows { x: Var, s: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    MaxStack { parts: Vec<Var> },
    MaxPoolCols { x: Var, block: usize },
    MeanRows { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    WsumConst { x: Var, w: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Inner {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    needs: Vec<bool>,
}

pub struct Tape {
    inner: RefCell<Inner>,
    spent: std::cell::Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner { vals: Vec::new(), nodes: Vec::new(), needs: Vec::new() }),
            spent: std::cell::Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Node::Leaf, true, "param")
    }

    /// Leaf excluded from gradient computation.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Node::Leaf, false, "constant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().needs[v.idx]
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().vals[v.idx].shape().to_vec()
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.inner.borrow().vals[v.idx].clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.inner.borrow().vals[v.idx])
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let t = &inner.vals[v.idx];
        assert_eq!(t.numel(), 1, "scalar_value on shape {:?}", t.shape());
        t.data()[0]
    }

    fn push(&self, val: Tensor, node: Node, needs: bool, op: &str) -> Var {
        if cfg!(debug_assertions) && !val.is_finite() {
            panic!("non-finite values produced by op '{op}'");
        }
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(val);
        inner.nodes.push(node);
        inner.needs.push(needs);
        Var { idx: inner.nodes.len() - 1 }
    }

    fn needs_any(&self, vars: &[Var]) -> bool {
        let inner = self.inner.borrow();
        vars.iter().any(|v| inner.needs[v.idx])
    }

    // ---- arithmetic ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            inner.vals[a.idx].matmul(&inner.vals[b.idx])
        };
        let needs = self.needs_any(&[a, b]);
        self.push(out, Node::Matmul { a, b }, needs, "matmul")
    }

    pub fn transpose(&self, x: Var) -> Var {
        let out = self.inner.borrow().vals[x.idx].transpose();
        let needs = self.needs_any(&[x]);
        self.push(out, Node::Transpose { x }, needs, "transpose")
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.vals[a.idx], &inner.vals[b.idx]);
            assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        let needs = self.needs_any(&[a, b]);
        self.push(out, Node::Add { a, b }, needs, "add")
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let (ta, tb) = (&inner.vals[a.idx], &inner.vals[b.idx]);
            assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        let needs = self.needs_any(&[a, b]);
        self.push(out, Node::Mul { a, b }, needs, "mul")
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::Scale { x, c }, needs, "scale")
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu_scalar(v)).collect())
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::Gelu { x }, needs, "gelu")
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rmsnorm(&self, x: Var, gain: Var) -> Var {
        let (out, inv_rms) = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let g = &inner.vals[gain.idx];
            let (r, c) = (t.rows(), t.cols());
            assert_eq!(g.numel(), c, "rmsnorm gain length");
            let mut data = vec![0.0; r * c];
            let mut inv_rms = vec![0.0; r];
            for i in 0..r {
                let row = t.row(i);
                let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                let inv = 1.0 / (ms + RMS_EPS).sqrt();
                inv_rms[i] = inv;
                for j in 0..c {
                    data[i * c + j] = row[j] * inv * g.data()[j];
                }
            }
            (Tensor::new(vec![r, c], data), inv_rms)
        };
        let needs = self.needs_any(&[x, gain]);
        self.push(out, Node::RmsNorm { x, gain, inv_rms }, needs, "rmsnorm")
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            assert!(c >= 1, "softmax on empty row");
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                softmax_slice(t.row(i), &mut data[i * c..(i + 1) * c]);
            }
            Tensor::new(t.shape().to_vec(), data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::SoftmaxRows { x }, needs, "softmax_rows")
    }

    /// Softmax over a square score matrix where row `i` only attends to
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            assert_eq!(r, c, "causal_softmax requires a square matrix");
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                softmax_slice(&t.row(i)[..=i], &mut data[i * c..i * c + i + 1]);
            }
            Tensor::new(t.shape().to_vec(), data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::CausalSoftmax { x }, needs, "causal_softmax")
    }

    /// `log(sum(exp(row)))` per row, max-subtracted.
    pub fn logsumexp_rows(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let r = t.rows();
            let data = (0..r).map(|i| logsumexp_slice(t.row(i))).collect();
            Tensor::new(vec![r], data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::LogSumExpRows { x }, needs, "logsumexp_rows")
    }

    /// Select rows by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, ids: &[usize]) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            let mut data = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                assert!(id < r, "gather_rows index {id} out of {r}");
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), c], data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::GatherRows { x, ids: ids.to_vec() }, needs, "gather_rows")
    }

    /// `base` with `src`'s rows added at positions `ids` (one per src row).
    pub fn scatter_add_rows(&self, base: Var, src: Var, ids: &[usize]) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let b = &inner.vals[base.idx];
            let s = &inner.vals[src.idx];
            let c = b.cols();
            assert_eq!(s.cols(), c, "scatter_add_rows width mismatch");
            assert_eq!(s.rows(), ids.len(), "scatter_add_rows id count");
            let mut data = b.data().to_vec();
            for (k, &id) in ids.iter().enumerate() {
                assert!(id < b.rows(), "scatter_add_rows index {id} out of {}", b.rows());
                for j in 0..c {
                    data[id * c + j] += s.data()[k * c + j];
                }
            }
            Tensor::new(b.shape().to_vec(), data)
        };
        let needs = self.needs_any(&[base, src]);
        self.push(out, Node::ScatterAddRows { base, src, ids: ids.to_vec() }, needs, "scatter_add_rows")
    }

    /// Pick individual `(row, col)` entries into a vector.
    pub fn gather_elems(&self, x: Var, pos: &[(usize, usize)]) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            let data = pos
                .iter()
                .map(|&(i, j)| {
                    assert!(i < r && j < c, "gather_elems ({i},{j}) out of {r}x{c}");
                    t.data()[i * c + j]
                })
                .collect();
            Tensor::new(vec![pos.len()], data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::GatherElems { x, pos: pos.to_vec() }, needs, "gather_elems")
    }

    /// Multiply row `i` of `x` by scalar `s[i]`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let sv = &inner.vals[s.idx];
            let (r, c) = (t.rows(), t.cols());
            assert_eq!(sv.numel(), r, "scale_rows scale length");
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let f = sv.data()[i];
                for j in 0..c {
                    data[i * c + j] = t.data()[i * c + j] * f;
                }
            }
            Tensor::new(t.shape().to_vec(), data)
        };
        let needs = self.needs_any(&[x, s]);
        self.push(out, Node::ScaleRows { x, s }, needs, "scale_rows")
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            assert!(start + len <= r, "slice_rows {start}+{len} out of {r}");
            Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::SliceRows { x, start }, needs, "slice_rows")
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            assert!(start + len <= c, "slice_cols {start}+{len} out of {c}");
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[start..start + len]);
            }
            Tensor::new(vec![r, len], data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::SliceCols { x, start }, needs, "slice_cols")
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let out = {
            let inner = self.inner.borrow();
            let c = inner.vals[parts[0].idx].cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &inner.vals[p.idx];
                assert_eq!(t.cols(), c, "concat_rows width mismatch");
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c], data)
        };
        let needs = self.needs_any(parts);
        self.push(out, Node::ConcatRows { parts: parts.to_vec() }, needs, "concat_rows")
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let out = {
            let inner = self.inner.borrow();
            let r = inner.vals[parts[0].idx].rows();
            let total_c: usize = parts.iter().map(|p| inner.vals[p.idx].cols()).sum();
            let mut data = vec![0.0; r * total_c];
            let mut off = 0;
            for p in parts {
                let t = &inner.vals[p.idx];
                assert_eq!(t.rows(), r, "concat_cols height mismatch");
                let c = t.cols();
                for i in 0..r {
                    data[i * total_c + off..i * total_c + off + c].copy_from_slice(t.row(i));
                }
                off += c;
            }
            Tensor::new(vec![r, total_c], data)
        };
        let needs = self.needs_any(parts);
        self.push(out, Node::ConcatCols { parts: parts.to_vec() }, needs, "concat_cols")
    }

    /// Elementwise maximum across same-shaped tensors; ties resolve to the
    /// earliest argument so gradients are deterministic.
    pub fn max_stack(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let out = {
            let inner = self.inner.borrow();
            let first = &inner.vals[parts[0].idx];
            let mut data = first.data().to_vec();
            for p in &parts[1..] {
                let t = &inner.vals[p.idx];
                assert_eq!(t.shape(), first.shape(), "max_stack shape mismatch");
                for (d, &v) in data.iter_mut().zip(t.data()) {
                    if v > *d {
                        *d = v;
                    }
                }
            }
            Tensor::new(first.shape().to_vec(), data)
        };
        let needs = self.needs_any(parts);
        self.push(out, Node::MaxStack { parts: parts.to_vec() }, needs, "max_stack")
    }

    /// Max over contiguous column blocks: `[r, n*block] -> [r, n]`.
    pub fn max_pool_cols(&self, x: Var, block: usize) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            assert!(block > 0 && c % block == 0, "max_pool_cols {c} % {block}");
            let n = c / block;
            let mut data = vec![0.0; r * n];
            for i in 0..r {
                let row = t.row(i);
                for e in 0..n {
                    let mut best = row[e * block];
                    for b in 1..block {
                        let v = row[e * block + b];
                        if v > best {
                            best = v;
                        }
                    }
                    data[i * n + e] = best;
                }
            }
            Tensor::new(vec![r, n], data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::MaxPoolCols { x, block }, needs, "max_pool_cols")
    }

    /// Column means: `[r, c] -> [c]`.
    pub fn mean_rows(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            let (r, c) = (t.rows(), t.cols());
            let mut data = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    data[j] += t.data()[i * c + j];
                }
            }
            for v in data.iter_mut() {
                *v /= r as f64;
            }
            Tensor::new(vec![c], data)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::MeanRows { x }, needs, "mean_rows")
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            Tensor::scalar(inner.vals[x.idx].data().iter().sum())
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::SumAll { x }, needs, "sum_all")
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::MeanAll { x }, needs, "mean_all")
    }

    /// Weighted sum against a constant vector: `sum_i w[i] * x[i]`.
    pub fn wsum_const(&self, x: Var, w: &[f64]) -> Var {
        let out = {
            let inner = self.inner.borrow();
            let t = &inner.vals[x.idx];
            assert_eq!(t.numel(), w.len(), "wsum_const length mismatch");
            let mut acc = 0.0;
            for (a, b) in t.data().iter().zip(w) {
                acc += a * b;
            }
            Tensor::scalar(acc)
        };
        let needs = self.needs_any(&[x]);
        self.push(out, Node::WsumConst { x, w: w.to_vec() }, needs, "wsum_const")
    }

    /// Mean next-token cross-entropy from raw logits (fused log-softmax).
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let (out, probs) = {
            let inner = self.inner.borrow();
            let t = &inner.vals[logits.idx];
            let (r, c) = (t.rows(), t.cols());
            assert_eq!(r, targets.len(), "cross_entropy target count");
            let mut probs = vec![0.0; r * c];
            let mut total = 0.0;
            for i in 0..r {
                assert!(targets[i] < c, "cross_entropy target {} out of {c}", targets[i]);
                let row = t.row(i);
                let prow = &mut probs[i * c..(i + 1) * c];
                softmax_slice(row, prow);
                let lse = logsumexp_slice(row);
                total += lse - row[targets[i]];
            }
            (Tensor::scalar(total / r as f64), probs)
        };
        let needs = self.needs_any(&[logits]);
        self.push(out, Node::CrossEntropy { logits, targets: targets.to_vec(), probs }, needs, "cross_entropy")
    }

    // ---- backward ----

    /// Accumulate `d(loss)/d(leaf)` for every gradient-requiring leaf.
    ///
    /// Nodes are visited in exact reverse creation order (a reverse
    /// topological order by construction). Panics if `loss` is not scalar
    /// or if the tape was already consumed.
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(!self.spent.get(), "backward called twice on the same tape");
        self.spent.set(true);
        let inner = self.inner.borrow();
        assert_eq!(inner.vals[loss.idx].numel(), 1, "backward requires a scalar loss");

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.idx] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !inner.needs[idx] {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &inner.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = Some(g);
                }
                Node::Matmul { a, b } => {
                    let ta = &inner.vals[a.idx];
                    let tb = &inner.vals[b.idx];
                    let (r, s) = (ta.rows(), ta.cols());
                    let t = tb.cols();
                    if inner.needs[a.idx] {
                        // dA = dY . B^T
                        let bt = tb.transpose();
                        let mut da = vec![0.0; r * s];
                        matmul_into(&g, bt.data(), &mut da, r, t, s);
                        accumulate(&mut grads, a.idx, &da);
                    }
                    if inner.needs[b.idx] {
                        // dB = A^T . dY
                        let at = ta.transpose();
                        let mut db = vec![0.0; s * t];
                        matmul_into(at.data(), &g, &mut db, s, r, t);
                        accumulate(&mut grads, b.idx, &db);
                    }
                }
                Node::Transpose { x } => {
                    let t = &inner.vals[idx];
                    let (r, c) = (t.rows(), t.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] = g[i * c + j];
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::Add { a, b } => {
                    if inner.needs[a.idx] {
                        accumulate(&mut grads, a.idx, &g);
                    }
                    if inner.needs[b.idx] {
                        accumulate(&mut grads, b.idx, &g);
                    }
                }
                Node::Mul { a, b } => {
                    if inner.needs[a.idx] {
                        let tb = &inner.vals[b.idx];
                        let da: Vec<f64> = g.iter().zip(tb.data()).map(|(gv, bv)| gv * bv).collect();
                        accumulate(&mut grads, a.idx, &da);
                    }
                    if inner.needs[b.idx] {
                        let ta = &inner.vals[a.idx];
                        let db: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                        accumulate(&mut grads, b.idx, &db);
                    }
                }
                Node::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::Gelu { x } => {
                    let tx = &inner.vals[x.idx];
                    let dx: Vec<f64> =
                        g.iter().zip(tx.data()).map(|(gv, &xv)| gv * gelu_grad_scalar(xv)).collect();
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::RmsNorm { x, gain, inv_rms } => {
                    let tx = &inner.vals[x.idx];
                    let tg = &inner.vals[gain.idx];
                    let (r, c) = (tx.rows(), tx.cols());
                    if inner.needs[gain.idx] {
                        let mut dg = vec![0.0; c];
                        for i in 0..r {
                            let inv = inv_rms[i];
                            for j in 0..c {
                                dg[j] += g[i * c + j] * tx.data()[i * c + j] * inv;
                            }
                        }
                        accumulate(&mut grads, gain.idx, &dg);
                    }
                    if inner.needs[x.idx] {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let inv = inv_rms[i];
                            let row = tx.row(i);
                            let grow = &g[i * c..(i + 1) * c];
                            let mut proj = 0.0;
                            for j in 0..c {
                                proj += grow[j] * tg.data()[j] * row[j];
                            }
                            let k = inv * inv * inv * proj / c as f64;
                            for j in 0..c {
                                dx[i * c + j] = inv * grow[j] * tg.data()[j] - k * row[j];
                            }
                        }
                        accumulate(&mut grads, x.idx, &dx);
                    }
                }
                Node::SoftmaxRows { x } => {
                    let y = &inner.vals[idx];
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yrow = y.row(i);
                        let grow = &g[i * c..(i + 1) * c];
                        let s: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..c {
                            dx[i * c + j] = yrow[j] * (grow[j] - s);
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::CausalSoftmax { x } => {
                    let y = &inner.vals[idx];
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let yrow = &y.row(i)[..=i];
                        let grow = &g[i * c..i * c + i + 1];
                        let s: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..=i {
                            dx[i * c + j] = yrow[j] * (grow[j] - s);
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::LogSumExpRows { x } => {
                    let tx = &inner.vals[x.idx];
                    let lse = &inner.vals[idx];
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let l = lse.data()[i];
                        for j in 0..c {
                            dx[i * c + j] = g[i] * (tx.data()[i * c + j] - l).exp();
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::GatherRows { x, ids } => {
                    let tx = &inner.vals[x.idx];
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dx[id * c + j] += g[k * c + j];
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::ScatterAddRows { base, src, ids } => {
                    if inner.needs[base.idx] {
                        accumulate(&mut grads, base.idx, &g);
                    }
                    if inner.needs[src.idx] {
                        let c = inner.vals[src.idx].cols();
                        let mut ds = vec![0.0; ids.len() * c];
                        for (k, &id) in ids.iter().enumerate() {
                            ds[k * c..(k + 1) * c].copy_from_slice(&g[id * c..(id + 1) * c]);
                        }
                        accumulate(&mut grads, src.idx, &ds);
                    }
                }
                Node::GatherElems { x, pos } => {
                    let tx = &inner.vals[x.idx];
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    for (k, &(i, j)) in pos.iter().enumerate() {
                        dx[i * c + j] += g[k];
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::ScaleRows { x, s } => {
                    let tx = &inner.vals[x.idx];
                    let ts = &inner.vals[s.idx];
                    let (r, c) = (tx.rows(), tx.cols());
                    if inner.needs[x.idx] {
                        let mut dx = vec![0.0; r * c];
                        for i in 0..r {
                            let f = ts.data()[i];
                            for j in 0..c {
                                dx[i * c + j] = g[i * c + j] * f;
                            }
                        }
                        accumulate(&mut grads, x.idx, &dx);
                    }
                    if inner.needs[s.idx] {
                        let mut ds = vec![0.0; r];
                        for i in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[i * c + j] * tx.data()[i * c + j];
                            }
                            ds[i] = acc;
                        }
                        accumulate(&mut grads, s.idx, &ds);
                    }
                }
                Node::SliceRows { x, start } => {
                    let tx = &inner.vals[x.idx];
                    let c = tx.cols();
                    let mut dx = vec![0.0; tx.numel()];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::SliceCols { x, start } => {
                    let tx = &inner.vals[x.idx];
                    let (r, c) = (tx.rows(), tx.cols());
                    let len = inner.vals[idx].cols();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] = g[i * len + j];
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::ConcatRows { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let t = &inner.vals[p.idx];
                        let len = t.numel();
                        if inner.needs[p.idx] {
                            accumulate(&mut grads, p.idx, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Node::ConcatCols { parts } => {
                    let r = inner.vals[parts[0].idx].rows();
                    let total_c = inner.vals[idx].cols();
                    let mut off = 0;
                    for p in parts {
                        let c = inner.vals[p.idx].cols();
                        if inner.needs[p.idx] {
                            let mut dp = vec![0.0; r * c];
                            for i in 0..r {
                                dp[i * c..(i + 1) * c]
                                    .copy_from_slice(&g[i * total_c + off..i * total_c + off + c]);
                            }
                            accumulate(&mut grads, p.idx, &dp);
                        }
                        off += c;
                    }
                }
                Node::MaxStack { parts } => {
                    let y = &inner.vals[idx];
                    let numel = y.numel();
                    // route each element's grad to the first part attaining the max
                    let mut routed = vec![false; numel];
                    for p in parts {
                        let t = &inner.vals[p.idx];
                        let mut dp = vec![0.0; numel];
                        let mut any = false;
                        for e in 0..numel {
                            if !routed[e] && t.data()[e] == y.data()[e] {
                                routed[e] = true;
                                dp[e] = g[e];
                                any = true;
                            }
                        }
                        if any && inner.needs[p.idx] {
                            accumulate(&mut grads, p.idx, &dp);
                        }
                    }
                }
                Node::MaxPoolCols { x, block } => {
                    let tx = &inner.vals[x.idx];
                    let y = &inner.vals[idx];
                    let (r, n) = (y.rows(), y.cols());
                    let c = tx.cols();
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for e in 0..n {
                            let best = y.data()[i * n + e];
                            for b in 0..*block {
                                let col = e * block + b;
                                if tx.data()[i * c + col] == best {
                                    dx[i * c + col] = g[i * n + e];
                                    break;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::MeanRows { x } => {
                    let tx = &inner.vals[x.idx];
                    let (r, c) = (tx.rows(), tx.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j] / r as f64;
                        }
                    }
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::SumAll { x } => {
                    let n_in = inner.vals[x.idx].numel();
                    accumulate(&mut grads, x.idx, &vec![g[0]; n_in]);
                }
                Node::MeanAll { x } => {
                    let n_in = inner.vals[x.idx].numel();
                    accumulate(&mut grads, x.idx, &vec![g[0] / n_in as f64; n_in]);
                }
                Node::WsumConst { x, w } => {
                    let dx: Vec<f64> = w.iter().map(|wv| wv * g[0]).collect();
                    accumulate(&mut grads, x.idx, &dx);
                }
                Node::CrossEntropy { logits, targets, probs } => {
                    let r = targets.len();
                    let c = probs.len() / r;
                    let scale = g[0] / r as f64;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let ind = if j == targets[i] { 1.0 } else { 0.0 };
                            dx[i * c + j] = scale * (probs[i * c + j] - ind);
                        }
                    }
                    accumulate(&mut grads, logits.idx, &dx);
                }
            }
        }

        Grads { g: grads }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, delta: &[f64]) {
    match &mut grads[idx] {
        Some(g) => {
            debug_assert_eq!(g.len(), delta.len());
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(delta.to_vec());
        }
    }
}

fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g.get(v.idx).and_then(|o| o.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn softmax_uniform_on_zeros() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 8]));
        let y = tape.softmax_rows(x);
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.125);
        }
    }

    #[test]
    fn softmax_large_logits_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        assert!(v.data()[0] > 1.0 - 1e-12);
        assert!(v.data()[1] < 1e-12);
        assert!(v.is_finite());
    }

    #[test]
    fn softmax_reference_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        // direct evaluation of exp(x_i)/sum exp
        let want = [0.09003, 0.24473, 0.66524];
        for (got, w) in v.data().iter().zip(want) {
            assert!((got - w).abs() < 1e-5, "{got} vs {w}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_permute() {
        let mut rng = SeedRng::new(11);
        for _ in 0..50 {
            let n = 1 + rng.below(12);
            let data: Vec<f64> = (0..n).map(|_| rng.normal() * 3.0).collect();
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![1, n], data.clone()));
            let y = tape.value(tape.softmax_rows(x));
            let sum: f64 = y.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            // permutation equivariance: rotate input, outputs rotate
            let mut rot = data.clone();
            rot.rotate_left(1);
            let tape2 = Tape::new();
            let x2 = tape2.constant(Tensor::new(vec![1, n], rot));
            let y2 = tape2.value(tape2.softmax_rows(x2));
            for i in 0..n {
                assert!((y.data()[(i + 1) % n] - y2.data()[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]));
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_twice_input() {
        let tape = Tape::new();
        let w = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
        let sq = tape.mul(w, w);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "backward called twice")]
    fn backward_twice_panics() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let loss = tape.sum_all(w);
        let _ = tape.backward(loss);
        let _ = tape.backward(loss);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_panics() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros(vec![2, 2]));
        let y = tape.scale(w, 2.0);
        let _ = tape.backward(y);
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(w, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    /// Central finite differences against the analytic gradient for a
    /// composite expression touching most ops.
    #[test]
    fn finite_difference_composite() {
        let mut rng = SeedRng::new(33);
        let x0 = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let w0 = Tensor::randn(vec![5, 4], 0.7, &mut rng);
        let g0 = Tensor::randn(vec![4], 0.5, &mut rng);

        let eval = |xd: &[f64], wd: &[f64], gd: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], xd.to_vec()));
            let w = tape.constant(Tensor::new(vec![5, 4], wd.to_vec()));
            let g = tape.constant(Tensor::new(vec![4], gd.to_vec()));
            let xn = tape.rmsnorm(x, g);
            let h = tape.matmul(xn, tape.transpose(w));
            let a = tape.gelu(h);
            let p = tape.softmax_rows(a);
            let lse = tape.logsumexp_rows(h);
            let l1 = tape.mean_all(tape.mul(lse, lse));
            let l2 = tape.sum_all(tape.mul(p, p));
            let loss = tape.add(l1, l2);
            tape.scalar_value(loss)
        };

        // analytic
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let w = tape.param(w0.clone());
        let g = tape.param(g0.clone());
        let xn = tape.rmsnorm(x, g);
        let h = tape.matmul(xn, tape.transpose(w));
        let a = tape.gelu(h);
        let p = tape.softmax_rows(a);
        let lse = tape.logsumexp_rows(h);
        let l1 = tape.mean_all(tape.mul(lse, lse));
        let l2 = tape.sum_all(tape.mul(p, p));
        let loss = tape.add(l1, l2);
        let grads = tape.backward(loss);

        let check = |name: &str, base: &Tensor, analytic: &[f64], eval_fn: &dyn Fn(&[f64]) -> f64| {
            let h_step = 1e-5;
            for i in 0..base.numel() {
                let mut plus = base.data().to_vec();
                let mut minus = base.data().to_vec();
                plus[i] += h_step;
                minus[i] -= h_step;
                let fd = (eval_fn(&plus) - eval_fn(&minus)) / (2.0 * h_step);
                let a = analytic[i];
                let rel = (a - fd).abs() / f64::max(1e-8, a.abs() + fd.abs());
                assert!(rel < 1e-6, "{name}[{i}]: analytic {a} vs fd {fd} (rel {rel})");
            }
        };
        check("x", &x0, grads.get(x).unwrap(), &|d| eval(d, w0.data(), g0.data()));
        check("w", &w0, grads.get(w).unwrap(), &|d| eval(x0.data(), d, g0.data()));
        check("g", &g0, grads.get(g).unwrap(), &|d| eval(x0.data(), w0.data(), d));
    }

    #[test]
    fn finite_difference_dispatch_ops() {
        let mut rng = SeedRng::new(77);
        let x0 = Tensor::randn(vec![4, 3], 1.0, &mut rng);
        let s0 = Tensor::randn(vec![2], 0.5, &mut rng);
        let ids = [1usize, 3];
        let pos = [(0usize, 1usize), (2, 2)];

        let eval = |xd: &[f64], sd: &[f64]| -> f64 {
            let tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![4, 3], xd.to_vec()));
            let s = tape.constant(Tensor::new(vec![2], sd.to_vec()));
            let picked = tape.gather_rows(x, &ids);
            let scaled = tape.scale_rows(picked, s);
            let base = tape.constant(Tensor::zeros(vec![4, 3]));
            let y = tape.scatter_add_rows(base, scaled, &ids);
            let e = tape.gather_elems(x, &pos);
            let l = tape.add(tape.sum_all(tape.mul(y, y)), tape.sum_all(tape.mul(e, e)));
            tape.scalar_value(l)
        };

        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let s = tape.param(s0.clone());
        let picked = tape.gather_rows(x, &ids);
        let scaled = tape.scale_rows(picked, s);
        let base = tape.constant(Tensor::zeros(vec![4, 3]));
        let y = tape.scatter_add_rows(base, scaled, &ids);
        let e = tape.gather_elems(x, &pos);
        let l = tape.add(tape.sum_all(tape.mul(y, y)), tape.sum_all(tape.mul(e, e)));
        let grads = tape.backward(l);

        let h = 1e-5;
        for (name, base_t, var) in [("x", &x0, x), ("s", &s0, s)] {
            let analytic = grads.get(var).unwrap();
            for i in 0..base_t.numel() {
                let mut plus = base_t.data().to_vec();
                let mut minus = base_t.data().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let (fp, fm) = if name == "x" {
                    (eval(&plus, s0.data()), eval(&minus, s0.data()))
                } else {
                    (eval(x0.data(), &plus), eval(x0.data(), &minus))
                };
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - fd).abs() / f64::max(1e-8, a.abs() + fd.abs());
                assert!(rel < 1e-6, "{name}[{i}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn causal_softmax_rows_are_distributions() {
        let mut rng = SeedRng::new(3);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(vec![5, 5], 2.0, &mut rng));
        let y = tape.value(tape.causal_softmax(x));
        for i in 0..5 {
            let row = y.row(i);
            let sum: f64 = row[..=i].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for &v in &row[i + 1..] {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn max_stack_ties_go_to_first() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2], vec![1.0, 5.0]));
        let b = tape.param(Tensor::new(vec![2], vec![1.0, 7.0]));
        let m = tape.max_stack(&[a, b]);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let tape = Tape::new();
        let logits = tape.param(Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.5, 1.0, 0.0, -1.0]));
        let targets = [2usize, 0];
        let loss = tape.cross_entropy(logits, &targets);
        let got = tape.scalar_value(loss);
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tape.value(logits);
            let row = row.row(i).to_vec();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            want += lse - row[t];
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-14);
    }
}
