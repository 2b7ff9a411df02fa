//! Single-use computation tape: forward at insertion, reverse-mode backward.

use super::{DiffError, DiffResult, ParamId, ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Val<S> {
    Owned(Vec<S>),
    Param(ParamId),
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(S),
    Relu,
    Exp,
    Log,
    Matmul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        rhs_shared: bool,
    },
    Swap {
        ax0: usize,
        ax1: usize,
    },
    Reshape,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
    },
    Broadcast0 {
        copies: usize,
    },
    AddRow,
    /// Replace rows selected by `mask` with a learned row vector.
    FillRows {
        mask: Vec<bool>,
    },
    /// Expand a per-head relative-offset table into additive attention bias.
    RelBias {
        total: usize,
        tq: usize,
        tk: usize,
    },
    /// Softmax along `axis`; entries with `mask == false` are excluded
    /// (treated as -inf pre-softmax) and lanes with no valid entry yield zeros.
    MaskedSoftmax {
        axis: usize,
        mask: Vec<bool>,
    },
    /// Normalization over the last axis with learned scale and shift.
    /// `mean`/`rstd` are saved per lane at forward time.
    LayerNorm {
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    /// Max over `axis` restricted to `mask == true`; empty lanes yield zero.
    /// `argmax` holds the flat input index per output element (usize::MAX when empty).
    MaskedMaxPool {
        axis: usize,
        mask: Vec<bool>,
        argmax: Vec<usize>,
    },
    SumAll,
    L1Loss,
    MaskedMse {
        target: Vec<S>,
        mask: Vec<bool>,
        count: usize,
    },
    /// Sum-form binary cross-entropy on probabilities, clamped to [lo, hi].
    BceSum {
        target: Vec<S>,
        lo: f64,
        hi: f64,
    },
}

struct Node<S> {
    op: Op<S>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    val: Val<S>,
    needs_grad: bool,
}

/// Computation tape borrowing a parameter store for one forward/backward pass.
pub struct Graph<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    param_nodes: Vec<Option<usize>>,
}

fn value_of<'g, S: Scalar>(
    nodes: &'g [Node<S>],
    store: &'g ParamStore<S>,
    id: usize,
) -> &'g [S] {
    match &nodes[id].val {
        Val::Owned(v) => v,
        Val::Param(pid) => store.get(*pid).data(),
    }
}

/// Decompose `shape` around `axis` into (outer, len, inner).
/// Flat index of lane element j in lane (o, i) is `(o * len + j) * inner + i`.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        value_of(&self.nodes, self.store, id.0)
    }

    /// Gradient of the last `backward` root w.r.t. node `id`, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].shape.iter().product::<usize>(), 1);
        self.value(id)[0]
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<usize>, shape: Vec<usize>, val: Vec<S>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), val.len());
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            val: Val::Owned(val),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            val: Val::Owned(t.data().to_vec()),
            needs_grad: t.requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<S>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape,
            val: Val::Owned(data),
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts (or reuses) the leaf for a stored parameter.
    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(idx) = self.param_nodes[pid.0] {
            return NodeId(idx);
        }
        let shape = self.store.get(pid).shape().to_vec();
        self.nodes.push(Node {
            op: Op::Param(pid),
            inputs: vec![],
            shape,
            val: Val::Param(pid),
            needs_grad: true,
        });
        let idx = self.nodes.len() - 1;
        self.param_nodes[pid.0] = Some(idx);
        NodeId(idx)
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> DiffResult<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DiffError::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        self.check_same_shape("add", a, b)?;
        let v: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add, vec![a.0, b.0], shape, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let v: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub, vec![a.0, b.0], shape, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let v: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul, vec![a.0, b.0], shape, v))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let v: Vec<S> = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::AddScalar, vec![a.0], shape, v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        let v: Vec<S> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::MulScalar(c), vec![a.0], shape, v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v: Vec<S> = self
            .value(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Relu, vec![a.0], shape, v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v: Vec<S> = self.value(a).iter().map(|&x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Exp, vec![a.0], shape, v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v: Vec<S> = self.value(a).iter().map(|&x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::Log, vec![a.0], shape, v)
    }

    /// Batched matrix product. `a` is `[..batch, m, k]`; `b` is either
    /// `[..batch, k, n]` (same leading dims) or a shared `[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let rhs_shared = sb.len() == 2 && sa.len() > 2;
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let b_batch: usize = sb[..sb.len() - 2].iter().product();
        if kb != k || (!rhs_shared && (sb[..sb.len() - 2] != sa[..sa.len() - 2] || b_batch != batch))
        {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = vec![S::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let ap = av[i * m * k..].as_ptr();
                let bp = if rhs_shared {
                    bv.as_ptr()
                } else {
                    bv[i * k * n..].as_ptr()
                };
                let cp = out[i * m * n..].as_mut_ptr();
                unsafe {
                    S::gemm(
                        m,
                        k,
                        n,
                        S::one(),
                        ap,
                        k as isize,
                        1,
                        bp,
                        n as isize,
                        1,
                        S::zero(),
                        cp,
                        n as isize,
                        1,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push(
            Op::Matmul {
                batch,
                m,
                k,
                n,
                rhs_shared,
            },
            vec![a.0, b.0],
            shape,
            out,
        ))
    }

    /// Swaps two axes.
    pub fn swap_axes(&mut self, a: NodeId, ax0: usize, ax1: usize) -> DiffResult<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(DiffError::Invalid {
                op: "swap_axes",
                msg: format!("axes ({ax0}, {ax1}) out of range for shape {shape:?}"),
            });
        }
        let mut out_shape = shape.clone();
        out_shape.swap(ax0, ax1);
        let v = swap_copy(self.value(a), &shape, ax0, ax1);
        Ok(self.push(Op::Swap { ax0, ax1 }, vec![a.0], out_shape, v))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> DiffResult<NodeId> {
        let numel: usize = self.nodes[a.0].shape.iter().product();
        if shape.iter().product::<usize>() != numel {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: self.nodes[a.0].shape.clone(),
                right: shape,
            });
        }
        let v = self.value(a).to_vec();
        Ok(self.push(Op::Reshape, vec![a.0], shape, v))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> DiffResult<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {first:?}"),
            });
        }
        let mut total_axis = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.clone(),
                });
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = lanes(&shape, axis);
        let mut out = vec![S::zero(); outer * total_axis * inner];
        let mut offset = 0;
        for p in parts {
            let li = self.nodes[p.0].shape[axis];
            let pv = self.value(p.0.into_node_id());
            for o in 0..outer {
                let src = &pv[o * li * inner..(o + 1) * li * inner];
                let dst_start = (o * total_axis + offset) * inner;
                out[dst_start..dst_start + li * inner].copy_from_slice(src);
            }
            offset += li;
        }
        Ok(self.push(
            Op::Concat { axis },
            parts.iter().map(|p| p.0).collect(),
            shape,
            out,
        ))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> DiffResult<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DiffError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, l, inner) = lanes(&shape, axis);
        let mut out = vec![S::zero(); outer * len * inner];
        {
            let av = self.value(a);
            for o in 0..outer {
                let src_start = (o * l + start) * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&av[src_start..src_start + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(Op::Slice { axis, start }, vec![a.0], out_shape, out))
    }

    /// Tiles `a` along a new leading axis.
    pub fn broadcast0(&mut self, a: NodeId, copies: usize) -> NodeId {
        let base = self.nodes[a.0].shape.clone();
        let av = self.value(a).to_vec();
        let mut out = Vec::with_capacity(av.len() * copies);
        for _ in 0..copies {
            out.extend_from_slice(&av);
        }
        let mut shape = vec![copies];
        shape.extend_from_slice(&base);
        self.push(Op::Broadcast0 { copies }, vec![a.0], shape, out)
    }

    /// Adds a `[d]` row vector to every row of `a = [.., d]`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> DiffResult<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let sr = self.nodes[row.0].shape.clone();
        let d = *sa.last().unwrap_or(&0);
        if sr.len() != 1 || sr[0] != d {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let rv = self.value(row).to_vec();
        let v: Vec<S> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + rv[i % d])
            .collect();
        Ok(self.push(Op::AddRow, vec![a.0, row.0], sa, v))
    }

    /// Replaces rows of `a = [.., d]` selected by `mask` (length = row count)
    /// with the learned row vector `token = [d]`.
    pub fn fill_rows(&mut self, a: NodeId, mask: &[bool], token: NodeId) -> DiffResult<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let st = self.nodes[token.0].shape.clone();
        let d = *sa.last().unwrap_or(&0);
        let rows: usize = sa[..sa.len().saturating_sub(1)].iter().product();
        if st.len() != 1 || st[0] != d {
            return Err(DiffError::ShapeMismatch {
                op: "fill_rows",
                left: sa,
                right: st,
            });
        }
        if mask.len() != rows {
            return Err(DiffError::Invalid {
                op: "fill_rows",
                msg: format!("mask length {} != row count {rows}", mask.len()),
            });
        }
        let tv = self.value(token).to_vec();
        let mut v = self.value(a).to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                v[r * d..(r + 1) * d].copy_from_slice(&tv);
            }
        }
        Ok(self.push(
            Op::FillRows {
                mask: mask.to_vec(),
            },
            vec![a.0, token.0],
            sa,
            v,
        ))
    }

    /// Expands a learned table `[heads, 2*total-1]` of per-offset biases into
    /// `[heads, tq, tk]` where entry (h, i, j) is the bias for offset `j - i`.
    pub fn rel_bias(&mut self, table: NodeId, tq: usize, tk: usize) -> DiffResult<NodeId> {
        let st = self.nodes[table.0].shape.clone();
        if st.len() != 2 || st[1] % 2 != 1 {
            return Err(DiffError::Invalid {
                op: "rel_bias",
                msg: format!("table must be [heads, 2*T-1], got {st:?}"),
            });
        }
        let heads = st[0];
        let total = (st[1] + 1) / 2;
        if tq > total || tk > total {
            return Err(DiffError::Invalid {
                op: "rel_bias",
                msg: format!("tq={tq}/tk={tk} exceed table range T={total}"),
            });
        }
        let tv = self.value(table);
        let mut out = vec![S::zero(); heads * tq * tk];
        for h in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    let off = (j as isize - i as isize) + (total as isize - 1);
                    out[(h * tq + i) * tk + j] = tv[h * (2 * total - 1) + off as usize];
                }
            }
        }
        Ok(self.push(
            Op::RelBias { total, tq, tk },
            vec![table.0],
            vec![heads, tq, tk],
            out,
        ))
    }

    /// Softmax along `axis` over entries with `mask == true`; masked entries
    /// are excluded (as if -inf pre-softmax) and all-masked lanes yield zeros.
    pub fn masked_softmax(&mut self, a: NodeId, axis: usize, mask: &[bool]) -> DiffResult<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(DiffError::Invalid {
                op: "masked_softmax",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        if mask.len() != self.value(a).len() {
            return Err(DiffError::Invalid {
                op: "masked_softmax",
                msg: format!("mask length {} != numel {}", mask.len(), self.value(a).len()),
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let mut out = vec![S::zero(); outer * len * inner];
        {
            let av = self.value(a);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut mx = S::neg_infinity();
                    let mut any = false;
                    for j in 0..len {
                        if mask[at(j)] {
                            any = true;
                            if av[at(j)] > mx {
                                mx = av[at(j)];
                            }
                        }
                    }
                    if !any {
                        continue;
                    }
                    let mut denom = 0.0_f64;
                    for j in 0..len {
                        if mask[at(j)] {
                            let e = (av[at(j)] - mx).exp();
                            out[at(j)] = e;
                            denom += e.wide();
                        }
                    }
                    let inv = S::of(1.0 / denom);
                    for j in 0..len {
                        if mask[at(j)] {
                            out[at(j)] = out[at(j)] * inv;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::MaskedSoftmax {
                axis,
                mask: mask.to_vec(),
            },
            vec![a.0],
            shape,
            out,
        ))
    }

    /// Softmax over all entries of the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> DiffResult<NodeId> {
        let numel = self.value(a).len();
        let axis = self.nodes[a.0].shape.len().saturating_sub(1);
        let mask = vec![true; numel];
        self.masked_softmax(a, axis, &mask)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, a: NodeId, scale: NodeId, shift: NodeId) -> DiffResult<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let d = *shape.last().ok_or(DiffError::Invalid {
            op: "layer_norm",
            msg: "input must have at least one axis".into(),
        })?;
        for (nm, id) in [("scale", scale), ("shift", shift)] {
            let s = &self.nodes[id.0].shape;
            if s.len() != 1 || s[0] != d {
                return Err(DiffError::ShapeMismatch {
                    op: if nm == "scale" {
                        "layer_norm scale"
                    } else {
                        "layer_norm shift"
                    },
                    left: shape.clone(),
                    right: s.clone(),
                });
            }
        }
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let eps = 1e-5_f64;
        let mut mean = vec![S::zero(); rows];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * d];
        {
            let av = self.value(a);
            let sv = self.value(scale).to_vec();
            let bv = self.value(shift).to_vec();
            for r in 0..rows {
                let row = &av[r * d..(r + 1) * d];
                let mu = row.iter().map(|v| v.wide()).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|v| {
                        let c = v.wide() - mu;
                        c * c
                    })
                    .sum::<f64>()
                    / d as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[r] = S::of(mu);
                rstd[r] = S::of(rs);
                for j in 0..d {
                    let xhat = (row[j] - mean[r]) * rstd[r];
                    out[r * d + j] = xhat * sv[j] + bv[j];
                }
            }
        }
        Ok(self.push(
            Op::LayerNorm { mean, rstd },
            vec![a.0, scale.0, shift.0],
            shape,
            out,
        ))
    }

    /// Max over `axis` restricted to `mask == true` entries.
    /// Lanes with no valid entry yield zero and receive no gradient.
    pub fn masked_max_pool(&mut self, a: NodeId, axis: usize, mask: &[bool]) -> DiffResult<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(DiffError::Invalid {
                op: "masked_max_pool",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        if mask.len() != self.value(a).len() {
            return Err(DiffError::Invalid {
                op: "masked_max_pool",
                msg: format!("mask length {} != numel {}", mask.len(), self.value(a).len()),
            });
        }
        let (outer, len, inner) = lanes(&shape, axis);
        let mut out = vec![S::zero(); outer * inner];
        let mut argmax = vec![usize::MAX; outer * inner];
        {
            let av = self.value(a);
            for o in 0..outer {
                for i in 0..inner {
                    let mut best: Option<(usize, S)> = None;
                    for j in 0..len {
                        let idx = (o * len + j) * inner + i;
                        if mask[idx] && best.map_or(true, |(_, bv)| av[idx] > bv) {
                            best = Some((idx, av[idx]));
                        }
                    }
                    if let Some((idx, bv)) = best {
                        out[o * inner + i] = bv;
                        argmax[o * inner + i] = idx;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(
            Op::MaskedMaxPool {
                axis,
                mask: mask.to_vec(),
                argmax,
            },
            vec![a.0],
            out_shape,
            out,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).iter().map(|v| v.wide()).sum();
        self.push(Op::SumAll, vec![a.0], vec![], vec![S::of(s)])
    }

    /// Mean absolute error between two same-shape tensors.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> DiffResult<NodeId> {
        self.check_same_shape("l1_loss", a, b)?;
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y).wide().abs())
            .sum();
        let v = S::of(s / n as f64);
        Ok(self.push(Op::L1Loss, vec![a.0, b.0], vec![], vec![v]))
    }

    /// Mean squared error over entries with `mask == true` against constant
    /// targets. Caller must ensure at least one valid entry.
    pub fn masked_mse(&mut self, pred: NodeId, target: &[S], mask: &[bool]) -> DiffResult<NodeId> {
        let n = self.value(pred).len();
        if target.len() != n || mask.len() != n {
            return Err(DiffError::Invalid {
                op: "masked_mse",
                msg: format!(
                    "pred numel {n} vs target {} / mask {}",
                    target.len(),
                    mask.len()
                ),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DiffError::Invalid {
                op: "masked_mse",
                msg: "no valid entries".into(),
            });
        }
        let mut s = 0.0_f64;
        {
            let pv = self.value(pred);
            for i in 0..n {
                if mask[i] {
                    let d = (pv[i] - target[i]).wide();
                    s += d * d;
                }
            }
        }
        let v = S::of(s / count as f64);
        Ok(self.push(
            Op::MaskedMse {
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            vec![pred.0],
            vec![],
            vec![v],
        ))
    }

    /// Sum-form binary cross-entropy on probabilities with 0/1 targets.
    /// Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    pub fn bce_sum(&mut self, probs: NodeId, target: &[S]) -> DiffResult<NodeId> {
        let n = self.value(probs).len();
        if target.len() != n {
            return Err(DiffError::Invalid {
                op: "bce_sum",
                msg: format!("probs numel {n} vs target {}", target.len()),
            });
        }
        let (lo, hi) = (1e-7_f64, 1.0 - 1e-7_f64);
        let mut s = 0.0_f64;
        {
            let pv = self.value(probs);
            for i in 0..n {
                let p = pv[i].wide().clamp(lo, hi);
                let y = target[i].wide();
                s -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        Ok(self.push(
            Op::BceSum {
                target: target.to_vec(),
                lo,
                hi,
            },
            vec![probs.0],
            vec![],
            vec![S::of(s)],
        ))
    }

    /// Reverse-mode sweep from a scalar root. Gradients accumulate (`+=`)
    /// into per-node buffers readable via [`Graph::grad`].
    pub fn backward(&mut self, root: NodeId) -> DiffResult<()> {
        if self.nodes[root.0].shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for id in (0..=root.0).rev() {
            let gout = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &gout);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    /// Extracts accumulated parameter gradients, consuming the graph.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<S>)> {
        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = self.grads.get_mut(idx).and_then(Option::take) {
                    out.push((pid, g));
                }
            }
        }
        out
    }

    fn backprop_node(&mut self, id: usize, gout: &[S]) {
        // Split borrows: values come from nodes/store, gradients go to grads.
        let nodes = &self.nodes;
        let store = self.store;
        let grads = &mut self.grads;
        let mut add_to = |target: usize, f: &mut dyn FnMut(&mut [S])| {
            if !nodes[target].needs_grad {
                return;
            }
            let numel: usize = nodes[target].shape.iter().product();
            let buf = grads[target].get_or_insert_with(|| vec![S::zero(); numel]);
            f(buf);
        };
        let node = &nodes[id];
        let inp = |k: usize| node.inputs[k];
        let val = |nid: usize| value_of(nodes, store, nid);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add => {
                add_to(inp(0), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
                add_to(inp(1), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
            }
            Op::Sub => {
                add_to(inp(0), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
                add_to(inp(1), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b -= g;
                    }
                });
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                add_to(a, &mut |buf| {
                    let bv = val(b);
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * bv[i];
                    }
                });
                add_to(b, &mut |buf| {
                    let av = val(a);
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * av[i];
                    }
                });
            }
            Op::AddScalar => {
                add_to(inp(0), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
            }
            Op::MulScalar(c) => {
                let c = *c;
                add_to(inp(0), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g * c;
                    }
                });
            }
            Op::Relu => {
                let a = inp(0);
                add_to(a, &mut |buf| {
                    let av = val(a);
                    for i in 0..buf.len() {
                        if av[i] > S::zero() {
                            buf[i] += gout[i];
                        }
                    }
                });
            }
            Op::Exp => {
                let out = val(id).to_vec();
                add_to(inp(0), &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += gout[i] * out[i];
                    }
                });
            }
            Op::Log => {
                let a = inp(0);
                add_to(a, &mut |buf| {
                    let av = val(a);
                    for i in 0..buf.len() {
                        buf[i] += gout[i] / av[i];
                    }
                });
            }
            Op::Matmul {
                batch,
                m,
                k,
                n,
                rhs_shared,
            } => {
                let (batch, m, k, n, rhs_shared) = (*batch, *m, *k, *n, *rhs_shared);
                let (a, b) = (inp(0), inp(1));
                add_to(a, &mut |buf| {
                    let bv = val(b);
                    for i in 0..batch {
                        let gp = gout[i * m * n..].as_ptr();
                        let bp = if rhs_shared {
                            bv.as_ptr()
                        } else {
                            bv[i * k * n..].as_ptr()
                        };
                        let dp = buf[i * m * k..].as_mut_ptr();
                        // dA += G @ B^T
                        unsafe {
                            S::gemm(
                                m,
                                n,
                                k,
                                S::one(),
                                gp,
                                n as isize,
                                1,
                                bp,
                                1,
                                n as isize,
                                S::one(),
                                dp,
                                k as isize,
                                1,
                            );
                        }
                    }
                });
                add_to(b, &mut |buf| {
                    let av = val(a);
                    for i in 0..batch {
                        let ap = av[i * m * k..].as_ptr();
                        let gp = gout[i * m * n..].as_ptr();
                        let dp = if rhs_shared {
                            buf.as_mut_ptr()
                        } else {
                            buf[i * k * n..].as_mut_ptr()
                        };
                        // dB += A^T @ G
                        unsafe {
                            S::gemm(
                                k,
                                m,
                                n,
                                S::one(),
                                ap,
                                1,
                                k as isize,
                                gp,
                                n as isize,
                                1,
                                S::one(),
                                dp,
                                n as isize,
                                1,
                            );
                        }
                    }
                });
            }
            Op::Swap { ax0, ax1 } => {
                let (ax0, ax1) = (*ax0, *ax1);
                let out_shape = node.shape.clone();
                add_to(inp(0), &mut |buf| {
                    let back = swap_copy(gout, &out_shape, ax0, ax1);
                    for (b, g) in buf.iter_mut().zip(back) {
                        *b += g;
                    }
                });
            }
            Op::Reshape => {
                add_to(inp(0), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
            }
            Op::Concat { axis } => {
                let axis = *axis;
                let (outer, total, inner) = lanes(&node.shape, axis);
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let part = node.inputs[k];
                    let li = nodes[part].shape[axis];
                    let off = offset;
                    add_to(part, &mut |buf| {
                        for o in 0..outer {
                            let src_start = (o * total + off) * inner;
                            let dst = &mut buf[o * li * inner..(o + 1) * li * inner];
                            for (b, &g) in dst.iter_mut().zip(&gout[src_start..src_start + li * inner])
                            {
                                *b += g;
                            }
                        }
                    });
                    offset += li;
                }
            }
            Op::Slice { axis, start } => {
                let (axis, start) = (*axis, *start);
                let a = inp(0);
                let in_shape = nodes[a].shape.clone();
                let (outer, l, inner) = lanes(&in_shape, axis);
                let len = node.shape[axis];
                add_to(a, &mut |buf| {
                    for o in 0..outer {
                        let dst_start = (o * l + start) * inner;
                        for (i, &g) in gout[o * len * inner..(o + 1) * len * inner].iter().enumerate()
                        {
                            buf[dst_start + i] += g;
                        }
                    }
                });
            }
            Op::Broadcast0 { copies } => {
                let copies = *copies;
                let base = gout.len() / copies.max(1);
                add_to(inp(0), &mut |buf| {
                    for c in 0..copies {
                        for i in 0..base {
                            buf[i] += gout[c * base + i];
                        }
                    }
                });
            }
            Op::AddRow => {
                let d = *node.shape.last().unwrap();
                add_to(inp(0), &mut |buf| {
                    for (b, &g) in buf.iter_mut().zip(gout) {
                        *b += g;
                    }
                });
                add_to(inp(1), &mut |buf| {
                    for (i, &g) in gout.iter().enumerate() {
                        buf[i % d] += g;
                    }
                });
            }
            Op::FillRows { mask } => {
                let d = *node.shape.last().unwrap();
                add_to(inp(0), &mut |buf| {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in 0..d {
                                buf[r * d + j] += gout[r * d + j];
                            }
                        }
                    }
                });
                add_to(inp(1), &mut |buf| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                buf[j] += gout[r * d + j];
                            }
                        }
                    }
                });
            }
            Op::RelBias { total, tq, tk } => {
                let (total, tq, tk) = (*total, *tq, *tk);
                let heads = node.shape[0];
                add_to(inp(0), &mut |buf| {
                    for h in 0..heads {
                        for i in 0..tq {
                            for j in 0..tk {
                                let off = (j as isize - i as isize) + (total as isize - 1);
                                buf[h * (2 * total - 1) + off as usize] +=
                                    gout[(h * tq + i) * tk + j];
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax { axis, mask } => {
                let (outer, len, inner) = lanes(&node.shape, *axis);
                let out = val(id).to_vec();
                add_to(inp(0), &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = 0.0_f64;
                            for j in 0..len {
                                if mask[at(j)] {
                                    dot += (gout[at(j)] * out[at(j)]).wide();
                                }
                            }
                            let dot = S::of(dot);
                            for j in 0..len {
                                if mask[at(j)] {
                                    buf[at(j)] += out[at(j)] * (gout[at(j)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { mean, rstd } => {
                let d = *node.shape.last().unwrap();
                let rows = mean.len();
                let (x, scale, shift) = (inp(0), inp(1), inp(2));
                add_to(x, &mut |buf| {
                    let xv = val(x);
                    let sv = val(scale);
                    for r in 0..rows {
                        let mut sum_dxhat = 0.0_f64;
                        let mut sum_dxhat_xhat = 0.0_f64;
                        for j in 0..d {
                            let xhat = ((xv[r * d + j] - mean[r]) * rstd[r]).wide();
                            let dxhat = (gout[r * d + j] * sv[j]).wide();
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / d as f64;
                        let m2 = sum_dxhat_xhat / d as f64;
                        for j in 0..d {
                            let xhat = ((xv[r * d + j] - mean[r]) * rstd[r]).wide();
                            let dxhat = (gout[r * d + j] * sv[j]).wide();
                            buf[r * d + j] += S::of(rstd[r].wide() * (dxhat - m1 - xhat * m2));
                        }
                    }
                });
                add_to(scale, &mut |buf| {
                    let xv = val(x);
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                            buf[j] += gout[r * d + j] * xhat;
                        }
                    }
                });
                add_to(shift, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += gout[r * d + j];
                        }
                    }
                });
            }
            Op::MaskedMaxPool { argmax, .. } => {
                add_to(inp(0), &mut |buf| {
                    for (oi, &idx) in argmax.iter().enumerate() {
                        if idx != usize::MAX {
                            buf[idx] += gout[oi];
                        }
                    }
                });
            }
            Op::SumAll => {
                let g = gout[0];
                add_to(inp(0), &mut |buf| {
                    for b in buf.iter_mut() {
                        *b += g;
                    }
                });
            }
            Op::L1Loss => {
                let (a, b) = (inp(0), inp(1));
                let n = nodes[a].shape.iter().product::<usize>();
                let scale = gout[0] / S::of(n as f64);
                add_to(a, &mut |buf| {
                    let av = val(a);
                    let bv = val(b);
                    for i in 0..buf.len() {
                        let d = av[i] - bv[i];
                        let sgn = if d > S::zero() {
                            S::one()
                        } else if d < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        };
                        buf[i] += scale * sgn;
                    }
                });
                add_to(b, &mut |buf| {
                    let av = val(a);
                    let bv = val(b);
                    for i in 0..buf.len() {
                        let d = av[i] - bv[i];
                        let sgn = if d > S::zero() {
                            S::one()
                        } else if d < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        };
                        buf[i] -= scale * sgn;
                    }
                });
            }
            Op::MaskedMse {
                target,
                mask,
                count,
            } => {
                let p = inp(0);
                let scale = gout[0] * S::of(2.0 / *count as f64);
                add_to(p, &mut |buf| {
                    let pv = val(p);
                    for i in 0..buf.len() {
                        if mask[i] {
                            buf[i] += scale * (pv[i] - target[i]);
                        }
                    }
                });
            }
            Op::BceSum { target, lo, hi } => {
                let p = inp(0);
                let (lo, hi) = (*lo, *hi);
                let g = gout[0].wide();
                add_to(p, &mut |buf| {
                    let pv = val(p);
                    for i in 0..buf.len() {
                        let praw = pv[i].wide();
                        if praw < lo || praw > hi {
                            continue; // clamp region: zero gradient
                        }
                        let y = target[i].wide();
                        let d = -y / praw + (1.0 - y) / (1.0 - praw);
                        buf[i] += S::of(g * d);
                    }
                });
            }
        }
    }
}

fn swap_copy<S: Scalar>(data: &[S], in_shape: &[usize], ax0: usize, ax1: usize) -> Vec<S> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let in_strides = row_major_strides(in_shape);
    let mut out_shape = in_shape.to_vec();
    out_shape.swap(ax0, ax1);
    let out_strides = row_major_strides(&out_shape);
    let n = data.len();
    let nd = in_shape.len();
    let mut out = vec![S::zero(); n];
    let mut idx = vec![0usize; nd];
    for (flat_out, slot) in out.iter_mut().enumerate() {
        // decompose flat_out into out multi-index
        let mut rem = flat_out;
        for (d, stride) in out_strides.iter().enumerate() {
            idx[d] = rem / stride;
            rem %= stride;
        }
        idx.swap(ax0, ax1);
        let mut flat_in = 0;
        for d in 0..nd {
            flat_in += idx[d] * in_strides[d];
        }
        *slot = data[flat_in];
    }
    out
}

trait IntoNodeId {
    fn into_node_id(self) -> NodeId;
}

impl IntoNodeId for usize {
    fn into_node_id(self) -> NodeId {
        NodeId(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data)
    }

    #[test]
    fn softmax_uniform_row() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(&t(&[4], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.softmax_last(x).unwrap();
        let v = g.value(y);
        for &p in v {
            assert!((p - 0.25).abs() < 1e-12);
        }
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_row_is_zero_with_zero_grad() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let mask = vec![true, true, true, false, false, false];
        let y = g.masked_softmax(x, 1, &mask).unwrap();
        assert_eq!(&g.value(y)[3..], &[0.0, 0.0, 0.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(&gx[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_statistics() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(vec![3, 8], (0..24).map(|i| (i as f64).sin() * 3.0).collect());
        let scale = g.input(vec![8], vec![1.0; 8]);
        let shift = g.input(vec![8], vec![0.0; 8]);
        let y = g.layer_norm(x, scale, shift).unwrap();
        let v = g.value(y);
        for r in 0..3 {
            let row = &v[r * 8..(r + 1) * 8];
            let mu: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-6, "row mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn max_pool_single_valid_routes_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(&t(&[1, 4], &[9.0, 7.0, 3.0, 5.0]).with_grad());
        let mask = vec![false, false, true, false];
        let y = g.masked_max_pool(x, 1, &mask).unwrap();
        assert_eq!(g.value(y), &[3.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(vec![2, 3], vec![0.0; 6]);
        let b = g.input(vec![4, 2], vec![0.0; 8]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_requires_scalar_root() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(vec![2], vec![1.0, 2.0]);
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarRoot(_)));
    }

    #[test]
    fn swap_axes_roundtrip() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(vec![2, 3, 4], (0..24).map(|i| i as f64).collect());
        let b = g.swap_axes(a, 0, 2).unwrap();
        assert_eq!(g.shape(b), &[4, 3, 2]);
        let c = g.swap_axes(b, 0, 2).unwrap();
        assert_eq!(g.value(a), g.value(c));
    }

    #[test]
    fn matmul_batched_matches_per_matrix() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect());
        let b = g.input(vec![2, 3, 2], (0..12).map(|i| (i as f64).cos()).collect());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        // check one element by hand: batch 1, row 1, col 0
        let av = g.value(a).to_vec();
        let bv = g.value(b).to_vec();
        let expect: f64 = (0..3).map(|k| av[6 + 3 + k] * bv[6 + 2 * k]).sum();
        assert!((g.value(c)[6] - expect).abs() < 1e-12);
    }

    #[test]
    fn rel_bias_table_layout() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        // 1 head, T = 3 -> table of 5 offsets [-2, -1, 0, 1, 2]
        let table = g.input(vec![1, 5], vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        let b = g.rel_bias(table, 3, 3).unwrap();
        let v = g.value(b);
        // entry (i, j) = offset j - i
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(v[i * 3 + j], j as f64 - i as f64);
            }
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let p = g.input(vec![2], vec![0.5, 0.5]);
        let l = g.bce_sum(p, &[1.0, 0.0]).unwrap();
        assert!((g.scalar_value(l) - 2.0 * 0.5_f64.ln().abs()).abs() < 1e-12);
    }
}
