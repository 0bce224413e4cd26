//! Reverse-mode autodiff over an eagerly evaluated tape.
//!
//! Ops are batched: matrix multiplies collapse leading dims, attention
//! ops act on [batch, tokens, width] blocks but only ever query one
//! token row (the model reads only the global token's output, which cuts
//! attention cost from O(T^2) to O(T)). Parallel kernels split work by
//! output row with sequential inner accumulation, so results are
//! bitwise identical for any thread count.

use rayon::prelude::*;

use super::tensor::{NnError, Tensor};

/// Row-parallel kernels kick in above this flop-ish count.
const PAR_WORK: usize = 1 << 16;

/// Norms at or below this are refused by l2 normalization.
pub const EPS_NORM: f64 = 1e-12;

const EPS_LAYERNORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// How one input contributes tokens to an assembled sequence.
#[derive(Debug, Clone, Copy)]
pub enum SeqPart {
    /// A single [D] vector repeated for every batch element (global token).
    Broadcast,
    /// A [B, D] tensor contributing one token per batch element.
    Row,
    /// A [B*n, D] tensor contributing n tokens per batch element.
    Block(usize),
}

enum Op {
    Leaf,
    /// a: [..., c] x b: [c, d] -> [..., d]
    Matmul { a: NodeId, b: NodeId },
    /// a: [r, d] x b: [e, d] transposed -> [r, e]
    MatmulNT { a: NodeId, b: NodeId },
    /// x: [..., c] + b: [c]
    AddBias { x: NodeId, b: NodeId },
    Relu { x: NodeId },
    /// q: [B, dk], k: [B, T, dk] -> [B, T]; scores scaled by `scale`.
    AttendScores { q: NodeId, k: NodeId, scale: f64 },
    /// Row softmax over [.., T]; mask entries of 0.0 get weight 0.
    MaskedSoftmax { x: NodeId },
    /// p: [B, T], v: [B, T, dv] -> [B, dv]
    AttendMix { p: NodeId, v: NodeId },
    /// Stack parts into [B, T, D].
    AssembleSeq { parts: Vec<(NodeId, SeqPart)>, batch: usize },
    /// x: [B, T, D] -> [B, D] at token `row`.
    TokenRow { x: NodeId, row: usize },
    /// Rank-2 inputs with equal row counts -> [R, sum of cols].
    ConcatCols { xs: Vec<NodeId> },
    L2NormRows { x: NodeId },
    LayerNormRows { x: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Non-differentiable constants added per row or per column.
    AddRowConst { x: NodeId },
    AddColConst { x: NodeId },
    /// Elementwise multiply by a constant mask (dropout, validity).
    MulMask { x: NodeId, mask: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Per-row dot products: [B, d] x [B, d] -> [B, 1].
    RowDots { a: NodeId, b: NodeId },
    /// Cross-entropy per row of [B, C] against integer targets -> [B].
    CeRows { x: NodeId, targets: Vec<usize> },
    /// Mean over all elements -> [1].
    Mean { x: NodeId },
}

struct Node {
    op: Op,
    dims: Vec<usize>,
    value: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// None when the node does not influence the differentiated root.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, dims: Vec<usize>, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, dims, value });
        NodeId(self.nodes.len() - 1)
    }

    fn rows(&self, id: NodeId) -> usize {
        let d = &self.nodes[id.0].dims;
        d[..d.len() - 1].iter().product()
    }

    fn cols(&self, id: NodeId) -> usize {
        *self.nodes[id.0].dims.last().expect("rank >= 1")
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.dims, t.data)
    }

    pub fn leaf_slice(&mut self, dims: &[usize], data: &[f64]) -> NodeId {
        assert_eq!(dims.iter().product::<usize>(), data.len());
        self.push(Op::Leaf, dims.to_vec(), data.to_vec())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = (self.rows(a), self.cols(a));
        let (bc, d) = (self.rows(b), self.cols(b));
        assert_eq!(c, bc, "matmul inner dims {c} vs {bc}");
        assert_eq!(self.nodes[b.0].dims.len(), 2, "matmul rhs must be rank 2");
        let value = matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, r, c, d);
        let mut dims = self.nodes[a.0].dims.clone();
        *dims.last_mut().unwrap() = d;
        self.push(Op::Matmul { a, b }, dims, value)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, d) = (self.rows(a), self.cols(a));
        let (e, bd) = (self.rows(b), self.cols(b));
        assert_eq!(d, bd, "matmul_nt inner dims {d} vs {bd}");
        let value = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value, r, d, e);
        self.push(Op::MatmulNT { a, b }, vec![r, e], value)
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let c = self.cols(x);
        assert_eq!(self.nodes[b.0].value.len(), c, "bias width");
        let bias = &self.nodes[b.0].value;
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::AddBias { x, b }, dims, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::Relu { x }, dims, value)
    }

    pub fn attend_scores(&mut self, q: NodeId, k: NodeId, scale: f64) -> NodeId {
        let qd = self.nodes[q.0].dims.clone();
        let kd = self.nodes[k.0].dims.clone();
        assert_eq!(qd.len(), 2, "q must be [B, dk]");
        assert_eq!(kd.len(), 3, "k must be [B, T, dk]");
        assert_eq!(qd[0], kd[0], "batch");
        assert_eq!(qd[1], kd[2], "head width");
        let (b, t, dk) = (kd[0], kd[1], kd[2]);
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let mut value = vec![0.0; b * t];
        for bi in 0..b {
            let qrow = &qv[bi * dk..(bi + 1) * dk];
            for ti in 0..t {
                let krow = &kv[(bi * t + ti) * dk..(bi * t + ti + 1) * dk];
                value[bi * t + ti] = scale * dot(qrow, krow);
            }
        }
        self.push(Op::AttendScores { q, k, scale }, vec![b, t], value)
    }

    /// Mask length must equal x's length; entries are 1.0 (keep) or 0.0
    /// (exclude). Errors if any row has no kept entry.
    pub fn masked_softmax(
        &mut self,
        x: NodeId,
        mask: Option<Vec<f64>>,
    ) -> Result<NodeId, NnError> {
        let (r, c) = (self.rows(x), self.cols(x));
        if let Some(m) = &mask {
            assert_eq!(m.len(), r * c, "mask length");
        }
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; r * c];
        for row in 0..r {
            let xs = &xv[row * c..(row + 1) * c];
            let ms = mask.as_ref().map(|m| &m[row * c..(row + 1) * c]);
            let keep = |j: usize| ms.map_or(true, |m| m[j] != 0.0);
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if keep(j) && xs[j] > max {
                    max = xs[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(NnError::FullyMasked);
            }
            let out = &mut value[row * c..(row + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if keep(j) {
                    out[j] = (xs[j] - max).exp();
                    sum += out[j];
                }
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        let dims = self.nodes[x.0].dims.clone();
        Ok(self.push(Op::MaskedSoftmax { x }, dims, value))
    }

    pub fn attend_mix(&mut self, p: NodeId, v: NodeId) -> NodeId {
        let pd = self.nodes[p.0].dims.clone();
        let vd = self.nodes[v.0].dims.clone();
        assert_eq!(pd.len(), 2, "p must be [B, T]");
        assert_eq!(vd.len(), 3, "v must be [B, T, dv]");
        assert_eq!(pd[0], vd[0], "batch");
        assert_eq!(pd[1], vd[1], "token count");
        let (b, t, dv) = (vd[0], vd[1], vd[2]);
        let pv = &self.nodes[p.0].value;
        let vv = &self.nodes[v.0].value;
        let mut value = vec![0.0; b * dv];
        for bi in 0..b {
            let out = &mut value[bi * dv..(bi + 1) * dv];
            for ti in 0..t {
                let w = pv[bi * t + ti];
                if w != 0.0 {
                    let vrow = &vv[(bi * t + ti) * dv..(bi * t + ti + 1) * dv];
                    for (o, &x) in out.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push(Op::AttendMix { p, v }, vec![b, dv], value)
    }

    pub fn assemble_seq(&mut self, batch: usize, parts: Vec<(NodeId, SeqPart)>) -> NodeId {
        assert!(!parts.is_empty());
        let width = self.cols(parts[0].0);
        let mut tokens = 0usize;
        for &(id, part) in &parts {
            assert_eq!(self.cols(id), width, "token width");
            match part {
                SeqPart::Broadcast => {
                    assert_eq!(self.nodes[id.0].value.len(), width);
                    tokens += 1;
                }
                SeqPart::Row => {
                    assert_eq!(self.rows(id), batch);
                    tokens += 1;
                }
                SeqPart::Block(n) => {
                    assert_eq!(self.rows(id), batch * n);
                    tokens += n;
                }
            }
        }
        let mut value = vec![0.0; batch * tokens * width];
        let mut pos = 0usize;
        for &(id, part) in &parts {
            let src = &self.nodes[id.0].value;
            match part {
                SeqPart::Broadcast => {
                    for b in 0..batch {
                        let off = (b * tokens + pos) * width;
                        value[off..off + width].copy_from_slice(src);
                    }
                    pos += 1;
                }
                SeqPart::Row => {
                    for b in 0..batch {
                        let off = (b * tokens + pos) * width;
                        value[off..off + width].copy_from_slice(&src[b * width..(b + 1) * width]);
                    }
                    pos += 1;
                }
                SeqPart::Block(n) => {
                    for b in 0..batch {
                        for j in 0..n {
                            let off = (b * tokens + pos + j) * width;
                            let s = (b * n + j) * width;
                            value[off..off + width].copy_from_slice(&src[s..s + width]);
                        }
                    }
                    pos += n;
                }
            }
        }
        self.push(
            Op::AssembleSeq { parts, batch },
            vec![batch, tokens, width],
            value,
        )
    }

    pub fn token_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let d = self.nodes[x.0].dims.clone();
        assert_eq!(d.len(), 3, "token_row input must be [B, T, D]");
        let (b, t, w) = (d[0], d[1], d[2]);
        assert!(row < t);
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; b * w];
        for bi in 0..b {
            let off = (bi * t + row) * w;
            value[bi * w..(bi + 1) * w].copy_from_slice(&xv[off..off + w]);
        }
        self.push(Op::TokenRow { x, row }, vec![b, w], value)
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let r = self.rows(xs[0]);
        let total: usize = xs
            .iter()
            .map(|&id| {
                assert_eq!(self.nodes[id.0].dims.len(), 2, "concat_cols takes rank-2");
                assert_eq!(self.rows(id), r, "row counts");
                self.cols(id)
            })
            .sum();
        let mut value = vec![0.0; r * total];
        let mut off = 0usize;
        for &id in xs {
            let c = self.cols(id);
            let src = &self.nodes[id.0].value;
            for row in 0..r {
                value[row * total + off..row * total + off + c]
                    .copy_from_slice(&src[row * c..(row + 1) * c]);
            }
            off += c;
        }
        self.push(Op::ConcatCols { xs: xs.to_vec() }, vec![r, total], value)
    }

    pub fn l2_norm_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (r, c) = (self.rows(x), self.cols(x));
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; r * c];
        for row in 0..r {
            let xs = &xv[row * c..(row + 1) * c];
            let n = dot(xs, xs).sqrt();
            if n <= EPS_NORM {
                return Err(NnError::DegenerateEmbedding);
            }
            for (o, &v) in value[row * c..(row + 1) * c].iter_mut().zip(xs) {
                *o = v / n;
            }
        }
        let dims = self.nodes[x.0].dims.clone();
        Ok(self.push(Op::L2NormRows { x }, dims, value))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        let xv = &self.nodes[x.0].value;
        let mut value = vec![0.0; r * c];
        for row in 0..r {
            let xs = &xv[row * c..(row + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = (var + EPS_LAYERNORM).sqrt();
            for (o, &v) in value[row * c..(row + 1) * c].iter_mut().zip(xs) {
                *o = (v - mean) / s;
            }
        }
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::LayerNormRows { x }, dims, value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| v * c).collect();
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::Scale { x, c }, dims, value)
    }

    /// Adds v[r] to every element of row r. v is constant (no gradient).
    pub fn add_row_const(&mut self, x: NodeId, v: Vec<f64>) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(v.len(), r, "per-row constant length");
        let xv = &self.nodes[x.0].value;
        let value: Vec<f64> = (0..r * c).map(|i| xv[i] + v[i / c]).collect();
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::AddRowConst { x }, dims, value)
    }

    /// Adds v[j] to every element of column j. v is constant (no gradient).
    pub fn add_col_const(&mut self, x: NodeId, v: Vec<f64>) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(v.len(), c, "per-column constant length");
        let xv = &self.nodes[x.0].value;
        let value: Vec<f64> = (0..r * c).map(|i| xv[i] + v[i % c]).collect();
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::AddColConst { x }, dims, value)
    }

    pub fn mul_mask(&mut self, x: NodeId, mask: Vec<f64>) -> NodeId {
        assert_eq!(mask.len(), self.nodes[x.0].value.len(), "mask length");
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let dims = self.nodes[x.0].dims.clone();
        self.push(Op::MulMask { x, mask }, dims, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].dims, self.nodes[b.0].dims, "add dims");
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        self.push(Op::Add { a, b }, dims, value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].dims, self.nodes[b.0].dims, "mul dims");
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let dims = self.nodes[a.0].dims.clone();
        self.push(Op::Mul { a, b }, dims, value)
    }

    pub fn row_dots(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].dims, self.nodes[b.0].dims, "row_dots dims");
        let (r, c) = (self.rows(a), self.cols(a));
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value: Vec<f64> = (0..r)
            .map(|row| dot(&av[row * c..(row + 1) * c], &bv[row * c..(row + 1) * c]))
            .collect();
        self.push(Op::RowDots { a, b }, vec![r, 1], value)
    }

    /// Per-row cross entropy: logsumexp(row) - row[target].
    pub fn ce_rows(&mut self, x: NodeId, targets: Vec<usize>) -> NodeId {
        let (r, c) = (self.rows(x), self.cols(x));
        assert_eq!(targets.len(), r, "one target per row");
        let xv = &self.nodes[x.0].value;
        let value: Vec<f64> = (0..r)
            .map(|row| {
                let xs = &xv[row * c..(row + 1) * c];
                let t = targets[row];
                assert!(t < c, "target {t} out of {c}");
                logsumexp(xs) - xs[t]
            })
            .collect();
        self.push(Op::CeRows { x, targets }, vec![r], value)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].value.len();
        let m = self.nodes[x.0].value.iter().sum::<f64>() / n as f64;
        self.push(Op::Mean { x }, vec![1], vec![m])
    }

    /// Reverse pass from a scalar root. Nodes that do not reach the root
    /// keep a None gradient.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> &'a mut Vec<f64> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let d = self.cols(*b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = matmul_nt(g, bv, r, d, c);
                add_into(self.grad_buf(grads, *a), &da);
                let db = matmul_tn(av, g, r, c, d);
                add_into(self.grad_buf(grads, *b), &db);
            }
            Op::MatmulNT { a, b } => {
                let (r, d) = (self.rows(*a), self.cols(*a));
                let e = self.rows(*b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = matmul_nn(g, bv, r, e, d);
                add_into(self.grad_buf(grads, *a), &da);
                let db = matmul_tn(g, av, r, e, d);
                add_into(self.grad_buf(grads, *b), &db);
            }
            Op::AddBias { x, b } => {
                add_into(self.grad_buf(grads, *x), g);
                let c = self.cols(*x);
                let db = self.grad_buf(grads, *b);
                for (i, &gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
            }
            Op::Relu { x } => {
                let xv = &self.nodes[x.0].value;
                let dx = self.grad_buf(grads, *x);
                for (j, &gv) in g.iter().enumerate() {
                    if xv[j] > 0.0 {
                        dx[j] += gv;
                    }
                }
            }
            Op::AttendScores { q, k, scale } => {
                let kd = &self.nodes[k.0].dims;
                let (b, t, dk) = (kd[0], kd[1], kd[2]);
                let qv = self.nodes[q.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                {
                    let dq = self.grad_buf(grads, *q);
                    for bi in 0..b {
                        for ti in 0..t {
                            let gv = scale * g[bi * t + ti];
                            if gv != 0.0 {
                                let krow = &kv[(bi * t + ti) * dk..(bi * t + ti + 1) * dk];
                                for j in 0..dk {
                                    dq[bi * dk + j] += gv * krow[j];
                                }
                            }
                        }
                    }
                }
                let dkv = self.grad_buf(grads, *k);
                for bi in 0..b {
                    let qrow = &qv[bi * dk..(bi + 1) * dk];
                    for ti in 0..t {
                        let gv = scale * g[bi * t + ti];
                        if gv != 0.0 {
                            let off = (bi * t + ti) * dk;
                            for j in 0..dk {
                                dkv[off + j] += gv * qrow[j];
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let (r, c) = (self.rows(*x), self.cols(*x));
                let y = &self.nodes[i].value;
                let dx = self.grad_buf(grads, *x);
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let inner = dot(gs, ys);
                    for j in 0..c {
                        dx[row * c + j] += ys[j] * (gs[j] - inner);
                    }
                }
            }
            Op::AttendMix { p, v } => {
                let vd = &self.nodes[v.0].dims;
                let (b, t, dv) = (vd[0], vd[1], vd[2]);
                let pv = self.nodes[p.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                {
                    let dp = self.grad_buf(grads, *p);
                    for bi in 0..b {
                        let grow = &g[bi * dv..(bi + 1) * dv];
                        for ti in 0..t {
                            let vrow = &vv[(bi * t + ti) * dv..(bi * t + ti + 1) * dv];
                            dp[bi * t + ti] += dot(grow, vrow);
                        }
                    }
                }
                let dvv = self.grad_buf(grads, *v);
                for bi in 0..b {
                    let grow = &g[bi * dv..(bi + 1) * dv];
                    for ti in 0..t {
                        let w = pv[bi * t + ti];
                        if w != 0.0 {
                            let off = (bi * t + ti) * dv;
                            for j in 0..dv {
                                dvv[off + j] += w * grow[j];
                            }
                        }
                    }
                }
            }
            Op::AssembleSeq { parts, batch } => {
                let dims = &self.nodes[i].dims;
                let (tokens, width) = (dims[1], dims[2]);
                let mut pos = 0usize;
                for &(id, part) in parts {
                    match part {
                        SeqPart::Broadcast => {
                            let dst = self.grad_buf(grads, id);
                            for b in 0..*batch {
                                let off = (b * tokens + pos) * width;
                                add_into(dst, &g[off..off + width]);
                            }
                            pos += 1;
                        }
                        SeqPart::Row => {
                            let dst = self.grad_buf(grads, id);
                            for b in 0..*batch {
                                let off = (b * tokens + pos) * width;
                                dst[b * width..(b + 1) * width]
                                    .iter_mut()
                                    .zip(&g[off..off + width])
                                    .for_each(|(d, &s)| *d += s);
                            }
                            pos += 1;
                        }
                        SeqPart::Block(n) => {
                            let dst = self.grad_buf(grads, id);
                            for b in 0..*batch {
                                for j in 0..n {
                                    let off = (b * tokens + pos + j) * width;
                                    let s = (b * n + j) * width;
                                    dst[s..s + width]
                                        .iter_mut()
                                        .zip(&g[off..off + width])
                                        .for_each(|(d, &s)| *d += s);
                                }
                            }
                            pos += n;
                        }
                    }
                }
            }
            Op::TokenRow { x, row } => {
                let d = &self.nodes[x.0].dims;
                let (b, t, w) = (d[0], d[1], d[2]);
                let dx = self.grad_buf(grads, *x);
                for bi in 0..b {
                    let off = (bi * t + row) * w;
                    dx[off..off + w]
                        .iter_mut()
                        .zip(&g[bi * w..(bi + 1) * w])
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::ConcatCols { xs } => {
                let r = self.rows(xs[0]);
                let total = self.cols(NodeId(i));
                let mut off = 0usize;
                for &id in xs {
                    let c = self.cols(id);
                    let dst = self.grad_buf(grads, id);
                    for row in 0..r {
                        dst[row * c..(row + 1) * c]
                            .iter_mut()
                            .zip(&g[row * total + off..row * total + off + c])
                            .for_each(|(d, &s)| *d += s);
                    }
                    off += c;
                }
            }
            Op::L2NormRows { x } => {
                let (r, c) = (self.rows(*x), self.cols(*x));
                let xv = self.nodes[x.0].value.clone();
                let y = &self.nodes[i].value;
                let dx = self.grad_buf(grads, *x);
                for row in 0..r {
                    let xs = &xv[row * c..(row + 1) * c];
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let n = dot(xs, xs).sqrt();
                    let gy = dot(gs, ys);
                    for j in 0..c {
                        dx[row * c + j] += (gs[j] - ys[j] * gy) / n;
                    }
                }
            }
            Op::LayerNormRows { x } => {
                let (r, c) = (self.rows(*x), self.cols(*x));
                let xv = self.nodes[x.0].value.clone();
                let y = &self.nodes[i].value;
                let dx = self.grad_buf(grads, *x);
                for row in 0..r {
                    let xs = &xv[row * c..(row + 1) * c];
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let s = (var + EPS_LAYERNORM).sqrt();
                    let gm = gs.iter().sum::<f64>() / c as f64;
                    let gym = dot(gs, ys) / c as f64;
                    for j in 0..c {
                        dx[row * c + j] += (gs[j] - gm - ys[j] * gym) / s;
                    }
                }
            }
            Op::Scale { x, c } => {
                let dx = self.grad_buf(grads, *x);
                for (d, &s) in dx.iter_mut().zip(g) {
                    *d += c * s;
                }
            }
            Op::AddRowConst { x } | Op::AddColConst { x } => {
                add_into(self.grad_buf(grads, *x), g);
            }
            Op::MulMask { x, mask } => {
                let dx = self.grad_buf(grads, *x);
                for (j, (&gv, &m)) in g.iter().zip(mask).enumerate() {
                    dx[j] += gv * m;
                }
            }
            Op::Add { a, b } => {
                add_into(self.grad_buf(grads, *a), g);
                add_into(self.grad_buf(grads, *b), g);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = &self.nodes[b.0].value;
                {
                    let da = self.grad_buf(grads, *a);
                    for (j, &gv) in g.iter().enumerate() {
                        da[j] += gv * bv[j];
                    }
                }
                let db = self.grad_buf(grads, *b);
                for (j, &gv) in g.iter().enumerate() {
                    db[j] += gv * av[j];
                }
            }
            Op::RowDots { a, b } => {
                let (r, c) = (self.rows(*a), self.cols(*a));
                let av = self.nodes[a.0].value.clone();
                let bv = &self.nodes[b.0].value;
                {
                    let da = self.grad_buf(grads, *a);
                    for row in 0..r {
                        let gv = g[row];
                        for j in 0..c {
                            da[row * c + j] += gv * bv[row * c + j];
                        }
                    }
                }
                let db = self.grad_buf(grads, *b);
                for row in 0..r {
                    let gv = g[row];
                    for j in 0..c {
                        db[row * c + j] += gv * av[row * c + j];
                    }
                }
            }
            Op::CeRows { x, targets } => {
                let (r, c) = (self.rows(*x), self.cols(*x));
                let xv = self.nodes[x.0].value.clone();
                let dx = self.grad_buf(grads, *x);
                for row in 0..r {
                    let xs = &xv[row * c..(row + 1) * c];
                    let gv = g[row];
                    if gv == 0.0 {
                        continue;
                    }
                    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    let exps: Vec<f64> = xs.iter().map(|&v| {
                        let e = (v - max).exp();
                        sum += e;
                        e
                    }).collect();
                    for j in 0..c {
                        let soft = exps[j] / sum;
                        let ind = if j == targets[row] { 1.0 } else { 0.0 };
                        dx[row * c + j] += gv * (soft - ind);
                    }
                }
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.len() as f64;
                let gv = g[0] / n;
                let dx = self.grad_buf(grads, *x);
                for d in dx.iter_mut() {
                    *d += gv;
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// C[r, d] = A[r, c] x B[c, d]. Parallel over output rows; each row is a
/// sequential accumulation, so results do not depend on thread count.
fn matmul_nn(a: &[f64], b: &[f64], r: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * d];
    let body = |row: usize, orow: &mut [f64]| {
        let arow = &a[row * c..(row + 1) * c];
        for (k, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[k * d..(k + 1) * d];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if r * c * d >= PAR_WORK && r > 1 {
        out.par_chunks_mut(d)
            .enumerate()
            .for_each(|(row, orow)| body(row, orow));
    } else {
        for (row, orow) in out.chunks_mut(d).enumerate() {
            body(row, orow);
        }
    }
    out
}

/// C[r, e] = A[r, d] x B[e, d]^T: pairwise row dots.
fn matmul_nt(a: &[f64], b: &[f64], r: usize, d: usize, e: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * e];
    let body = |row: usize, orow: &mut [f64]| {
        let arow = &a[row * d..(row + 1) * d];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[j * d..(j + 1) * d]);
        }
    };
    if r * d * e >= PAR_WORK && r > 1 {
        out.par_chunks_mut(e)
            .enumerate()
            .for_each(|(row, orow)| body(row, orow));
    } else {
        for (row, orow) in out.chunks_mut(e).enumerate() {
            body(row, orow);
        }
    }
    out
}

/// C[c, d] = A[r, c]^T x B[r, d]. Parallel over C's rows (A's columns);
/// the inner sum over r runs sequentially per output row.
fn matmul_tn(a: &[f64], b: &[f64], r: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * d];
    let body = |k: usize, orow: &mut [f64]| {
        for row in 0..r {
            let av = a[row * c + k];
            if av != 0.0 {
                let brow = &b[row * d..(row + 1) * d];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if r * c * d >= PAR_WORK && c > 1 {
        out.par_chunks_mut(d)
            .enumerate()
            .for_each(|(k, orow)| body(k, orow));
    } else {
        for (k, orow) in out.chunks_mut(d).enumerate() {
            body(k, orow);
        }
    }
    out
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}
