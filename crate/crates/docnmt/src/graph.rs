//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records matrix operations as they execute; node creation
//! order is the topological order, so the backward pass is a single reverse
//! sweep that visits each node exactly once. Graphs are rebuilt per forward
//! pass and confined to one thread; node values are immutable once written.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::AttentionMask;
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a node inside one [`Graph`]. Not valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A·B
    Matmul(NodeId, NodeId),
    /// C = Aᵀ·B
    MatmulTA(NodeId, NodeId),
    /// C = A·Bᵀ
    MatmulTB(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x[D×L] + column vector b[D×1] broadcast over columns
    AddBias(NodeId, NodeId),
    /// Elementwise product
    Mul(NodeId, NodeId),
    /// scale·x + shift; only the scale enters the gradient
    Affine { x: NodeId, scale: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Softmax along each row; blocked entries already carry weight 0 in
    /// the stored output, which is all the pullback needs
    RowSoftmax { x: NodeId },
    /// Per-column layer normalization over the feature (row) dimension
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// out[:, j] = table[ids[j], :]ᵀ
    Gather { table: NodeId, ids: Arc<[u32]> },
    SliceRows {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<NodeId>),
    SumAll(NodeId),
    /// Σ over active columns of −log softmax(logits[:, j])[targets[j]]
    CrossEntropy {
        logits: NodeId,
        targets: Arc<[u32]>,
        active: Arc<[bool]>,
    },
}

#[derive(Debug)]
struct Node<F: Scalar> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call, if this node participates.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor<F> {
        let n = &self.nodes[id.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape consistent")
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<F> {
        let n = &self.nodes[id.0];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, found {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor<F>) -> Result<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.into_data(), Op::Leaf, false))
    }

    /// Differentiable leaf; gradients accumulate here during backward.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Result<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.into_data(), Op::Leaf, requires_grad))
    }

    fn dim_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        Error::Dim {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(self.dim_err("matmul", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_acc(&mut out, self.data(a), self.data(b), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Matmul(a, b), ng))
    }

    /// C = Aᵀ·B
    pub fn matmul_ta(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ka, m) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(self.dim_err("matmul_ta", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_ta_acc(&mut out, self.data(a), self.data(b), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatmulTA(a, b), ng))
    }

    /// C = A·Bᵀ
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(self.dim_err("matmul_tb", a, b));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul_tb_acc(&mut out, self.data(a), self.data(b), m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatmulTB(a, b), ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("add", a, b));
        }
        let (r, c) = self.shape(a);
        let out: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    /// x[D×L] + bias[D×1] broadcast across columns.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (d, l) = self.shape(x);
        let (bd, bc) = self.shape(bias);
        if bd != d || bc != 1 {
            return Err(self.dim_err("add_bias", x, bias));
        }
        let xv = self.data(x);
        let bv = self.data(bias);
        let mut out = vec![F::zero(); d * l];
        for i in 0..d {
            let b = bv[i];
            for j in 0..l {
                out[i * l + j] = xv[i * l + j] + b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(d, l, out, Op::AddBias(x, bias), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err("mul", a, b));
        }
        let (r, c) = self.shape(a);
        let out: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let (r, c) = self.shape(x);
        let s = F::from_f64(scale);
        let t = F::from_f64(shift);
        let out: Vec<F> = self.data(x).iter().map(|&v| s * v + t).collect();
        let ng = self.needs(x);
        self.push(r, c, out, Op::Affine { x, scale }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let out: Vec<F> = self
            .data(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let ng = self.needs(x);
        self.push(r, c, out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.shape(x);
        let one = F::one();
        let out: Vec<F> = self
            .data(x)
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let ng = self.needs(x);
        self.push(r, c, out, Op::Sigmoid(x), ng)
    }

    /// Softmax along each row. With a mask, blocked entries get weight
    /// exactly 0; a fully blocked row is a contract error.
    pub fn row_softmax(&mut self, x: NodeId, mask: Option<Arc<AttentionMask>>) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if let Some(m) = &mask {
            if m.query_len() != r || m.key_len() != c {
                return Err(Error::Dim {
                    op: "row_softmax mask",
                    lhs: vec![r, c],
                    rhs: vec![m.query_len(), m.key_len()],
                });
            }
            for q in 0..r {
                if m.row(q).iter().all(|&b| b) {
                    return Err(Error::Contract(format!(
                        "attention row {q} is fully masked (no valid key)"
                    )));
                }
            }
        }
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax over non-finite input".into()));
        }
        let mut out = self.data(x).to_vec();
        for q in 0..r {
            let row = &mut out[q * c..(q + 1) * c];
            match &mask {
                Some(m) => kernels::masked_softmax_inplace(row, m.row(q)),
                None => kernels::softmax_inplace(row),
            }
        }
        let ng = self.needs(x);
        Ok(self.push(r, c, out, Op::RowSoftmax { x }, ng))
    }

    /// Layer-normalize each column over the feature dimension.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (d, l) = self.shape(x);
        let (gd, gc) = self.shape(gain);
        let (bd, bc) = self.shape(bias);
        if gd != d || gc != 1 || bd != d || bc != 1 {
            return Err(self.dim_err("layer_norm", x, gain));
        }
        let mut out = vec![F::zero(); d * l];
        kernels::layer_norm_cols(&mut out, self.data(x), self.data(gain), self.data(bias), d, l);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(d, l, out, Op::LayerNorm { x, gain, bias }, ng))
    }

    /// Embedding lookup: out[:, j] = table[ids[j], :]ᵀ with table[V×D].
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for table of {v} rows"
            )));
        }
        let l = ids.len();
        let tv = self.data(table);
        let mut out = vec![F::zero(); d * l];
        for (j, &t) in ids.iter().enumerate() {
            let row = &tv[t as usize * d..(t as usize + 1) * d];
            for i in 0..d {
                out[i * l + j] = row[i];
            }
        }
        let ng = self.needs(table);
        Ok(self.push(
            d,
            l,
            out,
            Op::Gather {
                table,
                ids: ids.into(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::Contract(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let xv = self.data(x);
        let out = xv[start * c..(start + len) * c].to_vec();
        let ng = self.needs(x);
        Ok(self.push(len, c, out, Op::SliceRows { x, start, len }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        };
        let (_, c) = self.shape(first);
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(self.dim_err("concat_rows", first, p));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in self.data(x) {
            acc = acc + v;
        }
        let ng = self.needs(x);
        self.push(1, 1, vec![acc], Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.data(x).len().max(1);
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Summed token-level negative log-likelihood over the active columns
    /// of a logits matrix.
    pub fn cross_entropy_cols(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        active: &[bool],
    ) -> Result<NodeId> {
        let (v, l) = self.shape(logits);
        if targets.len() != l || active.len() != l {
            return Err(Error::Contract(format!(
                "cross entropy over {l} columns got {} targets / {} flags",
                targets.len(),
                active.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Contract(format!(
                "target id {bad} outside vocabulary of size {v}"
            )));
        }
        let lv = self.data(logits);
        let mut total = F::zero();
        let mut col = vec![F::zero(); v];
        for j in 0..l {
            if !active[j] {
                continue;
            }
            for i in 0..v {
                col[i] = lv[i * l + j];
            }
            let lse = kernels::log_sum_exp(&col);
            total = total + (lse - col[targets[j] as usize]);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.into(),
                active: active.into(),
            },
            ng,
        ))
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<F>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// participating node with `needs_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        {
            let n = &self.nodes[loss.0];
            if n.rows * n.cols != 1 {
                return Err(Error::Contract(format!(
                    "backward requires a scalar loss, found {}x{}",
                    n.rows, n.cols
                )));
            }
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, n) = (rows, cols);
                    let k = self.shape(a).1;
                    if self.needs(a) {
                        let mut da = vec![F::zero(); m * k];
                        kernels::matmul_tb_acc(&mut da, &g, self.data(b), m, n, k);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![F::zero(); k * n];
                        kernels::matmul_ta_acc(&mut db, self.data(a), &g, k, m, n);
                        self.accumulate(b, db);
                    }
                }
                Op::MatmulTA(a, b) => {
                    // C[m,n] = Aᵀ·B with A[k,m], B[k,n]
                    let (m, n) = (rows, cols);
                    let k = self.shape(a).0;
                    if self.needs(a) {
                        let mut da = vec![F::zero(); k * m];
                        kernels::matmul_tb_acc(&mut da, self.data(b), &g, k, n, m);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![F::zero(); k * n];
                        kernels::matmul_acc(&mut db, self.data(a), &g, k, m, n);
                        self.accumulate(b, db);
                    }
                }
                Op::MatmulTB(a, b) => {
                    // C[m,n] = A·Bᵀ with A[m,k], B[n,k]
                    let (m, n) = (rows, cols);
                    let k = self.shape(a).1;
                    if self.needs(a) {
                        let mut da = vec![F::zero(); m * k];
                        kernels::matmul_acc(&mut da, &g, self.data(b), m, n, k);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let mut db = vec![F::zero(); n * k];
                        kernels::matmul_ta_acc(&mut db, &g, self.data(a), n, m, k);
                        self.accumulate(b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, g.clone());
                    }
                }
                Op::AddBias(x, bias) => {
                    let (d, l) = (rows, cols);
                    if self.needs(x) {
                        self.accumulate(x, g.clone());
                    }
                    if self.needs(bias) {
                        let mut db = vec![F::zero(); d];
                        for i in 0..d {
                            for j in 0..l {
                                db[i] = db[i] + g[i * l + j];
                            }
                        }
                        self.accumulate(bias, db);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let da: Vec<F> =
                            g.iter().zip(self.data(b)).map(|(&gi, &bi)| gi * bi).collect();
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db: Vec<F> =
                            g.iter().zip(self.data(a)).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(b, db);
                    }
                }
                Op::Affine { x, scale } => {
                    if self.needs(x) {
                        let s = F::from_f64(scale);
                        let dx: Vec<F> = g.iter().map(|&gi| gi * s).collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(x) {
                        let dx: Vec<F> = g
                            .iter()
                            .zip(self.data(x))
                            .map(|(&gi, &xi)| if xi > F::zero() { gi } else { F::zero() })
                            .collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(x) {
                        let y = &self.nodes[idx].value;
                        let dx: Vec<F> = g
                            .iter()
                            .zip(y)
                            .map(|(&gi, &yi)| gi * yi * (F::one() - yi))
                            .collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::RowSoftmax { x } => {
                    if self.needs(x) {
                        let y = &self.nodes[idx].value;
                        let (r, c) = (rows, cols);
                        let mut dx = vec![F::zero(); r * c];
                        for q in 0..r {
                            let yr = &y[q * c..(q + 1) * c];
                            let gr = &g[q * c..(q + 1) * c];
                            let mut dot = F::zero();
                            for j in 0..c {
                                dot = dot + gr[j] * yr[j];
                            }
                            let dr = &mut dx[q * c..(q + 1) * c];
                            for j in 0..c {
                                dr[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (d, l) = (rows, cols);
                    let eps = F::from_f64(crate::tensor::LAYER_NORM_EPS);
                    let inv_d = F::from_f64(1.0 / d as f64);
                    let mut dx = vec![F::zero(); d * l];
                    let mut dgain = vec![F::zero(); d];
                    let mut dbias = vec![F::zero(); d];
                    {
                        let xv = self.data(x);
                        let gv = self.data(gain);
                        for j in 0..l {
                            let mut mean = F::zero();
                            for i in 0..d {
                                mean = mean + xv[i * l + j];
                            }
                            mean = mean * inv_d;
                            let mut var = F::zero();
                            for i in 0..d {
                                let cdiff = xv[i * l + j] - mean;
                                var = var + cdiff * cdiff;
                            }
                            var = var * inv_d;
                            let inv_sd = (var + eps).sqrt().recip();
                            // gg = gain ⊙ upstream; two column means close the form.
                            let mut mean_gg = F::zero();
                            let mut mean_gg_xhat = F::zero();
                            for i in 0..d {
                                let xhat = (xv[i * l + j] - mean) * inv_sd;
                                let gg = gv[i] * g[i * l + j];
                                mean_gg = mean_gg + gg;
                                mean_gg_xhat = mean_gg_xhat + gg * xhat;
                                dgain[i] = dgain[i] + g[i * l + j] * xhat;
                                dbias[i] = dbias[i] + g[i * l + j];
                            }
                            mean_gg = mean_gg * inv_d;
                            mean_gg_xhat = mean_gg_xhat * inv_d;
                            for i in 0..d {
                                let xhat = (xv[i * l + j] - mean) * inv_sd;
                                let gg = gv[i] * g[i * l + j];
                                dx[i * l + j] = inv_sd * (gg - mean_gg - xhat * mean_gg_xhat);
                            }
                        }
                    }
                    if self.needs(x) {
                        self.accumulate(x, dx);
                    }
                    if self.needs(gain) {
                        self.accumulate(gain, dgain);
                    }
                    if self.needs(bias) {
                        self.accumulate(bias, dbias);
                    }
                }
                Op::Gather { table, ids } => {
                    if self.needs(table) {
                        let (v, d) = self.shape(table);
                        let l = cols;
                        let mut dt = vec![F::zero(); v * d];
                        for (j, &t) in ids.iter().enumerate() {
                            let row = &mut dt[t as usize * d..(t as usize + 1) * d];
                            for i in 0..d {
                                row[i] = row[i] + g[i * l + j];
                            }
                        }
                        self.accumulate(table, dt);
                    }
                }
                Op::SliceRows { x, start, len } => {
                    if self.needs(x) {
                        let (xr, c) = self.shape(x);
                        let mut dx = vec![F::zero(); xr * c];
                        dx[start * c..(start + len) * c].copy_from_slice(&g);
                        self.accumulate(x, dx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = cols;
                    let mut offset = 0;
                    for p in parts {
                        let (pr, _) = self.shape(p);
                        if self.needs(p) {
                            let dp = g[offset * c..(offset + pr) * c].to_vec();
                            self.accumulate(p, dp);
                        }
                        offset += pr;
                    }
                }
                Op::SumAll(x) => {
                    if self.needs(x) {
                        let n = self.data(x).len();
                        let dx = vec![g[0]; n];
                        self.accumulate(x, dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    active,
                } => {
                    if self.needs(logits) {
                        let (v, l) = self.shape(logits);
                        let lv = self.data(logits).to_vec();
                        let mut dl = vec![F::zero(); v * l];
                        let gs = g[0];
                        let mut col = vec![F::zero(); v];
                        for j in 0..l {
                            if !active[j] {
                                continue;
                            }
                            for i in 0..v {
                                col[i] = lv[i * l + j];
                            }
                            kernels::softmax_inplace(&mut col);
                            for i in 0..v {
                                let indicator = if i == targets[j] as usize {
                                    F::one()
                                } else {
                                    F::zero()
                                };
                                dl[i * l + j] = gs * (col[i] - indicator);
                            }
                        }
                        self.accumulate(logits, dl);
                    }
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    /// Weighted-sum loss of an op output, as a function of one input leaf.
    /// The fixed weight matrix makes the pullback non-uniform.
    fn check_unary<B>(r: usize, c: usize, build: B)
    where
        B: Fn(&mut Graph<f64>, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, r, c);
        let (or_, oc) = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true).unwrap();
            let y = build(&mut g, x);
            g.shape(y)
        };
        let w = rand_tensor(&mut rng, or_, oc);

        let loss_of = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(vec![r, c], vals.to_vec()).unwrap(), true)
                .unwrap();
            let y = build(&mut g, x);
            let wn = g.constant(w.clone()).unwrap();
            let prod = g.mul(y, wn).unwrap();
            let s = g.sum_all(prod);
            g.scalar_value(s).unwrap()
        };

        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true).unwrap();
        let y = build(&mut g, x);
        let wn = g.constant(w.clone()).unwrap();
        let prod = g.mul(y, wn).unwrap();
        let s = g.sum_all(prod);
        g.backward(s).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        let numeric = central_diff(&loss_of, x0.data(), 1e-5);
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!(
                rel_err(a, n) < 1e-4,
                "entry {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn grad_matmul_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = rand_tensor(&mut rng, 3, 4);
        check_unary(4, 2, |g, x| {
            let a = g.constant(a0.clone()).unwrap();
            g.matmul(a, x).unwrap()
        });
        let b0 = rand_tensor(&mut rng, 3, 2);
        check_unary(3, 4, |g, x| {
            let b = g.constant(b0.clone()).unwrap();
            g.matmul_ta(x, b).unwrap()
        });
        let c0 = rand_tensor(&mut rng, 5, 4);
        check_unary(2, 4, |g, x| {
            let c = g.constant(c0.clone()).unwrap();
            g.matmul_tb(x, c).unwrap()
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        check_unary(3, 3, |g, x| g.relu(x));
        check_unary(2, 5, |g, x| g.sigmoid(x));
        check_unary(2, 5, |g, x| g.affine(x, -1.7, 0.4));
        check_unary(4, 1, |g, x| {
            let y = g.sigmoid(x);
            g.mul(y, x).unwrap()
        });
    }

    #[test]
    fn grad_softmax_rows() {
        check_unary(3, 5, |g, x| g.row_softmax(x, None).unwrap());
    }

    #[test]
    fn grad_masked_softmax_rows() {
        let mask = Arc::new(AttentionMask::causal(4));
        check_unary(4, 4, move |g, x| {
            g.row_softmax(x, Some(mask.clone())).unwrap()
        });
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gain0 = rand_tensor(&mut rng, 5, 1);
        let bias0 = rand_tensor(&mut rng, 5, 1);
        check_unary(5, 3, |g, x| {
            let gain = g.constant(gain0.clone()).unwrap();
            let bias = g.constant(bias0.clone()).unwrap();
            g.layer_norm(x, gain, bias).unwrap()
        });
        // And gradients into gain/bias themselves.
        let x0 = rand_tensor(&mut rng, 5, 3);
        check_unary(5, 1, |g, gain| {
            let x = g.constant(x0.clone()).unwrap();
            let bias = g.constant(bias0.clone()).unwrap();
            g.layer_norm(x, gain, bias).unwrap()
        });
        check_unary(5, 1, |g, bias| {
            let x = g.constant(x0.clone()).unwrap();
            let gain = g.constant(gain0.clone()).unwrap();
            g.layer_norm(x, gain, bias).unwrap()
        });
    }

    #[test]
    fn grad_gather_slice_concat() {
        check_unary(6, 4, |g, table| {
            g.gather(table, &[2, 0, 5, 2]).unwrap()
        });
        check_unary(6, 3, |g, x| {
            let a = g.slice_rows(x, 0, 2).unwrap();
            let b = g.slice_rows(x, 2, 4).unwrap();
            let swapped = g.concat_rows(&[b, a]).unwrap();
            g.relu(swapped)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        let targets = [1u32, 0, 3];
        let active = [true, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, 4, 3);
        let loss_of = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g
                .leaf(Tensor::new(vec![4, 3], vals.to_vec()).unwrap(), true)
                .unwrap();
            let s = g.cross_entropy_cols(x, &targets, &active).unwrap();
            g.scalar_value(s).unwrap()
        };
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true).unwrap();
        let s = g.cross_entropy_cols(x, &targets, &active).unwrap();
        g.backward(s).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();
        let numeric = central_diff(&loss_of, x0.data(), 1e-5);
        for (&a, &n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(a, n) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn analytic_gradient_of_linear_sum() {
        // loss = sum(W·x): dW column j = x[j] broadcast across rows.
        let x0 = Tensor::new(vec![3, 1], vec![2.0, -1.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(vec![2, 3]), true).unwrap();
        let x = g.constant(x0).unwrap();
        let y = g.matmul(w, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        let dw = g.grad(w).unwrap();
        assert_eq!(dw, &[2.0, -1.0, 0.5, 2.0, -1.0, 0.5]);
    }

    #[test]
    fn disconnected_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::scalar(4.0), true).unwrap();
        let q = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let s = g.mul(q, q).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert!(g.grad(p).is_none());
        // loss = q² at q=3 → dq = 6
        assert_eq!(g.grad(q).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true).unwrap();
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = rand_tensor(&mut rng, 6, 6);
        let w0 = rand_tensor(&mut rng, 6, 6);
        let run = || -> Vec<u64> {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), true).unwrap();
            let w = g.constant(w0.clone()).unwrap();
            let h = g.matmul(w, x).unwrap();
            let r = g.row_softmax(h, None).unwrap();
            let s = g.sum_all(r);
            g.backward(s).unwrap();
            g.data(r).iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), false).unwrap();
        let mask = Arc::new(AttentionMask::from_blocked(
            2,
            2,
            vec![false, false, true, true],
        ));
        assert!(matches!(
            g.row_softmax(x, Some(mask)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grad_accumulates_when_input_reused() {
        // loss = sum(x ⊙ x) → dx = 2x.
        let x0 = Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(x0, true).unwrap();
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }
}
