//! Transformer building blocks composed on top of the autodiff graph:
//! sinusoidal position encoding, embedding lookup, multi-head attention
//! with masking, position-wise feed-forward nets, residual+norm wrappers,
//! and the learned gate that can replace a residual connection.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a mask blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Padding,
    Causal,
    PaddingCausal,
}

/// Boolean attention mask over (query, key) pairs; `true` blocks the pair.
/// Blocked pairs receive exactly zero attention weight.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    kind: MaskKind,
    query_len: usize,
    key_len: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn none(query_len: usize, key_len: usize) -> Self {
        AttentionMask {
            kind: MaskKind::None,
            query_len,
            key_len,
            blocked: vec![false; query_len * key_len],
        }
    }

    /// Lower-triangular visibility: query j sees keys 0..=j.
    pub fn causal(len: usize) -> Self {
        let mut blocked = vec![false; len * len];
        for q in 0..len {
            for k in (q + 1)..len {
                blocked[q * len + k] = true;
            }
        }
        AttentionMask {
            kind: MaskKind::Causal,
            query_len: len,
            key_len: len,
            blocked,
        }
    }

    /// Block padded key positions for every query.
    pub fn padding(query_len: usize, key_pad: &[bool]) -> Self {
        let key_len = key_pad.len();
        let mut blocked = vec![false; query_len * key_len];
        for q in 0..query_len {
            for (k, &p) in key_pad.iter().enumerate() {
                blocked[q * key_len + k] = p;
            }
        }
        AttentionMask {
            kind: MaskKind::Padding,
            query_len,
            key_len,
            blocked,
        }
    }

    /// Causal visibility combined with padded-key blocking.
    pub fn padding_causal(key_pad: &[bool]) -> Self {
        let len = key_pad.len();
        let mut blocked = vec![false; len * len];
        for q in 0..len {
            for (k, &p) in key_pad.iter().enumerate() {
                blocked[q * len + k] = p || k > q;
            }
        }
        AttentionMask {
            kind: MaskKind::PaddingCausal,
            query_len: len,
            key_len: len,
            blocked,
        }
    }

    /// Raw constructor for tests and corpus-emitted masks.
    pub fn from_blocked(query_len: usize, key_len: usize, blocked: Vec<bool>) -> Self {
        assert_eq!(blocked.len(), query_len * key_len);
        AttentionMask {
            kind: MaskKind::None,
            query_len,
            key_len,
            blocked,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.blocked[q * self.key_len..(q + 1) * self.key_len]
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.key_len + k]
    }
}

/// Sinusoidal position encoding as a `[dim × length]` matrix: row 2i is
/// sin(pos / 10000^(2i/dim)), row 2i+1 the matching cosine.
pub fn positional_encoding<F: Scalar>(length: usize, dim: usize) -> Result<Tensor<F>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    let mut out = Tensor::zeros(vec![dim, length]);
    for i in 0..dim / 2 {
        let wavelength = 10000f64.powf(2.0 * i as f64 / dim as f64);
        for pos in 0..length {
            let angle = pos as f64 / wavelength;
            out.set2(2 * i, pos, F::from_f64(angle.sin()));
            out.set2(2 * i + 1, pos, F::from_f64(angle.cos()));
        }
    }
    Ok(out)
}

/// One column of the position encoding, for incremental decoding.
pub fn positional_encoding_column<F: Scalar>(pos: usize, dim: usize) -> Vec<F> {
    let mut col = vec![F::zero(); dim];
    for i in 0..dim / 2 {
        let wavelength = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = pos as f64 / wavelength;
        col[2 * i] = F::from_f64(angle.sin());
        col[2 * i + 1] = F::from_f64(angle.cos());
    }
    col
}

/// Embedding lookup plus position encoding: column m is
/// `table[tokens[m]] + encoding(position m)`.
pub fn embed<F: Scalar>(g: &mut Graph<F>, table: NodeId, tokens: &[u32]) -> Result<NodeId> {
    let (_, dim) = g.shape(table);
    let looked = g.gather(table, tokens)?;
    let pe = positional_encoding::<F>(tokens.len(), dim)?;
    let pe_node = g.constant(pe)?;
    g.add(looked, pe_node)
}

/// Projection weights of one attention block, already bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct AttnNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

/// Feed-forward weights bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Layer-norm gain/bias bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct NormNodes {
    pub gain: NodeId,
    pub bias: NodeId,
}

/// Gate projections bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub wi: NodeId,
    pub ws: NodeId,
}

/// Multi-head scaled dot-product attention. Queries/keys/values arrive as
/// `[D × len]` matrices; each of the `heads` slices attends independently,
/// the concatenation is projected by `wo`.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: Option<&Arc<AttentionMask>>,
    p: AttnNodes,
    heads: usize,
) -> Result<NodeId> {
    let (dq, _lq) = g.shape(q);
    let (dk, lk) = g.shape(k);
    let (dv, lv) = g.shape(v);
    if dk != dq || dv != dq {
        return Err(Error::Dim {
            op: "attention inputs",
            lhs: vec![dq],
            rhs: vec![dk, dv],
        });
    }
    if lk != lv {
        return Err(Error::Dim {
            op: "attention key/value lengths",
            lhs: vec![dk, lk],
            rhs: vec![dv, lv],
        });
    }
    if heads == 0 || dq % heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {dq} not divisible into {heads} heads"
        )));
    }
    let dh = dq / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = g.matmul(p.wq, q)?;
    let kp = g.matmul(p.wk, k)?;
    let vp = g.matmul(p.wv, v)?;

    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_rows(qp, h * dh, dh)?;
        let kh = g.slice_rows(kp, h * dh, dh)?;
        let vh = g.slice_rows(vp, h * dh, dh)?;
        let scores = g.matmul_ta(qh, kh)?;
        let scaled = g.affine(scores, scale, 0.0);
        let weights = g.row_softmax(scaled, mask.cloned())?;
        // [dh × lk] · weightsᵀ [lq × lk] → [dh × lq]
        per_head.push(g.matmul_tb(vh, weights)?);
    }
    let cat = g.concat_rows(&per_head)?;
    g.matmul(p.wo, cat)
}

/// Position-wise feed-forward: column j maps to w2·max(0, w1·x_j + b1) + b2.
pub fn feed_forward<F: Scalar>(g: &mut Graph<F>, x: NodeId, p: FfnNodes) -> Result<NodeId> {
    let hidden = g.matmul(p.w1, x)?;
    let hidden = g.add_bias(hidden, p.b1)?;
    let hidden = g.relu(hidden);
    let out = g.matmul(p.w2, hidden)?;
    g.add_bias(out, p.b2)
}

/// Residual connection followed by layer normalization.
pub fn residual_sublayer<F: Scalar>(
    g: &mut Graph<F>,
    h: NodeId,
    sublayer_out: NodeId,
    norm: NormNodes,
) -> Result<NodeId> {
    let sum = g.add(h, sublayer_out)?;
    g.layer_norm(sum, norm.gain, norm.bias)
}

/// Learned convex blend of a sub-layer input and output. Returns the merged
/// (pre-normalization) matrix and the gate values λ, elementwise in (0,1).
pub fn context_gate<F: Scalar>(
    g: &mut Graph<F>,
    h: NodeId,
    sublayer_out: NodeId,
    p: GateNodes,
) -> Result<(NodeId, NodeId)> {
    if g.shape(h) != g.shape(sublayer_out) {
        let (hr, hc) = g.shape(h);
        let (sr, sc) = g.shape(sublayer_out);
        return Err(Error::Dim {
            op: "context_gate",
            lhs: vec![hr, hc],
            rhs: vec![sr, sc],
        });
    }
    let from_input = g.matmul(p.wi, h)?;
    let from_sub = g.matmul(p.ws, sublayer_out)?;
    let pre = g.add(from_input, from_sub)?;
    let sig = g.sigmoid(pre);
    // Squeeze keeps the blend strictly inside (0, 1) when the sigmoid
    // saturates to a representable 0 or 1; the 0.5 neutral point is exact.
    let eps = F::GATE_SQUEEZE;
    let lambda = g.affine(sig, 1.0 - 2.0 * eps, eps);
    let keep = g.mul(lambda, h)?;
    let one_minus = g.affine(lambda, -1.0, 1.0);
    let pass = g.mul(one_minus, sublayer_out)?;
    let merged = g.add(keep, pass)?;
    Ok((merged, lambda))
}

/// Inverted dropout on a node: keep probability 1−rate, kept entries scaled
/// by 1/(1−rate). `rate == 0` is the identity.
pub fn dropout<F: Scalar, R: Rng>(
    g: &mut Graph<F>,
    x: NodeId,
    rate: f64,
    rng: &mut R,
) -> Result<NodeId> {
    if rate <= 0.0 {
        return Ok(x);
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    let (r, c) = g.shape(x);
    let keep_scale = F::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..r * c)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                F::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(vec![r, c], mask)?)?;
    g.mul(x, mask)
}
