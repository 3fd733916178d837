//! Dense row-major tensors and the numeric kernels behind every forward
//! pass (graph execution and the cached inference evaluator share these).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epsilon inside the layer-normalization square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Dense tensor, row-major. Matrices are `[rows, cols]`; columns index
/// sequence positions throughout the model code.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Build a matrix from rows (test convenience).
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "expected a matrix, found shape {other:?}"
            ))),
        }
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> F {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `A[m×k] · B[k×n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::Dim {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    kernels::matmul_acc(&mut out, a.data(), b.data(), m, ka, n);
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis` of a matrix (0 = down each column, 1 = along each
/// row), computed with max-subtraction. Non-finite inputs are rejected.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (r, c) = x.dims2()?;
    if axis > 1 {
        return Err(Error::Contract(format!(
            "softmax axis {axis} invalid for a matrix"
        )));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax over non-finite input".into()));
    }
    let mut out = x.clone();
    match axis {
        1 => {
            for i in 0..r {
                kernels::softmax_inplace(&mut out.data_mut()[i * c..(i + 1) * c]);
            }
        }
        _ => {
            // Column-wise: transpose access pattern.
            for j in 0..c {
                let mut col: Vec<F> = (0..r).map(|i| x.at2(i, j)).collect();
                kernels::softmax_inplace(&mut col);
                for (i, v) in col.into_iter().enumerate() {
                    out.set2(i, j, v);
                }
            }
        }
    }
    Ok(out)
}

/// Per-position layer normalization of `x[D×L]` over the feature dimension,
/// with per-feature `gain` and `bias` (both `D`-vectors).
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (d, l) = x.dims2()?;
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Dim {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![d, l]);
    kernels::layer_norm_cols(
        out.data_mut(),
        x.data(),
        gain.data(),
        bias.data(),
        d,
        l,
    );
    Ok(out)
}

/// Flat-buffer kernels. All matrices are row-major; `acc` variants add into
/// the output, which is what backward accumulation needs.
pub(crate) mod kernels {
    use crate::scalar::Scalar;
    use crate::tensor::LAYER_NORM_EPS;

    /// out[m×n] += A[m×k] · B[k×n]
    pub fn matmul_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
    }

    /// out[m×n] += Aᵀ · B where A is [k×m], B is [k×n]
    pub fn matmul_ta_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        for kk in 0..k {
            let arow = &a[kk * m..(kk + 1) * m];
            let brow = &b[kk * n..(kk + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + av * brow[j];
                }
            }
        }
    }

    /// out[m×n] += A · Bᵀ where A is [m×k], B is [n×k]
    pub fn matmul_tb_acc<F: Scalar>(out: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for kk in 0..k {
                    acc = acc + arow[kk] * brow[kk];
                }
                orow[j] = orow[j] + acc;
            }
        }
    }

    /// Exp-normalize a slice in place with max-subtraction.
    pub fn softmax_inplace<F: Scalar>(row: &mut [F]) {
        if row.is_empty() {
            return;
        }
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }

    /// Masked exp-normalize: entries with `blocked` true get exactly 0.
    /// Caller guarantees at least one unblocked entry.
    pub fn masked_softmax_inplace<F: Scalar>(row: &mut [F], blocked: &[bool]) {
        let mut mx = F::neg_infinity();
        for (v, &b) in row.iter().zip(blocked) {
            if !b && *v > mx {
                mx = *v;
            }
        }
        let mut sum = F::zero();
        for (v, &b) in row.iter_mut().zip(blocked) {
            if b {
                *v = F::zero();
            } else {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
        }
        for (v, &b) in row.iter_mut().zip(blocked) {
            if !b {
                *v = *v / sum;
            }
        }
    }

    /// Layer-normalize each column of x[d×l] into out.
    pub fn layer_norm_cols<F: Scalar>(
        out: &mut [F],
        x: &[F],
        gain: &[F],
        bias: &[F],
        d: usize,
        l: usize,
    ) {
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_d = F::from_f64(1.0 / d as f64);
        for j in 0..l {
            let mut mean = F::zero();
            for i in 0..d {
                mean = mean + x[i * l + j];
            }
            mean = mean * inv_d;
            let mut var = F::zero();
            for i in 0..d {
                let c = x[i * l + j] - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let inv_sd = (var + eps).sqrt().recip();
            for i in 0..d {
                let xhat = (x[i * l + j] - mean) * inv_sd;
                out[i * l + j] = gain[i] * xhat + bias[i];
            }
        }
    }

    /// Log-sum-exp of a slice with max-subtraction.
    pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = F::zero();
        for &v in row.iter() {
            sum = sum + (v - mx).exp();
        }
        mx + sum.ln()
    }
}
