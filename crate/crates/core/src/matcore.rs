//! Dense matrix values, thin SVD factorization, and the norms and inner
//! product the rest of the crate is written in.
//!
//! Matrices are immutable values: construction validates shape and
//! finiteness once, and every operation returns a fresh value, so instances
//! are safe to share read-only across worker threads.

use nalgebra::DMatrix;
use thiserror::Error;

/// Relative tolerance for the orthonormality and reconstruction contracts
/// of [`SvdFactors`].
pub const SVD_TOL: f64 = 1e-10;

/// Sweep budget for the one-sided Jacobi factorization. Convergence takes
/// roughly `log2(n)` sweeps; the budget leaves a wide margin.
const SVD_MAX_SWEEPS: usize = 60;

/// A column pair counts as orthogonal once `|<b_p, b_q>|` drops below this
/// multiple of `||b_p|| ||b_q||`.
const JACOBI_PAIR_TOL: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum MatError {
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("entry count {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("shape mismatch: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("SVD did not converge within {iterations} sweeps")]
    SvdNoConvergence { iterations: usize },
}

/// A real `d1 x d2` matrix with value semantics.
///
/// All entries are finite; construction rejects NaN and infinities so the
/// solver loops never propagate them silently.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    inner: DMatrix<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from entries listed row by row.
    pub fn from_rows(rows: usize, cols: usize, entries: &[f64]) -> Result<Self, MatError> {
        if rows == 0 || cols == 0 {
            return Err(MatError::EmptyShape { rows, cols });
        }
        if entries.len() != rows * cols {
            return Err(MatError::LengthMismatch {
                rows,
                cols,
                len: entries.len(),
            });
        }
        for (pos, &v) in entries.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatError::NonFinite {
                    row: pos / cols,
                    col: pos % cols,
                    value: v,
                });
            }
        }
        Ok(Self {
            inner: DMatrix::from_row_slice(rows, cols, entries),
        })
    }

    /// The zero matrix of the given shape. Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            inner: DMatrix::zeros(rows, cols),
        }
    }

    /// Builds a matrix entry by entry. `f(i, j)` must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        let inner = DMatrix::from_fn(rows, cols, |i, j| {
            let v = f(i, j);
            assert!(v.is_finite(), "non-finite entry {v} at ({i}, {j})");
            v
        });
        Self { inner }
    }

    /// The identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        assert!(n > 0, "matrix dimensions must be positive");
        Self {
            inner: DMatrix::identity(n, n),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    /// Returns a copy with entry `(i, j)` replaced by `v`.
    pub fn with_entry(&self, i: usize, j: usize, v: f64) -> Self {
        assert!(v.is_finite(), "non-finite entry {v} at ({i}, {j})");
        let mut m = self.inner.clone();
        m[(i, j)] = v;
        Self { inner: m }
    }

    /// Entries in row-major order.
    pub fn entries_row_major(&self) -> Vec<f64> {
        let (r, c) = self.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(self.inner[(i, j)]);
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        Self {
            inner: self.inner.transpose(),
        }
    }

    /// Matrix product. Panics on inner-dimension mismatch.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols(),
            rhs.rows(),
            "matmul inner dimensions {} and {} differ",
            self.cols(),
            rhs.rows()
        );
        Self {
            inner: &self.inner * &rhs.inner,
        }
    }

    /// Entrywise sum. Panics on shape mismatch.
    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Self {
            inner: &self.inner + &rhs.inner,
        }
    }

    /// Entrywise difference. Panics on shape mismatch.
    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Self {
            inner: &self.inner - &rhs.inner,
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            inner: &self.inner * c,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm()
    }

    /// Squared Frobenius norm, summed directly over entries.
    pub fn frobenius_norm_sq(&self) -> f64 {
        self.inner.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub(crate) fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub(crate) fn from_dmatrix(inner: DMatrix<f64>) -> Self {
        Self { inner }
    }
}

/// Thin SVD of a matrix: `U * diag(S) * V^T` with `k = min(d1, d2)`.
///
/// Singular values are sorted nonincreasing; rank deficiency shows up as
/// trailing zeros rather than truncated factors. Column signs of `U` and
/// `V` are arbitrary (only matched flips of both), so downstream consumers
/// must only depend on sign-invariant quantities.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `d1 x k` matrix with orthonormal columns.
    pub u: DenseMatrix,
    /// `k` singular values, nonincreasing and nonnegative.
    pub s: Vec<f64>,
    /// `d2 x k` matrix with orthonormal columns.
    pub v: DenseMatrix,
}

impl SvdFactors {
    /// Recomposes `U * diag(S) * V^T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let k = self.s.len();
        let d = DMatrix::from_fn(k, k, |i, j| if i == j { self.s[i] } else { 0.0 });
        DenseMatrix::from_dmatrix(self.u.as_dmatrix() * d * self.v.as_dmatrix().transpose())
    }

    /// Leading `r` columns of `U` and `V` and the corresponding values.
    pub fn truncate(&self, r: usize) -> SvdFactors {
        assert!(r >= 1 && r <= self.s.len(), "invalid truncation rank {r}");
        SvdFactors {
            u: DenseMatrix::from_dmatrix(self.u.as_dmatrix().columns(0, r).into_owned()),
            s: self.s[..r].to_vec(),
            v: DenseMatrix::from_dmatrix(self.v.as_dmatrix().columns(0, r).into_owned()),
        }
    }
}

/// Thin SVD with singular values sorted nonincreasing.
///
/// Uses one-sided Jacobi rotations: orthogonalize the columns of the tall
/// orientation of the input, read the singular values off as column norms,
/// and accumulate the rotations into the right factor. Rank deficiency is
/// handled exactly (zero columns stay zero and their left singular vectors
/// are filled in by orthonormal completion).
pub fn svd(m: &DenseMatrix) -> Result<SvdFactors, MatError> {
    let (rows, cols) = m.shape();
    let transposed = rows < cols;
    let work = if transposed {
        m.as_dmatrix().transpose()
    } else {
        m.as_dmatrix().clone()
    };
    let (u, s, v) = jacobi_svd(work)?;
    let (u, v) = if transposed { (v, u) } else { (u, v) };
    Ok(SvdFactors {
        u: DenseMatrix::from_dmatrix(u),
        s,
        v: DenseMatrix::from_dmatrix(v),
    })
}

/// One-sided Jacobi SVD of a tall matrix (`rows >= cols`). Returns
/// `(U, S, V)` with `S` sorted nonincreasing.
fn jacobi_svd(mut b: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>), MatError> {
    let (rows, cols) = (b.nrows(), b.ncols());
    debug_assert!(rows >= cols);
    let mut v = DMatrix::<f64>::identity(cols, cols);

    let mut converged = false;
    let mut sweeps = 0;
    {
        // Work on the column-major storage directly; columns are
        // contiguous slices.
        let bs = b.as_mut_slice();
        let vs = v.as_mut_slice();
        let mut sq_norms = vec![0.0_f64; cols];
        while sweeps < SVD_MAX_SWEEPS {
            sweeps += 1;
            // Fresh squared column norms each sweep; pair updates below
            // keep them current within the sweep.
            for (j, n) in sq_norms.iter_mut().enumerate() {
                *n = bs[j * rows..(j + 1) * rows].iter().map(|x| x * x).sum();
            }
            let mut rotated = false;
            for p in 0..cols {
                for q in (p + 1)..cols {
                    let (head, tail) = bs.split_at_mut(q * rows);
                    let bp = &mut head[p * rows..(p + 1) * rows];
                    let bq = &mut tail[..rows];

                    let alpha = sq_norms[p];
                    let beta = sq_norms[q];
                    let gamma: f64 = bp.iter().zip(bq.iter()).map(|(x, y)| x * y).sum();
                    if gamma == 0.0 || gamma.abs() <= JACOBI_PAIR_TOL * (alpha * beta).sqrt() {
                        continue;
                    }
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    if t == 0.0 || !t.is_finite() {
                        // Degenerate rotation (gamma denormal next to a huge
                        // norm imbalance): nothing to do for this pair.
                        continue;
                    }
                    rotated = true;
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for (x, y) in bp.iter_mut().zip(bq.iter_mut()) {
                        let (old_x, old_y) = (*x, *y);
                        *x = c * old_x - s * old_y;
                        *y = s * old_x + c * old_y;
                    }
                    // Rotation moves t*gamma worth of mass between the pair.
                    sq_norms[p] = alpha - t * gamma;
                    sq_norms[q] = beta + t * gamma;
                    let (vhead, vtail) = vs.split_at_mut(q * cols);
                    let vp = &mut vhead[p * cols..(p + 1) * cols];
                    let vq = &mut vtail[..cols];
                    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                        let (old_x, old_y) = (*x, *y);
                        *x = c * old_x - s * old_y;
                        *y = s * old_x + c * old_y;
                    }
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(MatError::SvdNoConvergence { iterations: sweeps });
    }

    // Column norms are the singular values; normalized columns form U.
    let mut entries: Vec<(f64, usize)> = (0..cols).map(|j| (b.column(j).norm(), j)).collect();
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite norms"));

    let mut u = DMatrix::<f64>::zeros(rows, cols);
    let mut s = Vec::with_capacity(cols);
    let mut v_sorted = DMatrix::<f64>::zeros(cols, cols);
    for (dst, &(norm, src)) in entries.iter().enumerate() {
        s.push(norm);
        v_sorted.set_column(dst, &v.column(src));
        if norm > 0.0 {
            let col = b.column(src) / norm;
            u.set_column(dst, &col);
        }
    }

    // Orthonormal completion for exactly-zero singular values.
    let filled = s.iter().filter(|&&x| x > 0.0).count();
    let mut next = filled;
    let mut candidate = 0;
    while next < cols {
        assert!(candidate < rows, "ran out of completion candidates");
        let mut w = DMatrix::<f64>::zeros(rows, 1);
        w[(candidate, 0)] = 1.0;
        // Two rounds of Gram-Schmidt for stability.
        for _ in 0..2 {
            for k in 0..next {
                let proj = (u.column(k).transpose() * &w)[(0, 0)];
                let uk = u.column(k).into_owned();
                w -= uk * proj;
            }
        }
        let norm = w.norm();
        if norm > 1e-3 {
            u.set_column(next, &(w.column(0) / norm));
            next += 1;
        }
        candidate += 1;
    }

    Ok((u, s, v_sorted))
}

/// The matrix norms used throughout: nuclear (sum of singular values),
/// spectral (largest singular value), Frobenius, and max absolute entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Nuclear,
    Spectral,
    Frobenius,
    MaxAbs,
}

/// Evaluates the requested norm. Nuclear and spectral norms factorize the
/// input, so non-convergence of the SVD propagates.
pub fn norm(m: &DenseMatrix, kind: NormKind) -> Result<f64, MatError> {
    match kind {
        NormKind::Frobenius => Ok(m.frobenius_norm()),
        NormKind::MaxAbs => Ok(m.max_abs()),
        NormKind::Nuclear => Ok(svd(m)?.s.iter().sum()),
        NormKind::Spectral => Ok(svd(m)?.s.first().copied().unwrap_or(0.0)),
    }
}

/// Trace inner product `<A, B> = trace(A^T B) = sum_jk A_jk B_jk`.
pub fn inner_product(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64, MatError> {
    if a.shape() != b.shape() {
        return Err(MatError::ShapeMismatch {
            lhs_rows: a.rows(),
            lhs_cols: a.cols(),
            rhs_rows: b.rows(),
            rhs_cols: b.cols(),
        });
    }
    Ok(a.as_dmatrix()
        .iter()
        .zip(b.as_dmatrix().iter())
        .map(|(x, y)| x * y)
        .sum())
}
