//! Dense linear algebra and probability kernels.
//!
//! Everything here is double precision and pure. Matrices are small enough
//! (a few hundred rows) that cyclic Jacobi is an adequate symmetric
//! eigensolver; matrix products go through `matrixmultiply`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite matrix entry at {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(
            1.0,
            MatRef::new(&self.data, self.rows, self.cols),
            MatRef::new(&other.data, other.rows, other.cols),
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    fn asymmetry(&self) -> f64 {
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Borrowed row-major view used by [`gemm`]; `transposed` flips it without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c ← alpha·a·b + beta·c` with `c` row-major of shape `a.rows × b.cols`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output shape");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the views describe in-bounds strided layouts of live slices and
    // `c` is a distinct, exclusively borrowed buffer of the required size.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Probability vector whose entries are non-negative and sum to one within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

pub const PROB_SUM_TOL: f64 = 1e-9;

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("probability vector".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!(
                "probability entry {i} = {} is not a finite non-negative number",
                probs[i]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Config(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Empty("uniform distribution over zero classes".into()));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    /// Trusted constructor for producers that normalize by construction.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= PROB_SUM_TOL);
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit vector in the direction of `a`.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot normalize vector of norm {n}")));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature-scaled softmax, `probs[j] ∝ exp(alpha·(s_j − max s))`.
pub fn softmax_scaled(scores: &[f64], alpha: f64) -> Result<ProbVector> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax over no scores".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!("softmax scale {alpha} must be finite and >= 0")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("non-finite softmax score".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| (alpha * s - alpha * max).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector::from_normalized(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: DenseMatrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver for dense symmetric matrices.
///
/// Iterates until the off-diagonal Frobenius norm falls to `1e-12·‖m‖F`.
pub fn jacobi_eigh(m: &DenseMatrix) -> Result<SymmetricEigen> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let scale = m.norm_frobenius();
    let asym = m.asymmetry();
    if asym > 1e-10 * scale.max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    // Symmetrize so the rotations see an exactly symmetric input.
    let mut a = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    // Rows of `vt` are eigenvectors; rotating rows keeps the accesses contiguous.
    let mut vt = DenseMatrix::identity(n);
    let tol = 1e-12 * scale;

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let x = a.get(i, j);
                s += 2.0 * x * x;
            }
        }
        s.sqrt()
    };

    let mut converged = scale == 0.0 || off_norm(&a) <= tol;
    let mut sweep = 0;
    while !converged {
        if sweep == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweep += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                if t == 0.0 {
                    a.set(p, q, 0.0);
                    a.set(q, p, 0.0);
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                {
                    let data = a.data_mut();
                    let (row_p, row_q) = two_rows(data, n, p, q);
                    for r in 0..n {
                        if r == p || r == q {
                            continue;
                        }
                        let arp = row_p[r];
                        let arq = row_q[r];
                        row_p[r] = arp - s * (arq + tau * arp);
                        row_q[r] = arq + s * (arp - tau * arq);
                    }
                    for r in 0..n {
                        if r == p || r == q {
                            continue;
                        }
                        data[r * n + p] = data[p * n + r];
                        data[r * n + q] = data[q * n + r];
                    }
                }
                let (vp, vq) = two_rows(vt.data_mut(), n, p, q);
                for r in 0..n {
                    let x = vp[r];
                    let y = vq[r];
                    vp[r] = x - s * (y + tau * x);
                    vq[r] = y + s * (x - tau * y);
                }
            }
        }
        converged = off_norm(&a) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, vt.get(src, r));
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Largest order solved by [`jacobi_eigh`] inside [`eigh`].
pub const JACOBI_MAX_ORDER: usize = 128;

/// Symmetric eigendecomposition: cyclic Jacobi up to [`JACOBI_MAX_ORDER`],
/// Householder tridiagonalisation with implicit QR above it.
pub fn eigh(m: &DenseMatrix) -> Result<SymmetricEigen> {
    if m.rows() <= JACOBI_MAX_ORDER || !m.is_square() {
        return jacobi_eigh(m);
    }
    let n = m.rows();
    let asym = m.asymmetry();
    if asym > 1e-10 * m.norm_frobenius().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (m.get(i, j) + m.get(j, i)));
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, eig.eigenvectors[(r, src)]);
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DenseMatrix) -> Result<f64> {
    let a = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let svd = nalgebra::linalg::SVD::try_new(a, false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("singular value decomposition did not converge".into()))?;
    Ok(svd.singular_values.iter().sum())
}

/// Split a row-major buffer into mutable rows `p < q`.
fn two_rows(data: &mut [f64], n: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = data.split_at_mut(q * n);
    (&mut head[p * n..(p + 1) * n], &mut tail[..n])
}

/// Eigenvalues within this distance below zero are treated as round-off.
pub const PSD_NEGATIVE_TOL: f64 = 1e-6;

/// Symmetric PSD square root `S` with `S·S = m`.
pub fn sqrtm_psd(m: &DenseMatrix) -> Result<DenseMatrix> {
    let eig = eigh(m)?;
    if let Some(&worst) = eig.values.first() {
        if worst < -PSD_NEGATIVE_TOL {
            return Err(Error::NotPsd(worst));
        }
    }
    let n = m.rows();
    let roots: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // S = V·diag(√λ)·Vᵀ
    let mut scaled = eig.vectors.clone();
    for r in 0..n {
        for (c, root) in roots.iter().enumerate() {
            let v = scaled.get(r, c) * root;
            scaled.set(r, c, v);
        }
    }
    let mut s = DenseMatrix::zeros(n, n);
    gemm(
        1.0,
        MatRef::new(scaled.data(), n, n),
        MatRef::new(eig.vectors.data(), n, n).t(),
        0.0,
        s.data_mut(),
    );
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (s.get(i, j) + s.get(j, i));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    Ok(s)
}

/// Leading eigenpairs of a symmetric operator restricted to the orthogonal
/// complement of `deflate` (orthonormal vectors).
///
/// Lanczos with full reorthogonalization and restarts from the best Ritz
/// vector. Returns up to `count` pairs with eigenvalues descending.
pub(crate) fn lanczos_largest<F>(
    n: usize,
    apply: F,
    deflate: &[Vec<f64>],
    count: usize,
    start: &[f64],
) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let free_dim = n.saturating_sub(deflate.len());
    if free_dim == 0 || count == 0 {
        return Ok(Vec::new());
    }
    let krylov = free_dim.min(120);
    let project = |v: &mut Vec<f64>, basis: &[Vec<f64>]| {
        // Two passes of Gram-Schmidt keep the basis orthogonal to round-off.
        for _ in 0..2 {
            for b in basis {
                let c = dot(v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
    };

    let mut v0 = start.to_vec();
    let mut best: Vec<(f64, Vec<f64>)> = Vec::new();
    for _restart in 0..8 {
        project(&mut v0, deflate);
        let nv = norm(&v0);
        if nv == 0.0 {
            return Err(Error::Degenerate("Lanczos start vector vanished".into()));
        }
        v0.iter_mut().for_each(|x| *x /= nv);

        let mut basis: Vec<Vec<f64>> = vec![v0.clone()];
        let mut alphas = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        loop {
            let j = basis.len() - 1;
            let mut w = apply(&basis[j]);
            let scale = norm(&w);
            let a = dot(&w, &basis[j]);
            alphas.push(a);
            // Interleave both projections so round-off reintroduced by one is
            // removed by the other before a small residual is normalised.
            for _ in 0..2 {
                project(&mut w, deflate);
                project(&mut w, &basis);
            }
            let b = norm(&w);
            if basis.len() == krylov || b <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            betas.push(b);
            w.iter_mut().for_each(|x| *x /= b);
            basis.push(w);
        }

        let m = alphas.len();
        let mut t = DenseMatrix::zeros(m, m);
        for i in 0..m {
            t.set(i, i, alphas[i]);
            if i + 1 < m {
                t.set(i, i + 1, betas[i]);
                t.set(i + 1, i, betas[i]);
            }
        }
        let eig = jacobi_eigh(&t)?;
        best.clear();
        for idx in (0..m).rev().take(count) {
            let mut y = vec![0.0; n];
            for (k, b) in basis.iter().enumerate() {
                let c = eig.vectors.get(k, idx);
                for (yi, bi) in y.iter_mut().zip(b) {
                    *yi += c * bi;
                }
            }
            let ny = norm(&y);
            y.iter_mut().for_each(|x| *x /= ny);
            best.push((eig.values[idx], y));
        }
        let (mu, y) = &best[0];
        let r = apply(y);
        let resid = r
            .iter()
            .zip(y)
            .map(|(ri, yi)| (ri - mu * yi).powi(2))
            .sum::<f64>()
            .sqrt();
        if resid <= 1e-10 * mu.abs().max(1.0) || m == free_dim {
            break;
        }
        v0 = y.clone();
    }
    Ok(best)
}
