//! Dense real-matrix primitives: the row-major [`RealMatrix`], products backed
//! by `matrixmultiply`, a one-sided Jacobi SVD, a cyclic Jacobi symmetric
//! eigensolver, PSD inverse square roots and column centering.
//!
//! Everything here works in `f64`. All functions are pure.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_JACOBI_SWEEPS: usize = 80;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for RealMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RealMatrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl RealMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    /// Same as [`RealMatrix::new`] without the finiteness scan. Panics on a
    /// length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("ragged rows: {} vs {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Copy of rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let data = self.data[start * self.cols..(start + len) * self.cols].to_vec();
        Self { rows: len, cols: self.cols, data }
    }

    /// Copy of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    /// Copy of columns `start..start + len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Self { rows: self.rows, cols: len, data }
    }

    pub fn vstack(parts: &[&RealMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!("vstack: {} vs {cols} columns", p.cols)));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn hstack(parts: &[&RealMatrix]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("hstack: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `(A + Aᵀ) / 2`; requires a square matrix.
    pub fn symmetrized(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::Shape(format!("expected square matrix, got {}x{}", self.rows, self.cols)));
        }
        let n = self.rows;
        Ok(Self::from_fn(n, n, |i, j| 0.5 * (self.data[i * n + j] + self.data[j * n + i])))
    }
}

impl Index<(usize, usize)> for RealMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for RealMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `c ← alpha · op(a) · op(b) + beta · c` where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &RealMatrix, trans_a: bool, b: &RealMatrix, trans_b: bool, beta: f64, c: &mut RealMatrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents describe the exact buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ensure_finite(a: &RealMatrix) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix contains non-finite values".into()))
    }
}

/// Thin singular value decomposition `A = U · diag(s) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: RealMatrix,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// `k × cols` with orthonormal rows.
    pub vt: RealMatrix,
}

/// One-sided (Hestenes) Jacobi SVD. Deterministic: the sweep order is fixed
/// and ties in the final sort keep column order.
pub fn svd(a: &RealMatrix) -> Result<Svd> {
    ensure_finite(a)?;
    if a.rows < a.cols {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.vt.transpose(), s: t.s, vt: t.u.transpose() });
    }
    let (m, n) = a.shape();
    if n == 0 {
        return Ok(Svd { u: RealMatrix::zeros(m, 0), s: Vec::new(), vt: RealMatrix::zeros(0, 0) });
    }

    // Column j of the working matrix lives in row j of `w`, likewise for V.
    let mut w = a.transpose();
    let mut v = RealMatrix::identity(n);
    let tol = f64::EPSILON * (m.max(8) as f64);

    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = w.row(p);
                    let cq = w.row(q);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("Jacobi SVD did not converge in {MAX_JACOBI_SWEEPS} sweeps")));
    }

    let norms: Vec<f64> = (0..n).map(|j| dot(w.row(j), w.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));

    let s_max = norms[order[0]];
    let zero_tol = s_max * f64::EPSILON * (m as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut vt = RealMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        vt.row_mut(k).copy_from_slice(v.row(j));
        let sj = norms[j];
        if sj > zero_tol && sj > 0.0 {
            ucols.push(w.row(j).iter().map(|x| x / sj).collect());
            s.push(sj);
        } else {
            ucols.push(orthonormal_completion(&ucols, m));
            s.push(0.0);
        }
    }
    let mut u = RealMatrix::zeros(m, n);
    for (k, col) in ucols.iter().enumerate() {
        for i in 0..m {
            u[(i, k)] = col[i];
        }
    }
    Ok(Svd { u, s, vt })
}

fn rotate_rows(w: &mut RealMatrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = w.cols;
    let (head, tail) = w.data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn orthonormal_completion(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 0.5 {
            return cand.into_iter().map(|c| c / norm).collect();
        }
    }
    vec![0.0; m]
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues, ascending.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, in the order of `values`.
    pub vectors: RealMatrix,
}

/// Cyclic Jacobi eigensolver. The input is symmetrized first.
pub fn sym_eigen(a: &RealMatrix) -> Result<SymEigen> {
    ensure_finite(a)?;
    let mut m = a.symmetrized()?;
    let n = m.rows;
    let mut v = RealMatrix::identity(n);
    let scale = m.frobenius_norm();
    if n == 0 || scale == 0.0 {
        return Ok(SymEigen { values: vec![0.0; n], vectors: v });
    }

    let tol = f64::EPSILON * n as f64;
    let floor = f64::EPSILON * scale / n as f64;
    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= floor || apq.abs() <= tol * (m[(p, p)] * m[(q, q)]).abs().sqrt() {
                    continue;
                }
                rotated = true;
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J with J the (p, q) rotation.
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("Jacobi eigensolver did not converge in {MAX_JACOBI_SWEEPS} sweeps")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = RealMatrix::from_fn(n, n, |r, k| v[(r, order[k])]);
    Ok(SymEigen { values, vectors })
}

/// `(A + ridge·I)^(-1/2)` for symmetric positive semidefinite `A`.
///
/// Eigenvalues are clamped at zero before the ridge is added, so the
/// effective floor is `ridge`. Eigenvalues below `-1e-8·‖A‖_F` are rejected.
pub fn inv_sqrt_psd(a: &RealMatrix, ridge: f64) -> Result<RealMatrix> {
    if a.rows != a.cols {
        return Err(Error::Shape(format!("expected square matrix, got {}x{}", a.rows, a.cols)));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be non-negative, got {ridge}")));
    }
    let eig = sym_eigen(a)?;
    let norm = a.frobenius_norm();
    if let Some(&min) = eig.values.first() {
        if min < -1e-8 * norm {
            return Err(Error::NotPsd(min));
        }
    }
    let n = a.rows;
    let mut scaled = eig.vectors.clone();
    for (k, &lambda) in eig.values.iter().enumerate() {
        let floored = lambda.max(0.0) + ridge;
        if floored <= 0.0 {
            return Err(Error::Numerical("singular matrix: zero eigenvalue with zero ridge".into()));
        }
        let f = floored.powf(-0.25);
        for r in 0..n {
            scaled[(r, k)] *= f;
        }
    }
    // V·Λ^(-1/4) · (V·Λ^(-1/4))ᵀ = V·Λ^(-1/2)·Vᵀ, symmetric by construction.
    Ok(scaled.matmul_t(&scaled))
}

/// Subtracts each column's mean.
pub fn center_columns(a: &RealMatrix) -> Result<RealMatrix> {
    if a.rows < 2 {
        return Err(Error::Degenerate(format!("centering needs at least 2 rows, got {}", a.rows)));
    }
    let means = column_means(a);
    let mut out = a.clone();
    for i in 0..a.rows {
        for (v, m) in out.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    Ok(out)
}

pub fn column_means(a: &RealMatrix) -> Vec<f64> {
    let mut sums = vec![0.0; a.cols];
    for i in 0..a.rows {
        for (s, v) in sums.iter_mut().zip(a.row(i)) {
            *s += v;
        }
    }
    let n = a.rows.max(1) as f64;
    sums.into_iter().map(|s| s / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> RealMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn reconstruct(d: &Svd) -> RealMatrix {
        let mut us = d.u.clone();
        for i in 0..us.rows() {
            for (k, s) in d.s.iter().enumerate() {
                us[(i, k)] *= s;
            }
        }
        us.matmul(&d.vt)
    }

    fn assert_orthonormal_cols(m: &RealMatrix, tol: f64) {
        let g = m.t_matmul(m);
        let err = g.sub(&RealMatrix::identity(m.cols())).frobenius_norm();
        assert!(err < tol, "orthonormality error {err}");
    }

    #[test]
    fn sym_eigen_converges_on_stalling_input() {
        let b = RealMatrix::from_vec(
            8,
            8,
            vec![
                -2.4602597246990405,
                0.06109133861643409,
                -2.539736631503,
                1.1161811562698662,
                -1.3693963929683928,
                0.49290803094532737,
                0.9123832290542249,
                0.09210761866228734,
                -0.7472962360954815,
                0.28174519020398214,
                0.9144154248186014,
                -1.2727078518843413,
                -0.7462536474199656,
                2.4152737461877853,
                -2.13233921687057,
                1.0572662301178894,
                0.9528133800322772,
                2.90426138588054,
                -2.147124920856201,
                0.6643595413152023,
                1.6314200783747779,
                -2.0425632995678047,
                -2.128779403915837,
                0.0,
                0.28135003123318497,
                1.7989888830674148,
                -1.8535512097958091,
                -1.3776978845934036,
                2.382020182142444,
                0.2606694017350209,
                2.494801837121477,
                -1.0749601851927504,
                1.4156174333288876,
                0.8320856482031784,
                2.4911900238050064,
                -0.12882547076987527,
                -2.3131483579491996,
                0.7940340112610712,
                0.6520475662498049,
                -1.9348676384839485,
                1.1702766942090554,
                0.4101999504728948,
                1.4907239414564055,
                -0.059282392580519636,
                -2.1579356749915544,
                -0.940455344380773,
                1.33778085428926,
                2.2061869200721294,
                1.6946231821353002,
                -0.9443946704808882,
                0.0,
                1.8619415112021447,
                2.320495635227489,
                -1.911317748320821,
                -1.0375013717498984,
                0.0,
                0.0,
                0.0,
                -0.4322889610786243,
                0.0,
                2.213978565005327,
                0.0,
                0.0,
                -0.7221459773320368,
            ],
        );
        let a = b.add(&b.transpose());
        let e = sym_eigen(&a).unwrap();
        let vl = RealMatrix::from_fn(8, 8, |i, j| e.vectors[(i, j)] * e.values[j]);
        assert!(a.matmul(&e.vectors).sub(&vl).max_abs() < 1e-12 * a.max_abs());
        assert_orthonormal_cols(&e.vectors, 1e-12);
    }

    #[test]
    fn svd_identity_and_diagonal() {
        let d = svd(&RealMatrix::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
        let d = svd(&RealMatrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        for (got, want) in d.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let d = svd(&RealMatrix::diag(&[1.0, 3.0, 2.0])).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-14 && (d.s[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_random_tall_and_wide() {
        for (r, c, seed) in [(20, 7, 1), (7, 20, 2), (50, 50, 3)] {
            let a = random(r, c, seed);
            let d = svd(&a).unwrap();
            let rel = reconstruct(&d).sub(&a).frobenius_norm() / a.frobenius_norm();
            assert!(rel < 1e-10, "{r}x{c}: {rel}");
            assert_orthonormal_cols(&d.u, 1e-10);
            assert_orthonormal_cols(&d.vt.transpose(), 1e-10);
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let col = random(6, 1, 9);
        let a = RealMatrix::hstack(&[&col, &col.scale(2.0), &col.scale(-1.0)]).unwrap();
        let d = svd(&a).unwrap();
        assert!(d.s[1].abs() < 1e-12 && d.s[2].abs() < 1e-12);
        assert_orthonormal_cols(&d.u, 1e-10);
        let rel = reconstruct(&d).sub(&a).frobenius_norm() / a.frobenius_norm();
        assert!(rel < 1e-10);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut a = RealMatrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(svd(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        for seed in 0..5 {
            let a = random(15, 6, 100 + seed);
            let s = svd(&a).unwrap().s;
            let mut ev: Vec<f64> =
                sym_eigen(&a.t_matmul(&a)).unwrap().values.iter().map(|l| l.max(0.0).sqrt()).collect();
            ev.reverse();
            for (x, y) in s.iter().zip(&ev) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let m = random(7, 7, 4);
        let a = m.t_matmul(&m);
        let e = sym_eigen(&a).unwrap();
        let mut vl = e.vectors.clone();
        for r in 0..7 {
            for k in 0..7 {
                vl[(r, k)] *= e.values[k];
            }
        }
        let rec = vl.matmul_t(&e.vectors);
        assert!(rec.sub(&a).frobenius_norm() < 1e-10 * a.frobenius_norm());
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn inv_sqrt_examples() {
        let r = inv_sqrt_psd(&RealMatrix::identity(3), 0.0).unwrap();
        assert!(r.sub(&RealMatrix::identity(3)).max_abs() < 1e-14);
        let r = inv_sqrt_psd(&RealMatrix::diag(&[4.0, 9.0]), 0.0).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((r[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
        assert!(r[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn inv_sqrt_whitens_random_psd() {
        let m = random(5, 5, 11);
        let b = m.t_matmul(&m);
        let w = inv_sqrt_psd(&b, 0.0).unwrap();
        let err = w.matmul(&b).matmul(&w).sub(&RealMatrix::identity(5)).frobenius_norm();
        assert!(err < 1e-8, "{err}");
        // commutes with the input
        let comm = w.matmul(&b).sub(&b.matmul(&w)).frobenius_norm();
        assert!(comm < 1e-8);
    }

    #[test]
    fn inv_sqrt_errors() {
        assert!(matches!(inv_sqrt_psd(&RealMatrix::zeros(2, 3), 0.0), Err(Error::Shape(_))));
        assert!(matches!(inv_sqrt_psd(&RealMatrix::diag(&[1.0, -1.0]), 0.0), Err(Error::NotPsd(_))));
        // a zero eigenvalue is fine once a ridge is present
        let r = inv_sqrt_psd(&RealMatrix::diag(&[0.0, 1.0]), 1.0).unwrap();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn centering_examples() {
        let c = center_columns(&RealMatrix::from_rows(&[[1.0], [3.0]]).unwrap()).unwrap();
        assert_eq!(c.data(), &[-1.0, 1.0]);
        let a = RealMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        let c = center_columns(&a).unwrap();
        assert_eq!(c.data(), &[-1.0, -2.0, 0.0, 0.0, 1.0, 2.0]);
        let again = center_columns(&c).unwrap();
        assert!(again.sub(&c).max_abs() < 1e-15);
        assert!(matches!(center_columns(&RealMatrix::zeros(1, 3)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gemm_transposes_agree() {
        let a = random(4, 3, 5);
        let b = random(4, 2, 6);
        let direct = a.transpose().matmul(&b);
        assert!(a.t_matmul(&b).sub(&direct).max_abs() < 1e-14);
        let c = random(5, 3, 7);
        assert!(a.matmul_t(&c).sub(&a.matmul(&c.transpose())).max_abs() < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn centering_is_linear(seed in 0u64..1000, c in -5.0f64..5.0) {
                let a = random(6, 3, seed);
                let b = random(6, 3, seed + 1);
                let lhs = center_columns(&a.scale(c).add(&b)).unwrap();
                let rhs = center_columns(&a).unwrap().scale(c).add(&center_columns(&b).unwrap());
                prop_assert!(lhs.sub(&rhs).max_abs() < 1e-12);
                let means = column_means(&lhs);
                prop_assert!(means.iter().all(|m| m.abs() < 1e-12));
            }

            #[test]
            fn inv_sqrt_commutes(seed in 0u64..1000, ridge in 0.0f64..1.0) {
                let m = random(4, 4, seed);
                let a = m.t_matmul(&m);
                let w = inv_sqrt_psd(&a, ridge + 1e-3).unwrap();
                prop_assert!(w.matmul(&a).sub(&a.matmul(&w)).frobenius_norm() < 1e-8);
            }
        }
    }
}
