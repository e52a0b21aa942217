//! Small dense linear-algebra helpers on complex Hermitian matrices and
//! deterministic parallel reductions.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::{Error, Result, C64};

/// Number of quadrature nodes handled by one reduction leaf.
pub const REDUCTION_CHUNK: usize = 1024;

/// Outcome of a diagonally pivoted Cholesky factorization `P A Pᵀ = L Lᴴ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotedFactor {
    /// Sum of `ln` of the accepted pivots (the log-determinant when `full_rank`).
    pub log_det: f64,
    /// Number of pivots accepted before the remaining Schur complement fell below tolerance.
    pub rank: usize,
    /// Whether all pivots were accepted.
    pub full_rank: bool,
    /// Smallest accepted pivot divided by the largest initial diagonal entry.
    pub min_pivot_ratio: f64,
}

impl PivotedFactor {
    /// Determinant, zero when a pivot fell below tolerance.
    pub fn det(&self) -> f64 {
        if self.full_rank {
            self.log_det.exp()
        } else {
            0.0
        }
    }
}

/// Diagonally pivoted Cholesky of a Hermitian matrix. Only the lower triangle
/// is read. Pivots `≤ rel_tol · max(diag)` stop the factorization.
pub fn pivoted_cholesky(a: &DMatrix<C64>, rel_tol: f64) -> PivotedFactor {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "pivoted_cholesky needs a square matrix");
    if n == 0 {
        return PivotedFactor {
            log_det: 0.0,
            rank: 0,
            full_rank: true,
            min_pivot_ratio: 1.0,
        };
    }
    // Work on a Hermitian copy built from the lower triangle.
    let mut m = DMatrix::<C64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = a[(i, j)];
            m[(j, i)] = a[(i, j)].conj();
        }
        m[(j, j)] = C64::new(a[(j, j)].re, 0.0);
    }
    let scale = (0..n).map(|i| m[(i, i)].re).fold(0.0_f64, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return PivotedFactor {
            log_det: f64::NEG_INFINITY,
            rank: 0,
            full_rank: false,
            min_pivot_ratio: 0.0,
        };
    }
    let tol = rel_tol * scale;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut log_det = 0.0;
    let mut min_pivot = f64::INFINITY;
    for k in 0..n {
        // choose the largest remaining diagonal
        let (p, piv) = (k..n)
            .map(|i| (i, m[(perm[i], perm[i])].re))
            .fold((k, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(piv > tol) {
            return PivotedFactor {
                log_det,
                rank: k,
                full_rank: false,
                min_pivot_ratio: if k == 0 { 0.0 } else { min_pivot / scale },
            };
        }
        perm.swap(k, p);
        log_det += piv.ln();
        min_pivot = min_pivot.min(piv);
        let pk = perm[k];
        let l_kk = piv.sqrt();
        // column of L below the pivot
        for &pi in &perm[k + 1..] {
            m[(pi, pk)] /= l_kk;
        }
        // Schur complement update on the full remaining block, so that later
        // pivot swaps read current entries on either side of the diagonal
        for jj in k + 1..n {
            let pj = perm[jj];
            let l_jk = m[(pj, pk)];
            for &pi in &perm[k + 1..] {
                let l_ik = m[(pi, pk)];
                m[(pi, pj)] -= l_ik * l_jk.conj();
            }
            let d = m[(pj, pj)].re;
            m[(pj, pj)] = C64::new(d, 0.0);
        }
    }
    PivotedFactor {
        log_det,
        rank: n,
        full_rank: true,
        min_pivot_ratio: min_pivot / scale,
    }
}

/// `ln |det M|` by LU with partial pivoting. `None` when a pivot is exactly zero.
pub fn log_abs_det(m: DMatrix<C64>) -> Option<f64> {
    let n = m.nrows();
    if n == 0 {
        return Some(0.0);
    }
    let lu = m.lu();
    let u = lu.u();
    let mut acc = 0.0;
    for i in 0..n {
        let d = u[(i, i)].norm();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        acc += d.ln();
    }
    Some(acc)
}

/// Symmetrize `(A + Aᴴ)/2` in place and return the Frobenius norm of `A - Aᴴ`.
pub fn hermitianize(a: &mut DMatrix<C64>) -> f64 {
    let n = a.nrows();
    let mut asym = 0.0;
    for i in 0..n {
        for j in i..n {
            let x = a[(i, j)];
            let y = a[(j, i)].conj();
            let d = x - y;
            asym += if i == j { d.norm_sqr() } else { 2.0 * d.norm_sqr() };
            let mean = (x + y) * 0.5;
            a[(i, j)] = mean;
            a[(j, i)] = mean.conj();
        }
    }
    asym.sqrt()
}

/// Hermitian inverse square root `A^{-1/2}`; eigenvalues below `floor` are an error.
pub fn hermitian_inv_sqrt(a: &DMatrix<C64>, floor: f64) -> Result<DMatrix<C64>> {
    let eig = a.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > floor) {
        return Err(Error::GramDegenerate(format!(
            "smallest Gram eigenvalue {min:e} is below {floor:e}; refine the grid or tame the weight"
        )));
    }
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| C64::new(1.0 / l.sqrt(), 0.0)));
    Ok(q * d * q.adjoint())
}

/// Fixed-shape pairwise reduction: the combination tree depends only on the
/// number of items.
pub fn pairwise_reduce<T>(mut items: Vec<T>, add: impl Fn(T, T) -> T) -> Option<T> {
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(add(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Map fixed-size chunks of `0..len` in parallel and reduce the partial
/// results pairwise in chunk order. The result does not depend on the number
/// of worker threads.
pub fn chunked_reduce<T, M, A>(len: usize, map: M, add: A) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    A: Fn(T, T) -> T,
{
    let n_chunks = len.div_ceil(REDUCTION_CHUNK);
    let parts: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * REDUCTION_CHUNK;
            map(start..(start + REDUCTION_CHUNK).min(len))
        })
        .collect();
    pairwise_reduce(parts, add)
}

/// Fallible variant of [`chunked_reduce`]; the first error in chunk order wins.
pub fn try_chunked_reduce<T, M, A>(len: usize, map: M, add: A) -> Result<Option<T>>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> Result<T> + Sync + Send,
    A: Fn(T, T) -> T,
{
    let n_chunks = len.div_ceil(REDUCTION_CHUNK);
    let parts: Vec<Result<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * REDUCTION_CHUNK;
            map(start..(start + REDUCTION_CHUNK).min(len))
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<T>>>()?;
    Ok(pairwise_reduce(parts, add))
}
