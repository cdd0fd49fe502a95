use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of `a + jitter·I`.
pub(crate) fn jittered_cholesky(a: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m).ok_or_else(|| {
        Error::Factorization(format!(
            "{}x{} matrix is not positive definite with jitter {jitter:e}",
            a.nrows(),
            a.ncols()
        ))
    })
}

/// Low-rank pivoted Cholesky of a positive semidefinite matrix.
///
/// Returns `F` (n × r) with `F Fᵀ ≈ a`, stopping once the largest remaining
/// diagonal entry drops below `tol · max diag(a)`. The residual is then
/// bounded entrywise by that threshold, which makes this usable on the
/// near-singular covariances of dense squared-exponential grids where a plain
/// factorization would need large jitter.
#[cfg(test)]
pub(crate) fn pivoted_cholesky(a: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if a.ncols() != a.nrows() {
        return Err(Error::Factorization("pivoted Cholesky needs a square matrix".into()));
    }
    let diag: Vec<f64> = (0..a.nrows()).map(|i| a[(i, i)]).collect();
    pivoted_cholesky_with(diag, |p| a.column(p).iter().copied().collect(), tol)
}

/// Same as `pivoted_cholesky`, with the matrix given by its diagonal and a
/// column oracle so only the pivot columns are ever formed.
pub(crate) fn pivoted_cholesky_with(
    mut diag: Vec<f64>,
    mut column: impl FnMut(usize) -> Vec<f64>,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let n = diag.len();
    if diag.iter().any(|d| !d.is_finite()) {
        return Err(Error::Factorization("non-finite covariance diagonal".into()));
    }
    let scale = diag.iter().cloned().fold(0.0, f64::max);
    let stop = tol * scale;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut used = vec![false; n];
    while cols.len() < n {
        let (p, dp) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, d)| (i, *d))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("at least one free pivot");
        if dp <= stop || dp <= 0.0 {
            break;
        }
        used[p] = true;
        let root = dp.sqrt();
        let mut col = column(p);
        if col.len() != n || col.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("invalid covariance column".into()));
        }
        for c in &cols {
            let cp = c[p];
            for (v, ci) in col.iter_mut().zip(c) {
                *v -= ci * cp;
            }
        }
        for (i, v) in col.iter_mut().enumerate() {
            *v = if used[i] && i != p { 0.0 } else { *v / root };
        }
        col[p] = root;
        for i in 0..n {
            if !used[i] {
                diag[i] -= col[i] * col[i];
            }
        }
        cols.push(col);
    }
    let r = cols.len();
    Ok(DMatrix::from_fn(n, r, |i, j| cols[j][i]))
}

/// Lower-triangular part (inclusive of the diagonal).
pub(crate) fn lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if i >= j { m[(i, j)] } else { 0.0 })
}

/// Frobenius inner product `tr(Aᵀ B)`.
pub(crate) fn frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
