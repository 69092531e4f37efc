//! Deterministic eigen and singular value decompositions.
//!
//! Components are sorted by decreasing eigen/singular value and each vector
//! is oriented so that its largest-magnitude entry is positive (first such
//! entry on ties), making outputs reproducible across runs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

fn orient(v: &mut [f64]) -> bool {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
        true
    } else {
        false
    }
}

/// Eigenvalues (descending) and matching unit eigenvectors (columns).
pub fn symmetric_eigen(a: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::precondition("eigendecomposition needs a square matrix"));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    let n = a.nrows();
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        orient(&mut v);
        vectors.set_column(c, &DVector::from_vec(v));
    }
    Ok((values, vectors))
}

/// Thin SVD a = U diag(σ) Vᵀ with σ descending; orientation fixed on V.
///
/// One-sided (Hestenes) Jacobi: columns are rotated pairwise until mutually
/// orthogonal, so small singular values keep full relative accuracy.
pub fn svd(a: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    if a.nrows() < a.ncols() {
        let (v, s, u) = svd(a.transpose())?;
        return Ok(orient_pair(u, s, v));
    }
    let (r, c) = a.shape();
    let mut w = a;
    let mut v = DMatrix::<f64>::identity(c, c);
    let mut converged = false;
    for _ in 0..80 {
        let mut rotated = false;
        for p in 0..c {
            for q in (p + 1)..c {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..r {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = cs * x - sn * y;
                    w[(i, q)] = sn * x + cs * y;
                }
                for i in 0..c {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = cs * x - sn * y;
                    v[(i, q)] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical("Jacobi SVD did not converge in 80 sweeps"));
    }
    let sigma: Vec<f64> = (0..c).map(|j| w.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut uu = DMatrix::zeros(r, c);
    let mut vv = DMatrix::zeros(c, c);
    let mut s = Vec::with_capacity(c);
    for (col, &j) in order.iter().enumerate() {
        if sigma[j] > 0.0 {
            uu.set_column(col, &(w.column(j) / sigma[j]));
        }
        vv.set_column(col, &v.column(j));
        s.push(sigma[j]);
    }
    Ok(orient_pair(uu, s, vv))
}

fn orient_pair(mut u: DMatrix<f64>, s: Vec<f64>, mut v: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    for col in 0..s.len() {
        let mut vc: Vec<f64> = v.column(col).iter().copied().collect();
        if orient(&mut vc) {
            v.column_mut(col).neg_mut();
            u.column_mut(col).neg_mut();
        }
    }
    (u, s, v)
}
