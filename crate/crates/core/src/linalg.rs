//! Small dense linear-algebra helpers on top of nalgebra.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, Dyn};

/// `(M + M')/2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// Each eigenvector is oriented so its first nonzero component is positive.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = symmetrize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).clone_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric square root with negative eigenvalues clipped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let u = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    u * d * u.transpose()
}

/// Moore-Penrose style inverse of the symmetric square root.
pub fn psd_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let tol = 1e-12 * top.max(1e-300);
    let u = &eig.eigenvectors;
    let d =
        DMatrix::from_diagonal(
            &eig.eigenvalues
                .map(|x| if x > tol { 1.0 / x.sqrt() } else { 0.0 }),
        );
    u * d * u.transpose()
}

/// Projects onto the PSD cone by clipping eigenvalues at zero.
pub fn psd_clip(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let u = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0)));
    symmetrize(&(u * d * u.transpose()))
}

/// Cholesky factorization, retrying once with a `1e-10` diagonal jitter.
pub fn cholesky_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let s = symmetrize(m);
    if let Some(c) = Cholesky::new(s.clone()) {
        return Ok(c);
    }
    let n = s.nrows();
    let scale = (0..n).map(|i| s[(i, i)].abs()).fold(1.0, f64::max);
    Cholesky::new(&s + DMatrix::identity(n, n) * (1e-10 * scale))
        .ok_or_else(|| Error::Numeric("matrix is not positive definite".into()))
}

/// Largest eigenvalue modulus of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Stacks VAR transitions `Ψ₁..Ψ_p` into the `rp × rp` companion matrix.
pub fn companion(psi: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = psi.len();
    let r = psi.first().map_or(0, |m| m.nrows());
    let mut c = DMatrix::zeros(r * p, r * p);
    for (h, m) in psi.iter().enumerate() {
        c.view_mut((0, h * r), (r, r)).copy_from(m);
    }
    for i in r..r * p {
        c[(i, i - r)] = 1.0;
    }
    c
}

/// Solves the discrete Lyapunov equation `S = A S A' + Q` by doubling.
pub fn lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rho = spectral_radius(a);
    if rho >= 1.0 {
        return Err(Error::Stability(rho));
    }
    let mut s = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        let incr = &ak * &s * ak.transpose();
        s += &incr;
        ak = &ak * &ak;
        if incr.norm() <= 1e-16 * s.norm().max(1.0) {
            break;
        }
    }
    let s = symmetrize(&s);
    let resid = (&s - a * &s * a.transpose() - q).norm();
    if resid > 1e-12 * s.norm().max(1.0) {
        return Err(Error::Numeric(format!(
            "Lyapunov residual {resid:.3e} did not reach 1e-12"
        )));
    }
    Ok(s)
}

/// 2-norm condition number from singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
