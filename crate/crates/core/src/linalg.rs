//! Dense symmetric matrix helpers shared by the kernel, Koopman and
//! assimilation code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest relative jitter the escalation policy will try.
pub const MAX_JITTER_REL: f64 = 1e-6;

/// Eigenvalues below this fraction of the largest are clamped to zero when
/// taking square roots.
pub const SQRT_CLAMP_REL: f64 = 1e-12;

/// Symmetric eigen-decomposition with eigenvalues sorted descending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `Q f(Lambda) Q^T`
pub fn spectral_apply(vals: &DVector<f64>, vecs: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let mut scaled = vecs.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col *= f(vals[k]);
    }
    scaled * vecs.transpose()
}

/// Symmetric PSD square root; eigenvalues below `SQRT_CLAMP_REL * max` are
/// treated as zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let cut = SQRT_CLAMP_REL * vals.max().max(0.0);
    spectral_apply(&vals, &vecs, |l| if l > cut { l.sqrt() } else { 0.0 })
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn sym_inv_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(a);
    if vals.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Factorization(format!(
            "inverse square root of a matrix with eigenvalue {:e}",
            vals.min()
        )));
    }
    Ok(spectral_apply(&vals, &vecs, |l| 1.0 / l.sqrt()))
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix, discarding
/// eigenvalues below `tol_rel * lambda_max`.
pub fn pinv(a: &DMatrix<f64>, tol_rel: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let cut = tol_rel * vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    spectral_apply(&vals, &vecs, |l| if l.abs() > cut && l != 0.0 { 1.0 / l } else { 0.0 })
}

/// Cholesky factorisation of `A + eps I` with `eps = jitter_rel * trace/n`,
/// escalated by x10 until it succeeds or exceeds [`MAX_JITTER_REL`].
pub fn jittered_cholesky(a: &DMatrix<f64>, jitter_rel: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = a.nrows();
    if n == 0 || n != a.ncols() {
        return Err(Error::shape("non-empty square matrix", format!("{}x{}", a.nrows(), a.ncols())));
    }
    let mean_diag = a.trace() / n as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::Factorization(format!(
            "matrix has non-positive mean diagonal {mean_diag:e}"
        )));
    }
    let sym = symmetrize(a);
    let mut rel = jitter_rel;
    loop {
        let eps = rel * mean_diag;
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(shifted) {
            if rel > jitter_rel {
                log::warn!("jitter escalated to {rel:e} (relative) for a {n}x{n} factorisation");
            }
            return Ok((ch, eps));
        }
        rel = if rel == 0.0 { 1e-12 } else { rel * 10.0 };
        if rel > MAX_JITTER_REL * (1.0 + 1e-9) {
            let (vals, _) = sym_eigen(a);
            return Err(Error::Factorization(format!(
                "{n}x{n} matrix not positive definite after jitter escalation; \
                 eigenvalue range [{:e}, {:e}]",
                vals.min(),
                vals.max()
            )));
        }
    }
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rank: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose()
    }

    #[test]
    fn pinv_of_identity_and_rank_one() {
        let id = DMatrix::<f64>::identity(5, 5);
        assert!((pinv(&id, 1e-10) - &id).norm() < 1e-14);
        let v = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let p = &v * v.transpose();
        assert!((pinv(&p, 1e-10) - &p).norm() < 1e-13);
    }

    #[test]
    fn pinv_satisfies_penrose_condition() {
        for seed in 0..5 {
            let a = random_psd(12, 7, seed);
            let ap = pinv(&a, 1e-10);
            let back = &a * &ap * &a;
            assert!((back - &a).norm() < 1e-8 * a.norm());
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let a = random_psd(10, 10, 9);
        let s = sym_sqrt(&a);
        assert!((&s * &s - &a).norm() < 1e-10 * a.norm());
        let is = sym_inv_sqrt(&a).unwrap();
        let id = &is * &a * &is;
        assert!((id - DMatrix::identity(10, 10)).norm() < 1e-8);
    }

    #[test]
    fn jitter_rescues_rank_one() {
        let s = 2.5;
        let a = DMatrix::from_row_slice(2, 2, &[s, s, s, s]);
        let (ch, eps) = jittered_cholesky(&a, 1e-10).unwrap();
        assert!(eps > 0.0);
        let x = ch.solve(&DVector::from_vec(vec![1.0, 1.0]));
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(jittered_cholesky(&a, 1e-10).is_err());
    }
}
