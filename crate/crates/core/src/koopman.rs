//! Ensemble-level Koopman generator: `F = M (K + eps I)^{-1}`, its skew part,
//! the unitary diagonalisation and the eigenfunction values at the members.

use log::info;
use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::GramSystem;

pub type C64 = Complex<f64>;

/// Relative tolerance under which two `|omega|` are treated as a `+/-` pair.
pub const PAIR_TOL_REL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Generator {
    /// Skew part `(F - F^T)/2`.
    pub skew: DMatrix<f64>,
    /// `|F + F^T| / |F|`, zero for an exactly skew discretisation.
    pub asymmetry: f64,
}

/// `F = M (K + eps I)^{-1}`, returned through its skew part.
pub fn assemble_generator(m: &DMatrix<f64>, gram: &GramSystem) -> Result<Generator> {
    let p = gram.p();
    if m.nrows() != p || m.ncols() != p {
        return Err(Error::shape(format!("{p}x{p}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    // K is symmetric, so M K^{-1} = (K^{-1} M^T)^T
    let f = gram.solve_matrix(&m.transpose()).transpose();
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator F"));
    }
    let fnorm = f.norm();
    let asymmetry = if fnorm > 0.0 { (&f + f.transpose()).norm() / fnorm } else { 0.0 };
    info!("generator asymmetry |F+F^T|/|F| = {asymmetry:e}");
    Ok(Generator {
        skew: (&f - f.transpose()) * 0.5,
        asymmetry,
    })
}

#[derive(Debug, Clone)]
pub struct KoopmanSpectrum {
    /// `lambda_l = i omega_l`, sorted by `|omega|` with `+` before `-`.
    pub omegas: Vec<f64>,
    /// Unitary eigenvectors of the skew part, one per column.
    pub v: DMatrix<C64>,
    /// Column `l` holds `psi_l` at the members at the anchor time.
    pub psi0: DMatrix<C64>,
    pub measure_scale: f64,
}

impl KoopmanSpectrum {
    pub fn p(&self) -> usize {
        self.omegas.len()
    }

    pub fn max_abs_omega(&self) -> f64 {
        self.omegas.iter().fold(0.0_f64, |m, w| m.max(w.abs()))
    }

    /// `sum_l psi_l psi_l^*` over the modes selected by `keep`.
    pub fn kernel_expansion(&self, keep: impl Fn(usize) -> bool) -> DMatrix<C64> {
        let p = self.p();
        let mut out = DMatrix::zeros(p, p);
        for l in (0..p).filter(|&l| keep(l)) {
            let col = self.psi0.column(l);
            out += &col * col.adjoint();
        }
        out
    }
}

/// Diagonalise the Hermitian matrix `i S`; `omega = -mu` so that
/// `S v = i omega v`.
pub fn spectrum(skew: &DMatrix<f64>, gram: &GramSystem) -> Result<KoopmanSpectrum> {
    let p = skew.nrows();
    if skew.ncols() != p || gram.p() != p {
        return Err(Error::shape(format!("{}x{}", gram.p(), gram.p()), format!("{}x{}", p, skew.ncols())));
    }
    if skew.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("skew generator"));
    }
    let h: DMatrix<C64> = skew.map(|s| C64::new(0.0, s));
    let eig = SymmetricEigen::try_new(h, f64::EPSILON, 0)
        .ok_or_else(|| Error::Factorization("Hermitian eigensolver did not converge".into()))?;
    let raw: Vec<f64> = eig.eigenvalues.iter().map(|mu| -mu).collect();
    let order = pair_order(&raw);

    let mut v = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        let col = fix_phase(eig.eigenvectors.column(src).into_owned());
        v.set_column(dst, &col);
    }
    let omegas: Vec<f64> = order.iter().map(|&k| raw[k]).collect();
    let scale = gram.measure_scale();
    let root = gram.scaled_sqrt(scale).map(|x| C64::new(x, 0.0));
    let psi0 = root * &v;
    Ok(KoopmanSpectrum {
        omegas,
        v,
        psi0,
        measure_scale: scale,
    })
}

/// Permutation sorting by `|omega|` ascending, `+` member of a pair first.
fn pair_order(omegas: &[f64]) -> Vec<usize> {
    let n = omegas.len();
    let wmax = omegas.iter().fold(0.0_f64, |m, w| m.max(w.abs()));
    let tol = PAIR_TOL_REL * wmax;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        omegas[a]
            .abs()
            .total_cmp(&omegas[b].abs())
            .then(omegas[b].total_cmp(&omegas[a]))
    });
    let mut i = 0;
    while i + 1 < n {
        let (a, b) = (omegas[order[i]], omegas[order[i + 1]]);
        if (a.abs() - b.abs()).abs() <= tol && a < b {
            order.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    order
}

/// Rotate so the first non-negligible component is real and positive.
fn fix_phase(mut col: DVector<C64>) -> DVector<C64> {
    let amax = col.iter().fold(0.0_f64, |m, z| m.max(z.norm()));
    if let Some(z) = col.iter().find(|z| z.norm() > 1e-8 * amax).copied() {
        let phase = z.conj() / z.norm();
        col *= phase;
        // the pivot is now real to round-off; make it exactly so
        for c in col.iter_mut() {
            if c.norm() > 1e-8 * amax {
                c.im = if c.im.abs() <= f64::EPSILON * c.re.abs() { 0.0 } else { c.im };
                break;
            }
        }
    }
    col
}

/// Multiply column `l` of `psi0` by `exp(i omega_l t)`.
pub fn propagate_eigenfunctions(spec: &KoopmanSpectrum, t: f64) -> DMatrix<C64> {
    let mut out = spec.psi0.clone();
    for (l, mut col) in out.column_iter_mut().enumerate() {
        col *= C64::from_polar(1.0, spec.omegas[l] * t);
    }
    out
}

#[derive(Debug, Clone)]
pub struct TangentLinear {
    pub t: DMatrix<f64>,
    pub adjoint: DMatrix<f64>,
}

/// `T = L^{-1/2} S L^{1/2}` with `L = scale (K + eps I)`; `T_adj = -T`.
pub fn tangent_linear_matrix(skew: &DMatrix<f64>, gram: &GramSystem) -> Result<TangentLinear> {
    let p = gram.p();
    if skew.nrows() != p || skew.ncols() != p {
        return Err(Error::shape(format!("{p}x{p}"), format!("{}x{}", skew.nrows(), skew.ncols())));
    }
    let (root, inv_root) = gram.operator_roots(gram.measure_scale())?;
    let t = inv_root * (skew * root);
    let adjoint = -&t;
    Ok(TangentLinear { t, adjoint })
}
