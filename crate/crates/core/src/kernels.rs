//! Ensemble kernels, the Gram system at the anchor time and the generator
//! matrix of the flow.
//!
//! Kernels are evaluated once on the members at the anchor time `t0`: the
//! kernel family is transported by the flow, so `k_t(X_t, Y_t) = k_0(X_0, Y_0)`
//! and the same Gram matrix serves every later time.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// `<a, b>` in L2 of the basin.
    Empirical,
    /// `exp(-|a - b|^2 / ell^2)`
    Gaussian,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Empirical => "empirical",
            KernelFamily::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "empirical" => Some(KernelFamily::Empirical),
            "gaussian" => Some(KernelFamily::Gaussian),
            _ => None,
        }
    }
}

/// Scaling of the integral operator `L_k` under the empirical measure of the
/// ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MeasureNorm {
    /// `L_k -> K`
    None,
    /// `L_k -> K / p`
    OneOverP,
}

impl MeasureNorm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(MeasureNorm::None),
            "one_over_p" => Some(MeasureNorm::OneOverP),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasureNorm::None => "none",
            MeasureNorm::OneOverP => "one_over_p",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub ell_g: f64,
    /// Evaluate the empirical kernel on anomalies about the ensemble mean,
    /// scaled by `1/(p-1)`. No effect on the Gaussian kernel, which only sees
    /// differences.
    pub center_anomalies: bool,
    pub jitter_rel: f64,
    pub measure_norm: MeasureNorm,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            family: KernelFamily::Empirical,
            ell_g: 1.0,
            center_anomalies: false,
            jitter_rel: 1e-10,
            measure_norm: MeasureNorm::OneOverP,
        }
    }
}

impl KernelSpec {
    pub fn empirical() -> Self {
        KernelSpec::default()
    }

    pub fn gaussian(ell_g: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Gaussian,
            ell_g,
            ..KernelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ell_g > 0.0) {
            return Err(Error::InvalidParam(format!("ell_G must be > 0, got {}", self.ell_g)));
        }
        if !(self.jitter_rel >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "jitter_rel must be >= 0, got {}",
                self.jitter_rel
            )));
        }
        Ok(())
    }

    /// `1/p` or `1` depending on [`MeasureNorm`].
    pub fn measure_scale(&self, p: usize) -> f64 {
        match self.measure_norm {
            MeasureNorm::None => 1.0,
            MeasureNorm::OneOverP => 1.0 / p as f64,
        }
    }

    fn centers(&self) -> bool {
        self.center_anomalies && self.family == KernelFamily::Empirical
    }
}

/// Pairwise kernel value. Centering, when requested, is the caller's job
/// (see [`KernelFeatures`]).
pub fn kernel_eval(a: &Field2D, b: &Field2D, spec: &KernelSpec) -> Result<f64> {
    a.ensure_same_grid(b)?;
    Ok(match spec.family {
        KernelFamily::Empirical => a.dot(b),
        KernelFamily::Gaussian => (-a.dist_sq(b) / (spec.ell_g * spec.ell_g)).exp(),
    })
}

/// Member fields as the kernel sees them: raw, or anomalies about the
/// ensemble mean scaled by `(p-1)^{-1/2}` for the centred empirical kernel.
#[derive(Debug, Clone)]
pub struct KernelFeatures {
    pub spec: KernelSpec,
    pub fields: Vec<Field2D>,
    mean: Option<Field2D>,
    scale: f64,
}

impl KernelFeatures {
    pub fn new(members: &[Field2D], spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        if members.len() < 2 {
            return Err(Error::InvalidParam(format!(
                "need at least 2 members, got {}",
                members.len()
            )));
        }
        for m in &members[1..] {
            members[0].ensure_same_grid(m)?;
        }
        if !spec.centers() {
            return Ok(KernelFeatures {
                spec: *spec,
                fields: members.to_vec(),
                mean: None,
                scale: 1.0,
            });
        }
        let mean = ensemble_mean(members);
        let scale = 1.0 / ((members.len() - 1) as f64).sqrt();
        let fields = members.iter().map(|m| m.sub(&mean).scaled(scale)).collect();
        Ok(KernelFeatures {
            spec: *spec,
            fields,
            mean: Some(mean),
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Map a new state into the same feature coordinates as the members.
    pub fn feature(&self, x: &Field2D) -> Field2D {
        match &self.mean {
            Some(mean) => x.sub(mean).scaled(self.scale),
            None => x.clone(),
        }
    }

    /// Tendencies in feature coordinates (anomalies of the tendencies when
    /// centred).
    pub fn tendency_features(&self, tendencies: &[Field2D]) -> Vec<Field2D> {
        match &self.mean {
            Some(_) => {
                let tmean = ensemble_mean(tendencies);
                tendencies.iter().map(|t| t.sub(&tmean).scaled(self.scale)).collect()
            }
            None => tendencies.to_vec(),
        }
    }
}

pub fn ensemble_mean(fields: &[Field2D]) -> Field2D {
    let w = vec![1.0 / fields.len() as f64; fields.len()];
    let refs: Vec<&Field2D> = fields.iter().collect();
    crate::field::combine(&w, &refs)
}

/// Gram matrix with its regularised factorisation and square root.
#[derive(Debug, Clone)]
pub struct GramSystem {
    pub spec: KernelSpec,
    pub k: DMatrix<f64>,
    pub k_sqrt: DMatrix<f64>,
    /// Jitter actually applied in `K + eps I`.
    pub epsilon: f64,
    chol: Cholesky<f64, Dyn>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

impl GramSystem {
    /// Build from an already assembled symmetric PSD matrix.
    pub fn from_matrix(k: DMatrix<f64>, spec: &KernelSpec) -> Result<Self> {
        let k = linalg::symmetrize(&k);
        let (chol, epsilon) = linalg::jittered_cholesky(&k, spec.jitter_rel)?;
        let (eigvals, eigvecs) = linalg::sym_eigen(&k);
        let cut = linalg::SQRT_CLAMP_REL * eigvals.max().max(0.0);
        let k_sqrt = linalg::spectral_apply(&eigvals, &eigvecs, |l| if l > cut { l.sqrt() } else { 0.0 });
        Ok(GramSystem {
            spec: *spec,
            k,
            k_sqrt,
            epsilon,
            chol,
            eigvals,
            eigvecs,
        })
    }

    pub fn p(&self) -> usize {
        self.k.nrows()
    }

    pub fn measure_scale(&self) -> f64 {
        self.spec.measure_scale(self.p())
    }

    /// `(K + eps I)^{-1} v`
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `(K + eps I)^{-1}` applied to every column of `m`.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    /// Eigenvalues of `K`, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }

    /// `(K * scale)^{1/2}` with clamped negative eigenvalues.
    pub fn scaled_sqrt(&self, scale: f64) -> DMatrix<f64> {
        &self.k_sqrt * scale.sqrt()
    }

    /// Roots of the jittered operator `L = scale * (K + eps I)`:
    /// returns `(L^{1/2}, L^{-1/2})`.
    pub fn operator_roots(&self, scale: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let eps = self.epsilon;
        let cut = linalg::SQRT_CLAMP_REL * self.eigvals.max().max(0.0);
        let shifted = |l: f64| scale * (if l > cut { l } else { 0.0 } + eps);
        if shifted(self.eigvals.min()) <= 0.0 {
            return Err(Error::Factorization(
                "operator L = scale (K + eps I) is singular; raise jitter_rel".into(),
            ));
        }
        let root = linalg::spectral_apply(&self.eigvals, &self.eigvecs, |l| shifted(l).sqrt());
        let inv_root = linalg::spectral_apply(&self.eigvals, &self.eigvecs, |l| 1.0 / shifted(l).sqrt());
        Ok((root, inv_root))
    }
}

/// `K_ij = k(X_i, X_j)` over the members at the anchor time.
pub fn gram_matrix(members: &[Field2D], spec: &KernelSpec) -> Result<GramSystem> {
    let feats = KernelFeatures::new(members, spec)?;
    gram_from_features(&feats)
}

pub fn gram_from_features(feats: &KernelFeatures) -> Result<GramSystem> {
    let p = feats.len();
    let mut k = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = kernel_eval(&feats.fields[i], &feats.fields[j], &feats.spec)?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gram matrix"));
    }
    GramSystem::from_matrix(k, &feats.spec)
}

/// `M_ij = (-d_{M(.)} k(., X_j))(X_i)`, the kernel derivative along the flow.
///
/// Empirical: `<dX_j/dt, X_i>`.
/// Gaussian: `-(2/ell^2) <dX_j/dt, X_i - X_j> exp(-|X_i - X_j|^2 / ell^2)`.
pub fn generator_matrix(
    members: &[Field2D],
    tendencies: &[Field2D],
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    if members.len() != tendencies.len() {
        return Err(Error::shape(
            format!("{} tendencies", members.len()),
            tendencies.len(),
        ));
    }
    let feats = KernelFeatures::new(members, spec)?;
    for t in tendencies {
        members[0].ensure_same_grid(t)?;
    }
    let tend = feats.tendency_features(tendencies);
    let p = feats.len();
    let x = &feats.fields;
    let mut m = DMatrix::zeros(p, p);
    match spec.family {
        KernelFamily::Empirical => {
            for i in 0..p {
                for j in 0..p {
                    m[(i, j)] = tend[j].dot(&x[i]);
                }
            }
        }
        KernelFamily::Gaussian => {
            let l2 = spec.ell_g * spec.ell_g;
            for i in 0..p {
                for j in 0..p {
                    if i == j {
                        continue;
                    }
                    let diff = x[i].sub(&x[j]);
                    let proj = tend[j].dot(&diff);
                    m[(i, j)] = -2.0 / l2 * proj * (-diff.norm_sq() / l2).exp();
                }
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator matrix"));
    }
    Ok(m)
}

/// `k(x, X_i)` for every member `i`.
pub fn kernel_vector(new_member: &Field2D, members: &[Field2D], spec: &KernelSpec) -> Result<DVector<f64>> {
    let feats = KernelFeatures::new(members, spec)?;
    kernel_vector_from_features(new_member, &feats)
}

pub fn kernel_vector_from_features(new_member: &Field2D, feats: &KernelFeatures) -> Result<DVector<f64>> {
    let x = feats.feature(new_member);
    let mut out = DVector::zeros(feats.len());
    for (i, f) in feats.fields.iter().enumerate() {
        out[i] = kernel_eval(&x, f, &feats.spec)?;
    }
    Ok(out)
}

pub use crate::linalg::pinv;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldKind, Grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(10, 14, 1.0).unwrap()
    }

    fn random_fields(n: usize, seed: u64, amp: f64) -> Vec<Field2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let vals = (0..grid().len()).map(|_| amp * rng.random_range(-1.0..1.0)).collect();
                Field2D::from_values(grid(), FieldKind::PotentialVorticity, vals).unwrap()
            })
            .collect()
    }

    #[test]
    fn gaussian_self_similarity_is_one() {
        let f = &random_fields(1, 1, 1.0)[0];
        assert_eq!(kernel_eval(f, f, &KernelSpec::gaussian(1.0)).unwrap(), 1.0);
    }

    #[test]
    fn empirical_constant_field_gives_area_times_square() {
        let c = 0.7;
        let f = Field2D::from_fn(grid(), FieldKind::PotentialVorticity, |_, _| c);
        let v = kernel_eval(&f, &f, &KernelSpec::empirical()).unwrap();
        assert!((v - 2.0 * c * c).abs() < 1e-12);
    }

    #[test]
    fn empirical_matches_double_loop_quadrature() {
        let fs = random_fields(2, 2, 1.0);
        let g = grid();
        let mut naive = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let wx = if i == 0 || i == g.nx - 1 { 0.5 } else { 1.0 };
                let wy = if j == 0 || j == g.ny - 1 { 0.5 } else { 1.0 };
                naive += wx * wy * g.dx() * g.dy() * fs[0].at(i, j) * fs[1].at(i, j);
            }
        }
        let v = kernel_eval(&fs[0], &fs[1], &KernelSpec::empirical()).unwrap();
        assert!((v - naive).abs() < 1e-13);
    }

    #[test]
    fn duplicate_member_is_rescued_by_jitter() {
        let f = random_fields(1, 3, 1.0).remove(0);
        let gram = gram_matrix(&[f.clone(), f.clone()], &KernelSpec::empirical()).unwrap();
        let s = f.norm_sq();
        for v in gram.k.iter() {
            assert!((v - s).abs() < 1e-12 * s);
        }
        assert!(gram.epsilon > 0.0);
        let x = gram.solve(&DVector::from_vec(vec![1.0, 2.0]));
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gaussian_gram_has_unit_diagonal_and_is_psd() {
        let fs = random_fields(12, 4, 0.3);
        let gram = gram_matrix(&fs, &KernelSpec::gaussian(1.0)).unwrap();
        for i in 0..12 {
            assert_eq!(gram.k[(i, i)], 1.0);
        }
        let lmax = gram.eigenvalues().max();
        assert!(gram.eigenvalues().min() >= -1e-12 * lmax);
        let back = &gram.k_sqrt * &gram.k_sqrt;
        assert!((back - &gram.k).norm() < 1e-8 * gram.k.norm());
    }

    #[test]
    fn zero_tendencies_give_zero_generator() {
        let fs = random_fields(5, 5, 1.0);
        let zeros: Vec<Field2D> = fs.iter().map(|f| Field2D::zeros(f.grid, f.kind)).collect();
        for spec in [KernelSpec::empirical(), KernelSpec::gaussian(1.0)] {
            let m = generator_matrix(&fs, &zeros, &spec).unwrap();
            assert_eq!(m.norm(), 0.0);
        }
    }

    #[test]
    fn gaussian_generator_diagonal_vanishes() {
        let fs = random_fields(5, 6, 0.2);
        let ts = random_fields(5, 7, 1.0);
        let m = generator_matrix(&fs, &ts, &KernelSpec::gaussian(1.0)).unwrap();
        for i in 0..5 {
            assert_eq!(m[(i, i)], 0.0);
        }
        assert!(m.norm() > 0.0);
    }

    #[test]
    fn kernel_vector_of_member_is_gram_column() {
        let fs = random_fields(6, 8, 0.2);
        for spec in [KernelSpec::empirical(), KernelSpec::gaussian(1.0)] {
            let gram = gram_matrix(&fs, &spec).unwrap();
            let v = kernel_vector(&fs[3], &fs, &spec).unwrap();
            assert_eq!(v, gram.k.column(3).into_owned());
        }
    }

    #[test]
    fn gaussian_kernel_vector_vanishes_far_away() {
        let fs = random_fields(4, 9, 0.2);
        let far = Field2D::from_fn(grid(), FieldKind::PotentialVorticity, |_, _| 1e3);
        let v = kernel_vector(&far, &fs, &KernelSpec::gaussian(1.0)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kernel_vector_matches_naive_loop() {
        let fs = random_fields(5, 10, 0.3);
        let x = random_fields(1, 11, 0.3).remove(0);
        let spec = KernelSpec::gaussian(0.8);
        let v = kernel_vector(&x, &fs, &spec).unwrap();
        let g = grid();
        for (i, f) in fs.iter().enumerate() {
            let mut d2 = 0.0;
            for jj in 0..g.ny {
                for ii in 0..g.nx {
                    let d = x.at(ii, jj) - f.at(ii, jj);
                    d2 += g.weight(ii, jj) * d * d;
                }
            }
            let expect = (-d2 / 0.64).exp();
            assert!((v[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn centred_empirical_gram_is_anomaly_covariance() {
        let fs = random_fields(6, 12, 1.0);
        let spec = KernelSpec {
            center_anomalies: true,
            ..KernelSpec::empirical()
        };
        let gram = gram_matrix(&fs, &spec).unwrap();
        // rows of a centred Gram matrix sum to zero
        for i in 0..6 {
            let s: f64 = gram.k.row(i).iter().sum();
            assert!(s.abs() < 1e-12 * gram.k.norm());
        }
        let mean = ensemble_mean(&fs);
        let expect = fs[0].sub(&mean).dot(&fs[1].sub(&mean)) / 5.0;
        assert!((gram.k[(0, 1)] - expect).abs() < 1e-12);
    }

    #[test]
    fn rejects_single_member() {
        let fs = random_fields(1, 13, 1.0);
        assert!(gram_matrix(&fs, &KernelSpec::empirical()).is_err());
    }
}
