//! Constant-coefficient kernel regression of new trajectories on the
//! training ensemble, its Lyapunov-filtered variant and the error curves.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::ensemble::EnsembleSet;
use crate::error::{Error, Result};
use crate::field::{combine, Field2D, Grid};
use crate::kernels::{kernel_vector_from_features, GramSystem, KernelFamily, KernelFeatures};
use crate::koopman::KoopmanSpectrum;
use crate::linalg;
use crate::lyapunov::lyapunov_time;

pub const PINV_TOL_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionCoefficients {
    pub beta: DVector<f64>,
    pub family: KernelFamily,
    pub anchor_time: f64,
}

/// `beta = (K + eps I)^{-1} k(x0, X_0)`.
pub fn regression_coefficients(
    new_q0: &Field2D,
    feats: &KernelFeatures,
    gram: &GramSystem,
) -> Result<ReconstructionCoefficients> {
    if feats.len() != gram.p() {
        return Err(Error::shape(format!("{} members", gram.p()), feats.len()));
    }
    let kv = kernel_vector_from_features(new_q0, feats)?;
    let beta = gram.solve(&kv);
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression coefficients"));
    }
    Ok(ReconstructionCoefficients {
        beta,
        family: feats.spec.family,
        anchor_time: 0.0,
    })
}

/// `sum_i beta_i X_t^(i)` at the stored time nearest `t`.
pub fn reconstruct(beta: &DVector<f64>, ensemble: &EnsembleSet, t: f64) -> Result<Field2D> {
    if beta.len() != ensemble.p() {
        return Err(Error::shape(format!("{} coefficients", ensemble.p()), beta.len()));
    }
    let k = ensemble.time_index(t);
    Ok(combine(beta.as_slice(), &ensemble.states_at(k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FilterMode {
    /// `beta~ = P beta`
    Literal,
    /// `beta~ = beta_bar + P (beta - beta_bar)`, `beta_bar = 1/p`.
    MeanAnchored,
}

impl FilterMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "literal" => Some(FilterMode::Literal),
            "mean_anchored" => Some(FilterMode::MeanAnchored),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterMode::Literal => "literal",
            FilterMode::MeanAnchored => "mean_anchored",
        }
    }
}

/// Modes whose Lyapunov time has not yet elapsed at `t` (`T_l >= t`).
pub fn retained_modes(spec: &KoopmanSpectrum, t: f64, c: f64) -> Vec<bool> {
    spec.omegas
        .iter()
        .map(|w| lyapunov_time(w.abs(), c) >= t)
        .collect()
}

/// Projector `K~^+ K~` onto the span of the retained eigenfunctions.
pub fn filter_projector(spec: &KoopmanSpectrum, t: f64, c: f64) -> DMatrix<f64> {
    let keep = retained_modes(spec, t, c);
    let kt = spec.kernel_expansion(|l| keep[l]).map(|z| z.re);
    let kt = linalg::symmetrize(&kt);
    linalg::pinv(&kt, PINV_TOL_REL) * kt
}

pub fn filtered_coefficients(
    beta: &DVector<f64>,
    spec: &KoopmanSpectrum,
    t: f64,
    c: f64,
    mode: FilterMode,
) -> DVector<f64> {
    let proj = filter_projector(spec, t, c);
    match mode {
        FilterMode::Literal => &proj * beta,
        FilterMode::MeanAnchored => {
            let bar = DVector::from_element(beta.len(), 1.0 / beta.len() as f64);
            &bar + &proj * (beta - &bar)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorOptions {
    pub c: f64,
    pub filter_mode: FilterMode,
}

impl Default for ErrorOptions {
    fn default() -> Self {
        ErrorOptions {
            c: crate::lyapunov::DEFAULT_AMPLIFICATION,
            filter_mode: FilterMode::MeanAnchored,
        }
    }
}

/// Mean and standard deviation over test members.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stat {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurves {
    pub times: Vec<f64>,
    pub plain: Stat,
    pub filtered: Stat,
    pub ensemble_mean: Stat,
    pub projection: Stat,
}

/// Weighted least-squares projector onto the span of the members at one
/// time, kept as an orthonormal basis of `W^{1/2} X_t`.
pub struct SpanProjector {
    sqrt_w: Vec<f64>,
    q: DMatrix<f64>,
}

impl SpanProjector {
    pub fn new(states: &[&Field2D]) -> Self {
        let grid = states[0].grid;
        let sqrt_w = sqrt_weights(&grid);
        let n = grid.len();
        let x = DMatrix::from_fn(n, states.len(), |r, c| sqrt_w[r] * states[c].values[r]);
        let q = x.qr().q();
        SpanProjector { sqrt_w, q }
    }

    /// `min_beta |sum beta_i X_i - f|^2`
    pub fn residual_sq(&self, f: &Field2D) -> f64 {
        let w = DVector::from_iterator(f.values.len(), f.values.iter().zip(&self.sqrt_w).map(|(v, s)| v * s));
        let coef = self.q.tr_mul(&w);
        let r = &w - &self.q * coef;
        r.norm_squared()
    }
}

fn sqrt_weights(grid: &Grid) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            out[grid.idx(i, j)] = grid.weight(i, j).sqrt();
        }
    }
    out
}

pub fn stats_over_members(per_member: &[Vec<f64>], nt: usize) -> Stat {
    let n = per_member.len() as f64;
    let mut out = Stat {
        mean: vec![0.0; nt],
        std: vec![0.0; nt],
    };
    for k in 0..nt {
        let mean = per_member.iter().map(|e| e[k]).sum::<f64>() / n;
        let var = if per_member.len() > 1 {
            per_member.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.mean[k] = mean;
        out.std[k] = var.sqrt();
    }
    out
}

/// Squared L2 errors of the plain, filtered, ensemble-mean and optimal
/// projection estimates of each test trajectory, summarised per time.
pub fn error_curves(
    test: &EnsembleSet,
    training: &EnsembleSet,
    feats: &KernelFeatures,
    gram: &GramSystem,
    spec: &KoopmanSpectrum,
    opts: &ErrorOptions,
) -> Result<ErrorCurves> {
    if test.times() != training.times() {
        return Err(Error::InvalidParam("test and training ensembles have different output times".into()));
    }
    if test.members[0].states[0].grid != training.members[0].states[0].grid {
        return Err(Error::shape("training grid", "different test grid"));
    }
    let times = training.times().to_vec();
    let nt = times.len();
    let p = training.p();

    let projectors: Vec<SpanProjector> = (0..nt)
        .into_par_iter()
        .map(|k| SpanProjector::new(&training.states_at(k)))
        .collect();
    let filters: Vec<DMatrix<f64>> = times.iter().map(|&t| filter_projector(spec, t, opts.c)).collect();
    let means: Vec<Field2D> = (0..nt)
        .map(|k| combine(&vec![1.0 / p as f64; p], &training.states_at(k)))
        .collect();
    let bar = DVector::from_element(p, 1.0 / p as f64);

    type Row = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let rows: Vec<Result<Row>> = test
        .members
        .par_iter()
        .map(|truth| {
            let beta = regression_coefficients(&truth.states[0], feats, gram)?.beta;
            let mut plain = vec![0.0; nt];
            let mut filt = vec![0.0; nt];
            let mut mean = vec![0.0; nt];
            let mut proj = vec![0.0; nt];
            for k in 0..nt {
                let x = &truth.states[k];
                let states = training.states_at(k);
                plain[k] = combine(beta.as_slice(), &states).dist_sq(x);
                let bf = match opts.filter_mode {
                    FilterMode::Literal => &filters[k] * &beta,
                    FilterMode::MeanAnchored => &bar + &filters[k] * (&beta - &bar),
                };
                filt[k] = combine(bf.as_slice(), &states).dist_sq(x);
                mean[k] = means[k].dist_sq(x);
                proj[k] = projectors[k].residual_sq(x);
            }
            Ok((plain, filt, mean, proj))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&Row) -> &Vec<f64>| rows.iter().map(|r| f(r).clone()).collect::<Vec<_>>();
    Ok(ErrorCurves {
        plain: stats_over_members(&col(|r| &r.0), nt),
        filtered: stats_over_members(&col(|r| &r.1), nt),
        ensemble_mean: stats_over_members(&col(|r| &r.2), nt),
        projection: stats_over_members(&col(|r| &r.3), nt),
        times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::EnsembleRole;
    use crate::field::FieldKind;
    use crate::kernels::{gram_from_features, KernelSpec};
    use crate::koopman::{assemble_generator, spectrum};
    use crate::qg::{ModelParams, Trajectory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(10, 12, 1.0).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng) -> Field2D {
        let vals = (0..grid().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Field2D::from_values(grid(), FieldKind::PotentialVorticity, vals).unwrap()
    }

    fn synthetic_set(p: usize, nt: usize, seed: u64) -> EnsembleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<Trajectory> = (0..p)
            .map(|_| Trajectory {
                times: (0..nt).map(|k| k as f64 * 0.1).collect(),
                states: (0..nt).map(|_| random_field(&mut rng)).collect(),
            })
            .collect();
        let initial_tendencies = (0..p).map(|_| random_field(&mut rng)).collect();
        EnsembleSet {
            members,
            initial_tendencies,
            seed,
            params: ModelParams::default(),
            role: EnsembleRole::Training,
            member_ids: (0..p).collect(),
        }
    }

    fn setup(set: &EnsembleSet, spec: KernelSpec) -> (KernelFeatures, GramSystem, KoopmanSpectrum) {
        let feats = KernelFeatures::new(&set.anchors(), &spec).unwrap();
        let gram = gram_from_features(&feats).unwrap();
        let m = crate::kernels::generator_matrix(&set.anchors(), &set.initial_tendencies, &spec).unwrap();
        let g = assemble_generator(&m, &gram).unwrap();
        let sp = spectrum(&g.skew, &gram).unwrap();
        (feats, gram, sp)
    }

    #[test]
    fn member_regresses_to_basis_vector() {
        let set = synthetic_set(6, 3, 1);
        for spec in [KernelSpec::empirical(), KernelSpec::gaussian(4.0)] {
            let (feats, gram, _) = setup(&set, spec);
            for i in 0..6 {
                let b = regression_coefficients(&set.members[i].states[0], &feats, &gram).unwrap();
                for (j, v) in b.beta.iter().enumerate() {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((v - e).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empirical_regression_matches_normal_equations() {
        let set = synthetic_set(5, 2, 2);
        let (feats, gram, _) = setup(&set, KernelSpec::empirical());
        let w = [0.3, -1.2, 0.0, 2.0, 0.7];
        let x = combine(&w, &set.states_at(0));
        let b = regression_coefficients(&x, &feats, &gram).unwrap();
        let rec = reconstruct(&b.beta, &set, 0.0).unwrap();
        // LS projection of something already in the span is itself
        assert!(rec.dist_sq(&x) < 1e-12 * x.norm_sq());
    }

    #[test]
    fn reconstruct_simple_combinations() {
        let set = synthetic_set(4, 3, 3);
        let mut e = DVector::zeros(4);
        e[2] = 1.0;
        assert_eq!(reconstruct(&e, &set, 0.1).unwrap().values, set.members[2].states[1].values);
        let half = DVector::from_vec(vec![0.5, 0.5, 0.0, 0.0]);
        let mid = reconstruct(&half, &set, 0.2).unwrap();
        for (k, v) in mid.values.iter().enumerate() {
            let expect = 0.5 * set.members[0].states[2].values[k] + 0.5 * set.members[1].states[2].values[k];
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn filter_at_zero_keeps_beta_and_projector_is_idempotent() {
        let set = synthetic_set(7, 2, 4);
        let (_, _, sp) = setup(&set, KernelSpec::empirical());
        let beta = DVector::from_fn(7, |i, _| (i as f64 * 0.7).sin());
        let b0 = filtered_coefficients(&beta, &sp, 0.0, 1e3, FilterMode::Literal);
        assert!((b0 - &beta).amax() < 1e-8);
        let wmax = sp.max_abs_omega();
        for t in [0.5 * 6.9 / wmax, 1.2 * 6.9 / wmax] {
            let p = filter_projector(&sp, t, 1e3);
            assert!((&p * &p - &p).amax() < 1e-10);
            assert!((&p - p.transpose()).amax() < 1e-10);
        }
    }

    #[test]
    fn long_time_filter_keeps_only_zero_modes() {
        let set = synthetic_set(5, 2, 5);
        let (_, _, sp) = setup(&set, KernelSpec::empirical());
        let keep = retained_modes(&sp, 1e30, 1e3);
        for (l, k) in keep.iter().enumerate() {
            assert_eq!(*k, sp.omegas[l] == 0.0);
        }
    }

    #[test]
    fn error_curve_baselines() {
        let training = synthetic_set(5, 3, 6);
        let mut test = synthetic_set(3, 3, 7);
        test.members[0] = training.members[1].clone();
        let (feats, gram, sp) = setup(&training, KernelSpec::empirical());
        let ec = error_curves(&test, &training, &feats, &gram, &sp, &ErrorOptions::default()).unwrap();
        let mean0 = combine(&[0.2; 5], &training.states_at(0));
        let expect: f64 = test.members.iter().map(|m| m.states[0].dist_sq(&mean0)).sum::<f64>() / 3.0;
        assert!((ec.ensemble_mean.mean[0] - expect).abs() < 1e-12 * expect);
        for k in 0..3 {
            let pr = ec.projection.mean[k];
            for other in [&ec.plain, &ec.filtered, &ec.ensemble_mean] {
                assert!(pr <= other.mean[k] * (1.0 + 1e-9));
            }
        }
    }

    #[test]
    fn projection_of_member_is_zero() {
        let set = synthetic_set(4, 1, 8);
        let pr = SpanProjector::new(&set.states_at(0));
        let f = &set.members[3].states[0];
        assert!(pr.residual_sq(f) < 1e-24 * f.norm_sq().max(1.0) * 1e6);
    }
}
