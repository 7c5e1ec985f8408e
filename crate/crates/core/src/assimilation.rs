//! Ensemble optimal interpolation with constant-in-time coefficients against
//! synthetic observations along vertical swaths.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ensemble::EnsembleSet;
use crate::error::{Error, Result};
use crate::field::{combine, Field2D, Grid};
use crate::forecast::{Stat, PINV_TOL_REL};
use crate::linalg;
use crate::qg::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSetup {
    /// Swath x-positions, snapped to the nearest grid column.
    pub columns: Vec<f64>,
    pub obs_times: Vec<f64>,
    pub noise_frac: f64,
    pub ell_loc: f64,
    pub alpha: f64,
    pub seed: u64,
    pub jitter_rel: f64,
}

impl Default for ObservationSetup {
    fn default() -> Self {
        ObservationSetup {
            columns: vec![0.3, 0.7],
            obs_times: (0..=12).map(|k| k as f64 * 0.01).collect(),
            noise_frac: 0.10,
            ell_loc: 0.05,
            alpha: 10.0,
            seed: 7,
            jitter_rel: 1e-10,
        }
    }
}

impl ObservationSetup {
    pub fn single_time(&self, t: f64) -> Self {
        ObservationSetup {
            obs_times: vec![t],
            ..self.clone()
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::InvalidParam("no swath columns".into()));
        }
        if let Some(c) = self.columns.iter().find(|&&c| !(0.0..=grid.length).contains(&c)) {
            return Err(Error::InvalidParam(format!("swath column x={c} outside [0, {}]", grid.length)));
        }
        if self.obs_times.is_empty() {
            return Err(Error::InvalidParam("no observation times".into()));
        }
        if !(self.noise_frac >= 0.0) {
            return Err(Error::InvalidParam(format!("noise_frac must be >= 0, got {}", self.noise_frac)));
        }
        if !(self.ell_loc > 0.0) {
            return Err(Error::InvalidParam(format!("ell_loc must be > 0, got {}", self.ell_loc)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidParam(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Sample points: interior rows of each swath column, south to north, west
/// column first. Boundary rows carry the fixed `q = y` and no information.
#[derive(Debug, Clone, PartialEq)]
pub struct SwathGeometry {
    pub indices: Vec<usize>,
    pub locations: Vec<(f64, f64)>,
}

impl SwathGeometry {
    pub fn new(grid: &Grid, setup: &ObservationSetup) -> Result<Self> {
        setup.validate(grid)?;
        let mut cols: Vec<usize> = setup
            .columns
            .iter()
            .map(|&x| ((x / grid.dx()).round() as usize).min(grid.nx - 1))
            .collect();
        cols.sort_unstable();
        cols.dedup();
        let mut indices = Vec::new();
        let mut locations = Vec::new();
        for &i in &cols {
            if i == 0 || i == grid.nx - 1 {
                return Err(Error::InvalidParam(format!("swath column {i} lies on the basin boundary")));
            }
            for j in 1..grid.ny - 1 {
                indices.push(grid.idx(i, j));
                locations.push((grid.x(i), grid.y(j)));
            }
        }
        Ok(SwathGeometry { indices, locations })
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn observe(&self, field: &Field2D) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.indices.iter().map(|&k| field.values[k]))
    }

    /// `H_t`: column `i` is the observed member `i`.
    pub fn member_matrix(&self, states: &[&Field2D]) -> DMatrix<f64> {
        DMatrix::from_fn(self.m(), states.len(), |r, c| states[c].values[self.indices[r]])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub locations: Vec<(f64, f64)>,
    pub sigma: f64,
}

/// Noisy swath samples of `truth`; `stream` selects an independent noise
/// sequence for the same seed.
pub fn synthesize_observations(
    truth: &Trajectory,
    geom: &SwathGeometry,
    setup: &ObservationSetup,
    stream: u64,
) -> ObservationSeries {
    let clean: Vec<DVector<f64>> = setup
        .obs_times
        .iter()
        .map(|&t| geom.observe(truth.at_time(t)))
        .collect();
    let n: usize = clean.iter().map(|v| v.len()).sum();
    let rms = (clean.iter().map(|v| v.norm_squared()).sum::<f64>() / n as f64).sqrt();
    let sigma = setup.noise_frac * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(stream);
    let values = clean
        .into_iter()
        .map(|v| {
            v.map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + sigma * z
            })
        })
        .collect();
    ObservationSeries {
        times: setup.obs_times.clone(),
        values,
        locations: geom.locations.clone(),
        sigma,
    }
}

#[derive(Debug, Clone)]
pub struct ObsCovariance {
    pub r: DMatrix<f64>,
    pub epsilon: f64,
    chol: Cholesky<f64, Dyn>,
}

impl ObsCovariance {
    pub fn from_matrix(r: DMatrix<f64>, jitter_rel: f64) -> Result<Self> {
        let (chol, epsilon) = linalg::jittered_cholesky(&r, jitter_rel)?;
        Ok(ObsCovariance { r, epsilon, chol })
    }

    /// `R + sigma^2 I`: the covariance of observations carrying white noise
    /// of standard deviation `sigma`.
    pub fn with_noise(&self, sigma: f64, jitter_rel: f64) -> Result<Self> {
        let n = self.r.nrows();
        Self::from_matrix(&self.r + DMatrix::identity(n, n) * (sigma * sigma), jitter_rel)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

/// Localisation weights `exp(-r_ij^2 / ell^2)`.
pub fn localization(geom: &SwathGeometry, ell: f64) -> DMatrix<f64> {
    let m = geom.m();
    DMatrix::from_fn(m, m, |a, b| {
        let (xa, ya) = geom.locations[a];
        let (xb, yb) = geom.locations[b];
        let r2 = (xa - xb).powi(2) + (ya - yb).powi(2);
        (-r2 / (ell * ell)).exp()
    })
}

/// Member covariance of the observed vectors, averaged over `setup.obs_times`
/// and tapered by the localisation weights.
pub fn build_r(training: &EnsembleSet, geom: &SwathGeometry, setup: &ObservationSetup) -> Result<ObsCovariance> {
    let p = training.p();
    let m = geom.m();
    let mut cbar = DMatrix::zeros(m, m);
    for &t in &setup.obs_times {
        let h = geom.member_matrix(&training.states_at(training.time_index(t)));
        let mean = h.column_mean();
        let mut a = h;
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        cbar += &a * a.transpose() / (p as f64 - 1.0);
    }
    cbar /= setup.obs_times.len() as f64;
    let r = cbar.component_mul(&localization(geom, setup.ell_loc));
    ObsCovariance::from_matrix(linalg::symmetrize(&r), setup.jitter_rel)
}

/// The quadratic cost `J(beta) = 1/2 mean_t |H_t beta - y_t|^2_{R^-1} +
/// alpha^2/2 |beta - beta_bar|^2` in normal-equation form
/// `J = 1/2 b^T A b - rhs^T b + const`.
#[derive(Debug, Clone)]
pub struct EnoiSystem {
    pub hessian: DMatrix<f64>,
    pub rhs: DVector<f64>,
    constant: f64,
}

impl EnoiSystem {
    pub fn new(obs: &ObservationSeries, training: &EnsembleSet, geom: &SwathGeometry, r: &ObsCovariance, alpha: f64) -> Self {
        let p = training.p();
        let nt = obs.times.len() as f64;
        let bar = DVector::from_element(p, 1.0 / p as f64);
        let mut hessian = DMatrix::identity(p, p) * (alpha * alpha);
        let mut rhs = &bar * (alpha * alpha);
        let mut constant = 0.5 * alpha * alpha * bar.norm_squared();
        for (t, y) in obs.times.iter().zip(&obs.values) {
            let h = geom.member_matrix(&training.states_at(training.time_index(*t)));
            let rih = r.solve(&h);
            let riy = r.solve_vec(y);
            hessian += h.tr_mul(&rih) / nt;
            rhs += h.tr_mul(&riy) / nt;
            constant += 0.5 * y.dot(&riy) / nt;
        }
        EnoiSystem {
            hessian: linalg::symmetrize(&hessian),
            rhs,
            constant,
        }
    }

    pub fn cost(&self, beta: &DVector<f64>) -> f64 {
        0.5 * beta.dot(&(&self.hessian * beta)) - self.rhs.dot(beta) + self.constant
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.hessian * beta - &self.rhs
    }

    pub fn solve(&self) -> Result<DVector<f64>> {
        let chol = Cholesky::new(self.hessian.clone()).ok_or_else(|| {
            let (vals, _) = linalg::sym_eigen(&self.hessian);
            Error::Factorization(format!(
                "EnOI normal matrix is not positive definite; eigenvalue range [{:e}, {:e}]",
                vals.min(),
                vals.max()
            ))
        })?;
        Ok(chol.solve(&self.rhs))
    }
}

/// Cost evaluated directly from its definition, for checking [`EnoiSystem`].
pub fn enoi_cost_direct(
    beta: &DVector<f64>,
    obs: &ObservationSeries,
    training: &EnsembleSet,
    geom: &SwathGeometry,
    r: &ObsCovariance,
    alpha: f64,
) -> f64 {
    let p = training.p();
    let mut misfit = 0.0;
    for (t, y) in obs.times.iter().zip(&obs.values) {
        let x = combine(beta.as_slice(), &training.states_at(training.time_index(*t)));
        let d = geom.observe(&x) - y;
        misfit += d.dot(&r.solve_vec(&d));
    }
    misfit /= obs.times.len() as f64;
    let reg: f64 = beta.iter().map(|b| (b - 1.0 / p as f64).powi(2)).sum();
    0.5 * misfit + 0.5 * alpha * alpha * reg
}

pub fn enoi_solve(
    obs: &ObservationSeries,
    training: &EnsembleSet,
    geom: &SwathGeometry,
    r: &ObsCovariance,
    alpha: f64,
) -> Result<DVector<f64>> {
    EnoiSystem::new(obs, training, geom, r, alpha).solve()
}

/// Least-squares constant coefficients over `times`:
/// `pinv(mean_t G_t) mean_t g_t` with the member Gram `G_t` and
/// `g_t,i = <X_t^(i), truth_t>`.
pub fn best_constant_coefficients(truth: &Trajectory, training: &EnsembleSet, times: &[f64]) -> DVector<f64> {
    let p = training.p();
    let mut g = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for &t in times {
        let states = training.states_at(training.time_index(t));
        let x = truth.at_time(t);
        for i in 0..p {
            rhs[i] += states[i].dot(x);
            for j in i..p {
                let v = states[i].dot(states[j]);
                g[(i, j)] += v;
                if j != i {
                    g[(j, i)] += v;
                }
            }
        }
    }
    let n = times.len() as f64;
    linalg::pinv(&(g / n), PINV_TOL_REL) * (rhs / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaCurves {
    pub times: Vec<f64>,
    pub time_series: Stat,
    pub single_time: Stat,
    pub best_constant: Stat,
    pub ensemble_mean: Stat,
}

/// Per test member: synthesise swath observations of its trajectory, solve
/// the time-series and single-time EnOI problems and compare against the
/// best constant coefficients and the ensemble mean. Both problems share
/// the time-averaged covariance plus the noise variance of the observations.
pub fn da_error_curves(
    test: &EnsembleSet,
    training: &EnsembleSet,
    setup: &ObservationSetup,
    single_time: f64,
) -> Result<DaCurves> {
    let grid = training.members[0].states[0].grid;
    let geom = SwathGeometry::new(&grid, setup)?;
    let r_clean = build_r(training, &geom, setup)?;
    let times = training.times().to_vec();
    let nt = times.len();
    let p = training.p();
    let mean: Vec<Field2D> = (0..nt)
        .map(|k| combine(&vec![1.0 / p as f64; p], &training.states_at(k)))
        .collect();

    type Row = [Vec<f64>; 4];
    let rows: Vec<Result<Row>> = test
        .members
        .par_iter()
        .zip(test.member_ids.par_iter())
        .map(|(truth, &id)| {
            let obs = synthesize_observations(truth, &geom, setup, id as u64);
            let r = r_clean.with_noise(obs.sigma, setup.jitter_rel)?;
            let b_ts = enoi_solve(&obs, training, &geom, &r, setup.alpha)?;
            let k_single = obs
                .times
                .iter()
                .position(|&t| (t - single_time).abs() < 1e-9)
                .ok_or_else(|| Error::InvalidParam(format!("single observation time {single_time} not among obs_times")))?;
            let obs_single = ObservationSeries {
                times: vec![obs.times[k_single]],
                values: vec![obs.values[k_single].clone()],
                locations: obs.locations.clone(),
                sigma: obs.sigma,
            };
            let b_single = enoi_solve(&obs_single, training, &geom, &r, setup.alpha)?;
            let b_best = best_constant_coefficients(truth, training, &setup.obs_times);
            let mut out: Row = Default::default();
            for v in out.iter_mut() {
                v.resize(nt, 0.0);
            }
            for k in 0..nt {
                let x = &truth.states[k];
                let states = training.states_at(k);
                out[0][k] = combine(b_ts.as_slice(), &states).dist_sq(x);
                out[1][k] = combine(b_single.as_slice(), &states).dist_sq(x);
                out[2][k] = combine(b_best.as_slice(), &states).dist_sq(x);
                out[3][k] = mean[k].dist_sq(x);
            }
            Ok(out)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let stat = |c: usize| {
        let per: Vec<Vec<f64>> = rows.iter().map(|r| r[c].clone()).collect();
        crate::forecast::stats_over_members(&per, nt)
    };
    Ok(DaCurves {
        time_series: stat(0),
        single_time: stat(1),
        best_constant: stat(2),
        ensemble_mean: stat(3),
        times,
    })
}
