mod common;

use common::{bumped_state, small_params};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkhs_ensemble::assimilation::{
    best_constant_coefficients, build_r, da_error_curves, enoi_cost_direct, enoi_solve, localization,
    synthesize_observations, EnoiSystem, ObservationSetup, SwathGeometry,
};
use rkhs_ensemble::ensemble::{spin_up_and_record, EnsembleRole, EnsembleSet};
use rkhs_ensemble::qg::QgModel;

fn ensembles() -> (EnsembleSet, EnsembleSet) {
    let model = QgModel::new(small_params(1e-4)).unwrap();
    let train: Vec<_> = (0..8).map(|j| bumped_state(&model, j, 0.05 + 0.01 * j as f64)).collect();
    let test: Vec<_> = (0..2).map(|j| bumped_state(&model, j + 3, 0.07)).collect();
    let tr = spin_up_and_record(&model, &train, 0.0, 0.12, 0.01, 1, EnsembleRole::Training).unwrap();
    let te = spin_up_and_record(&model, &test, 0.0, 0.12, 0.01, 2, EnsembleRole::Test).unwrap();
    (tr, te)
}

fn setup() -> ObservationSetup {
    ObservationSetup::default()
}

#[test]
fn swaths_cover_interior_rows_of_two_columns() {
    let (tr, _) = ensembles();
    let g = tr.members[0].states[0].grid;
    let geom = SwathGeometry::new(&g, &setup()).unwrap();
    assert_eq!(geom.m(), 2 * (g.ny - 2));
    assert!(geom.locations.iter().all(|&(_, y)| y > g.y(0) && y < g.y(g.ny - 1)));
    let xs: Vec<f64> = geom.locations.iter().map(|l| l.0).collect();
    assert!(xs[0] < xs[xs.len() - 1]);
}

#[test]
fn localisation_is_unit_diagonal_and_decays() {
    let (tr, _) = ensembles();
    let g = tr.members[0].states[0].grid;
    let geom = SwathGeometry::new(&g, &setup()).unwrap();
    let loc = localization(&geom, 0.05);
    for i in 0..geom.m() {
        assert_eq!(loc[(i, i)], 1.0);
    }
    assert!(loc[(0, 1)] > loc[(0, 2)]);
    assert!((&loc - loc.transpose()).amax() == 0.0);
}

#[test]
fn normal_equations_match_direct_cost_and_gradient() {
    let (tr, te) = ensembles();
    let g = tr.members[0].states[0].grid;
    let s = setup();
    let geom = SwathGeometry::new(&g, &s).unwrap();
    let r = build_r(&tr, &geom, &s).unwrap();
    let obs = synthesize_observations(&te.members[0], &geom, &s, 0);
    let sys = EnoiSystem::new(&obs, &tr, &geom, &r, s.alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let beta = DVector::from_fn(tr.p(), |_, _| rng.random_range(-0.5..0.5));
    let direct = enoi_cost_direct(&beta, &obs, &tr, &geom, &r, s.alpha);
    assert!((sys.cost(&beta) - direct).abs() < 1e-8 * direct.abs());

    // central differences of the direct cost
    let grad = sys.gradient(&beta);
    let h = 1e-5;
    let fd = DVector::from_fn(tr.p(), |i, _| {
        let mut bp = beta.clone();
        let mut bm = beta.clone();
        bp[i] += h;
        bm[i] -= h;
        (enoi_cost_direct(&bp, &obs, &tr, &geom, &r, s.alpha) - enoi_cost_direct(&bm, &obs, &tr, &geom, &r, s.alpha))
            / (2.0 * h)
    });
    assert!((&grad - &fd).norm() < 1e-6 * grad.norm(), "{} vs {}", grad, fd);
}

#[test]
fn solution_is_a_stationary_minimum() {
    let (tr, te) = ensembles();
    let g = tr.members[0].states[0].grid;
    let s = setup();
    let geom = SwathGeometry::new(&g, &s).unwrap();
    let r = build_r(&tr, &geom, &s).unwrap();
    let obs = synthesize_observations(&te.members[1], &geom, &s, 1);
    let sys = EnoiSystem::new(&obs, &tr, &geom, &r, s.alpha);
    let eig = nalgebra::SymmetricEigen::new(sys.hessian.clone());
    assert!(eig.eigenvalues.min() >= s.alpha * s.alpha * (1.0 - 1e-10));
    let beta = enoi_solve(&obs, &tr, &geom, &r, s.alpha).unwrap();
    assert!(sys.gradient(&beta).norm() < 1e-8 * sys.rhs.norm());
    let j0 = sys.cost(&beta);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let d = DVector::from_fn(tr.p(), |_, _| rng.random_range(-1e-3..1e-3));
        assert!(sys.cost(&(&beta + d)) >= j0);
    }
}

#[test]
fn observation_noise_is_reproducible_per_stream() {
    let (tr, te) = ensembles();
    let g = tr.members[0].states[0].grid;
    let s = setup();
    let geom = SwathGeometry::new(&g, &s).unwrap();
    let a = synthesize_observations(&te.members[0], &geom, &s, 3);
    let b = synthesize_observations(&te.members[0], &geom, &s, 3);
    let c = synthesize_observations(&te.members[0], &geom, &s, 4);
    assert_eq!(a, b);
    assert_ne!(a.values, c.values);
    assert_eq!(a.times.len(), s.obs_times.len());
}

#[test]
fn best_constant_recovers_a_training_member() {
    let (tr, _) = ensembles();
    let s = setup();
    let beta = best_constant_coefficients(&tr.members[2], &tr, &s.obs_times);
    let mut e = DVector::zeros(tr.p());
    e[2] = 1.0;
    assert!((beta - e).amax() < 1e-6);
}

#[test]
fn da_curves_are_finite_and_best_constant_beats_mean_on_window() {
    let (tr, te) = ensembles();
    let curves = da_error_curves(&te, &tr, &setup(), 0.06).unwrap();
    assert_eq!(curves.times.len(), 13);
    for s in [&curves.time_series, &curves.single_time, &curves.best_constant, &curves.ensemble_mean] {
        assert!(s.mean.iter().chain(&s.std).all(|v| v.is_finite() && *v >= 0.0));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(avg(&curves.best_constant.mean) <= avg(&curves.ensemble_mean.mean));
}

#[test]
fn single_time_outside_window_is_rejected() {
    let (tr, te) = ensembles();
    assert!(da_error_curves(&te, &tr, &setup(), 0.065).is_err());
}
