mod common;

use common::{bumped_state, rel_frob, small_params};
use nalgebra::DMatrix;
use rkhs_ensemble::kernels::{generator_matrix, kernel_eval, KernelSpec};
use rkhs_ensemble::qg::QgModel;

const TAU: f64 = 1e-5;

fn members(model: &QgModel, p: usize) -> Vec<rkhs_ensemble::Field2D> {
    (0..p).map(|j| bumped_state(model, j, 0.05 + 0.01 * j as f64)).collect()
}

/// One RK4 step of length tau for every member.
fn advanced(model: &QgModel, xs: &[rkhs_ensemble::Field2D]) -> Vec<rkhs_ensemble::Field2D> {
    xs.iter().map(|x| model.rk4_step(x).unwrap()).collect()
}

#[test]
fn empirical_generator_matches_time_difference_of_gram() {
    let model = QgModel::new(small_params(TAU)).unwrap();
    let xs = members(&model, 6);
    let tend: Vec<_> = xs.iter().map(|x| model.tendency(x).unwrap()).collect();
    let spec = KernelSpec::empirical();
    let m = generator_matrix(&xs, &tend, &spec).unwrap();

    let xt = advanced(&model, &xs);
    let p = xs.len();
    let fd = DMatrix::from_fn(p, p, |i, j| {
        (kernel_eval(&xt[j], &xs[i], &spec).unwrap() - kernel_eval(&xs[j], &xs[i], &spec).unwrap()) / TAU
    });
    let err = rel_frob(&m, &fd);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn gaussian_generator_matches_time_difference_of_kernel() {
    let model = QgModel::new(small_params(TAU)).unwrap();
    let xs = members(&model, 6);
    let tend: Vec<_> = xs.iter().map(|x| model.tendency(x).unwrap()).collect();
    let spec = KernelSpec::gaussian(0.3);
    let m = generator_matrix(&xs, &tend, &spec).unwrap();

    // the Gaussian expression carries the opposite sign of d/dtau k(X_i, X_j(tau))
    let xt = advanced(&model, &xs);
    let p = xs.len();
    let fd = DMatrix::from_fn(p, p, |i, j| {
        -(kernel_eval(&xs[i], &xt[j], &spec).unwrap() - kernel_eval(&xs[i], &xs[j], &spec).unwrap()) / TAU
    });
    for i in 0..p {
        assert_eq!(m[(i, i)], 0.0);
    }
    let err = rel_frob(&m, &fd);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn zero_tendencies_give_zero_generator() {
    let model = QgModel::new(small_params(1e-4)).unwrap();
    let xs = members(&model, 4);
    let zero: Vec<_> = xs.iter().map(|x| x.scaled(0.0)).collect();
    for spec in [KernelSpec::empirical(), KernelSpec::gaussian(1.0)] {
        let m = generator_matrix(&xs, &zero, &spec).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn mismatched_tendencies_are_rejected() {
    let model = QgModel::new(small_params(1e-4)).unwrap();
    let xs = members(&model, 4);
    let tend: Vec<_> = xs[..3].iter().map(|x| model.tendency(x).unwrap()).collect();
    assert!(generator_matrix(&xs, &tend, &KernelSpec::empirical()).is_err());
}
