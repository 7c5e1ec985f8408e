#![allow(dead_code)]

use rkhs_ensemble::qg::{Forcing, ModelParams, QgModel};
use rkhs_ensemble::{Field2D, FieldKind};
use std::f64::consts::PI;

pub fn small_params(dt: f64) -> ModelParams {
    ModelParams {
        nx: 16,
        ny: 32,
        dt,
        forcing: Forcing::Sine { amplitude: 1.0 },
        ..ModelParams::default()
    }
}

/// Rest state plus a smooth interior bump pattern indexed by `j`.
pub fn bumped_state(model: &QgModel, j: usize, amp: f64) -> Field2D {
    let g = model.grid();
    let (a, b) = (1 + j % 3, 1 + (j / 3) % 4);
    let phase = 0.37 * j as f64;
    let bump = Field2D::from_fn(g, FieldKind::PotentialVorticity, |x, y| {
        amp * (a as f64 * PI * x).sin() * (b as f64 * PI * y).sin() * (1.0 + 0.3 * (phase + 2.0 * PI * x).cos())
    });
    let mut q = model.rest_state();
    q.axpy(1.0, &bump);
    q
}

pub fn rel_frob(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
