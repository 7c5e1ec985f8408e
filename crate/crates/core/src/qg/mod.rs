//! Dimensionless barotropic quasi-geostrophic double-gyre model.
//!
//! ```text
//! dq/dt + J(psi, q) = f - (delta/L)^5 lap^2 omega
//! lap psi = omega,   q = Ro * omega + y
//! ```
//! on `[0, L] x [-L, L]` with `psi = omega = 0` and `q = y` on the boundary.

mod arakawa;
mod model;
mod poisson;

pub use arakawa::arakawa_jacobian;
pub use model::{
    Diagnosed, Forcing, ModelParams, QgModel, StabilityReport, Trajectory, RK4_REAL_AXIS_LIMIT,
};
pub use poisson::{laplacian, laplacian_eigenvalue, PoissonSolver};
