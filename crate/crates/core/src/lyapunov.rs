//! Finite-time Lyapunov exponents from the ensemble generator: global
//! (singular values of the tangent linear), Koopman modal (KMLE) and the
//! plain modal rate `|omega|`, each with its Lyapunov time `ln C / sigma`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::kernels::GramSystem;
use crate::koopman::{KoopmanSpectrum, C64};

pub const DEFAULT_AMPLIFICATION: f64 = 1e3;
pub const DEFAULT_SIGMA_THRESHOLD: f64 = 1e-5;

/// `ln C / sigma`, infinite for `sigma = 0`.
pub fn lyapunov_time(sigma: f64, c: f64) -> f64 {
    if sigma == 0.0 {
        f64::INFINITY
    } else {
        c.ln() / sigma
    }
}

/// Singular values of `T` above `threshold`, descending.
pub fn global_spectrum(t: &DMatrix<f64>, threshold: f64) -> Vec<f64> {
    if t.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = t
        .clone()
        .singular_values()
        .iter()
        .copied()
        .filter(|&v| v > threshold)
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Scaling of the operator `L` used to whiten the eigenfunctions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmleConvention {
    /// `L = measure_scale (K + eps I)`, the same measure as `psi0`.
    Matched,
    /// `L = K + eps I` regardless of the measure.
    Unscaled,
}

/// `KMLE_l = |omega_l| * |L^{-1/2} psi_l|`.
pub fn kmle(spec: &KoopmanSpectrum, gram: &GramSystem, convention: KmleConvention) -> Result<Vec<f64>> {
    let scale = match convention {
        KmleConvention::Matched => spec.measure_scale,
        KmleConvention::Unscaled => 1.0,
    };
    let (_, inv_root) = gram.operator_roots(scale)?;
    let w = inv_root.map(|x| C64::new(x, 0.0)) * &spec.psi0;
    Ok(spec
        .omegas
        .iter()
        .enumerate()
        .map(|(l, om)| om.abs() * w.column(l).norm())
        .collect())
}

/// `|omega_l|` in spectrum order.
pub fn modal_sigma(spec: &KoopmanSpectrum) -> Vec<f64> {
    spec.omegas.iter().map(|w| w.abs()).collect()
}

#[derive(Debug, Clone)]
pub struct LyapunovReport {
    pub c: f64,
    pub global_sigmas: Vec<f64>,
    pub kmle_matched: Vec<f64>,
    pub kmle_unscaled: Vec<f64>,
    pub modal_sigmas: Vec<f64>,
    pub times_global: Vec<f64>,
    pub times_kmle: Vec<f64>,
    pub times_modal: Vec<f64>,
}

pub fn report(
    spec: &KoopmanSpectrum,
    gram: &GramSystem,
    tangent: &DMatrix<f64>,
    c: f64,
    threshold: f64,
) -> Result<LyapunovReport> {
    let global_sigmas = global_spectrum(tangent, threshold);
    let kmle_matched = kmle(spec, gram, KmleConvention::Matched)?;
    let kmle_unscaled = kmle(spec, gram, KmleConvention::Unscaled)?;
    let modal_sigmas = modal_sigma(spec);
    let times = |s: &[f64]| s.iter().map(|&v| lyapunov_time(v, c)).collect::<Vec<_>>();
    Ok(LyapunovReport {
        c,
        times_global: times(&global_sigmas),
        times_kmle: times(&kmle_matched),
        times_modal: times(&modal_sigmas),
        global_sigmas,
        kmle_matched,
        kmle_unscaled,
        modal_sigmas,
    })
}
