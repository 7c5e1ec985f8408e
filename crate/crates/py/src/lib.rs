//! Python module `rkhs_ensemble`: the QG model, kernel/Koopman analysis and
//! the staged pipeline. Fields cross the boundary as flat lists, x fastest.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rkhs_ensemble::config::{RunConfig, Stage};
use rkhs_ensemble::forecast::{self, FilterMode};
use rkhs_ensemble::kernels::{self, KernelFamily, KernelSpec};
use rkhs_ensemble::koopman;
use rkhs_ensemble::lyapunov::{self, KmleConvention};
use rkhs_ensemble::qg::{self, ModelParams};
use rkhs_ensemble::{io, pipeline, Error, Field2D, FieldKind, Grid};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingPrerequisite { .. } => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config { .. } | Error::InvalidParam(_) | Error::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn field(grid: Grid, values: Vec<f64>) -> PyResult<Field2D> {
    Field2D::from_values(grid, FieldKind::PotentialVorticity, values).map_err(py_err)
}

fn kernel_spec(kernel: &str, ell_g: f64) -> PyResult<KernelSpec> {
    let spec = match KernelFamily::parse(kernel) {
        Some(KernelFamily::Empirical) => KernelSpec::empirical(),
        Some(KernelFamily::Gaussian) => KernelSpec::gaussian(ell_g),
        None => return Err(PyValueError::new_err(format!("unknown kernel `{kernel}`"))),
    };
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

/// Barotropic QG double-gyre model on the collocated grid.
#[pyclass(name = "QgModel")]
struct PyQgModel {
    inner: qg::QgModel,
}

#[pymethods]
impl PyQgModel {
    #[new]
    #[pyo3(signature = (nx=64, ny=128, dt=1e-4, rossby=0.0036, munk_ratio=0.032))]
    fn new(nx: usize, ny: usize, dt: f64, rossby: f64, munk_ratio: f64) -> PyResult<Self> {
        let params = ModelParams {
            nx,
            ny,
            dt,
            rossby,
            munk_ratio,
            ..ModelParams::default()
        };
        Ok(PyQgModel {
            inner: qg::QgModel::new(params).map_err(py_err)?,
        })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        let g = self.inner.grid();
        (g.nx, g.ny)
    }

    fn rest_state(&self) -> Vec<f64> {
        self.inner.rest_state().values
    }

    fn tendency(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        let q = field(self.inner.grid(), q)?;
        Ok(self.inner.tendency(&q).map_err(py_err)?.values)
    }

    fn step(&self, q: Vec<f64>) -> PyResult<Vec<f64>> {
        let q = field(self.inner.grid(), q)?;
        Ok(self.inner.rk4_step(&q).map_err(py_err)?.values)
    }

    /// Returns `(times, states)`.
    fn integrate(&self, py: Python<'_>, q0: Vec<f64>, t_end: f64, output_every: f64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let q0 = field(self.inner.grid(), q0)?;
        let traj = py
            .detach(|| self.inner.integrate(&q0, t_end, output_every))
            .map_err(py_err)?;
        Ok((traj.times, traj.states.into_iter().map(|s| s.values).collect()))
    }

    /// `(streamfunction, vorticity)` of a PV state.
    fn diagnose(&self, q: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let q = field(self.inner.grid(), q)?;
        let d = self.inner.diagnose(&q).map_err(py_err)?;
        Ok((d.psi.values, d.omega.values))
    }
}

/// Koopman analysis of an ensemble snapshot.
#[pyclass(name = "KoopmanAnalysis")]
struct PyKoopman {
    spec: KernelSpec,
    grid: Grid,
    members: Vec<Field2D>,
    gram: kernels::GramSystem,
    spectrum: koopman::KoopmanSpectrum,
    tangent: DMatrix<f64>,
}

#[pymethods]
impl PyKoopman {
    #[new]
    #[pyo3(signature = (nx, ny, members, tendencies, kernel="empirical", ell_g=1.0))]
    fn new(nx: usize, ny: usize, members: Vec<Vec<f64>>, tendencies: Vec<Vec<f64>>, kernel: &str, ell_g: f64) -> PyResult<Self> {
        let grid = Grid::new(nx, ny, 1.0).map_err(py_err)?;
        let spec = kernel_spec(kernel, ell_g)?;
        let members = members.into_iter().map(|v| field(grid, v)).collect::<PyResult<Vec<_>>>()?;
        let tend = tendencies.into_iter().map(|v| field(grid, v)).collect::<PyResult<Vec<_>>>()?;
        let gram = kernels::gram_matrix(&members, &spec).map_err(py_err)?;
        let m = kernels::generator_matrix(&members, &tend, &spec).map_err(py_err)?;
        let skew = koopman::assemble_generator(&m, &gram).map_err(py_err)?.skew;
        let spectrum = koopman::spectrum(&skew, &gram).map_err(py_err)?;
        let tangent = koopman::tangent_linear_matrix(&skew, &gram).map_err(py_err)?.t;
        Ok(PyKoopman {
            spec,
            grid,
            members,
            gram,
            spectrum,
            tangent,
        })
    }

    #[getter]
    fn gram(&self) -> Vec<Vec<f64>> {
        rows(&self.gram.k)
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.gram.epsilon
    }

    #[getter]
    fn omegas(&self) -> Vec<f64> {
        self.spectrum.omegas.clone()
    }

    /// `psi_l` at the members as `(real, imag)` row lists, one column per mode.
    fn eigenfunctions(&self, t: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let z = koopman::propagate_eigenfunctions(&self.spectrum, t);
        (rows(&z.map(|c| c.re)), rows(&z.map(|c| c.im)))
    }

    #[pyo3(signature = (c=1e3, threshold=1e-5))]
    fn lyapunov_times(&self, c: f64, threshold: f64) -> PyResult<Vec<(String, Vec<f64>)>> {
        let r = lyapunov::report(&self.spectrum, &self.gram, &self.tangent, c, threshold).map_err(py_err)?;
        let unscaled = lyapunov::kmle(&self.spectrum, &self.gram, KmleConvention::Unscaled).map_err(py_err)?;
        Ok(vec![
            ("modal".into(), r.times_modal),
            ("kmle".into(), r.times_kmle),
            ("kmle_unscaled".into(), unscaled.iter().map(|s| lyapunov::lyapunov_time(*s, c)).collect()),
            ("global".into(), r.times_global),
        ])
    }

    /// Regression coefficients of a new state, optionally Lyapunov-filtered
    /// at time `t`.
    #[pyo3(signature = (q0, t=None, c=1e3, filter_mode="mean_anchored"))]
    fn coefficients(&self, q0: Vec<f64>, t: Option<f64>, c: f64, filter_mode: &str) -> PyResult<Vec<f64>> {
        let q0 = field(self.grid, q0)?;
        let feats = kernels::KernelFeatures::new(&self.members, &self.spec).map_err(py_err)?;
        let beta = forecast::regression_coefficients(&q0, &feats, &self.gram).map_err(py_err)?.beta;
        let beta = match t {
            None => beta,
            Some(t) => {
                let mode = FilterMode::parse(filter_mode)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown filter mode `{filter_mode}`")))?;
                forecast::filtered_coefficients(&beta, &self.spectrum, t, c, mode)
            }
        };
        Ok(beta.iter().copied().collect())
    }
}

/// Staged pipeline driven by a `section.key = value` config.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    cfg: RunConfig,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config_text="", overrides=Vec::new(), fast=false))]
    fn new(config_text: &str, overrides: Vec<String>, fast: bool) -> PyResult<Self> {
        let mut cfg = RunConfig::parse(config_text).map_err(py_err)?;
        if fast {
            cfg.apply_fast_profile();
        }
        cfg.apply_overrides(&overrides).map_err(py_err)?;
        Ok(PyPipeline { cfg })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyPipeline {
            cfg: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    fn render(&self) -> String {
        self.cfg.render()
    }

    fn stage_hash(&self, stage: &str) -> PyResult<String> {
        let st = Stage::ALL
            .into_iter()
            .find(|s| s.name() == stage)
            .ok_or_else(|| PyValueError::new_err(format!("unknown stage `{stage}`")))?;
        Ok(self.cfg.stage_hash(st))
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.cfg.output_dir.clone()
    }

    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<()> {
        let f = match stage {
            "spinup" => pipeline::cmd_spinup,
            "ensemble" => pipeline::cmd_ensemble,
            "koopman" => pipeline::cmd_koopman,
            "lyapunov" => pipeline::cmd_lyapunov,
            "reconstruct" => pipeline::cmd_reconstruct,
            "assimilate" => pipeline::cmd_assimilate,
            "all" => pipeline::cmd_all,
            _ => return Err(PyValueError::new_err(format!("unknown stage `{stage}`"))),
        };
        py.detach(|| f(&self.cfg)).map_err(py_err)
    }
}

/// Records of a snapshot container as `(nx, ny, time, kind, values)`.
#[pyfunction]
fn read_snapshots(path: PathBuf) -> PyResult<Vec<(usize, usize, f64, u8, Vec<f64>)>> {
    let recs = io::read_records(&path, "the producing stage").map_err(py_err)?;
    Ok(recs
        .into_iter()
        .map(|r| (r.nx, r.ny, r.time, r.kind.tag(), r.values))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (sigma, c=1e3))]
fn lyapunov_time(sigma: f64, c: f64) -> f64 {
    lyapunov::lyapunov_time(sigma, c)
}

#[pymodule(name = "rkhs_ensemble")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQgModel>()?;
    m.add_class::<PyKoopman>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(read_snapshots, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov_time, m)?)?;
    Ok(())
}
