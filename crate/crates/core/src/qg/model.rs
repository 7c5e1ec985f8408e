use std::f64::consts::PI;

use log::warn;

use super::arakawa::arakawa_jacobian;
use super::poisson::{laplacian, PoissonSolver};
use crate::error::{Error, Result};
use crate::field::{Field2D, FieldKind, Grid};

/// RK4 stability interval on the negative real axis.
pub const RK4_REAL_AXIS_LIMIT: f64 = 2.785;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Forcing {
    /// `amplitude * sin(pi * y)`
    Sine { amplitude: f64 },
    None,
}

impl Forcing {
    pub fn eval(&self, y: f64) -> f64 {
        match *self {
            Forcing::Sine { amplitude } => amplitude * (PI * y).sin(),
            Forcing::None => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub rossby: f64,
    pub munk_ratio: f64,
    pub domain_length: f64,
    pub nx: usize,
    pub ny: usize,
    pub dt: f64,
    pub forcing: Forcing,
    /// Integration aborts once `max |q|` exceeds this.
    pub divergence_guard: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            rossby: 0.0036,
            munk_ratio: 0.032,
            domain_length: 1.0,
            nx: 64,
            ny: 128,
            dt: 1e-4,
            forcing: Forcing::Sine { amplitude: 1.0 },
            divergence_guard: 1e3,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.rossby > 0.0) {
            return bad(format!("rossby must be > 0, got {}", self.rossby));
        }
        if !(self.munk_ratio > 0.0) {
            return bad(format!("munk_ratio must be > 0, got {}", self.munk_ratio));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.divergence_guard > 0.0) {
            return bad("divergence_guard must be > 0".into());
        }
        Grid::new(self.nx, self.ny, self.domain_length)?;
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid {
            nx: self.nx,
            ny: self.ny,
            length: self.domain_length,
        }
    }

    /// Effective hyperviscosity acting on `q`: `(delta/L)^5 / Ro`.
    pub fn hyperviscosity(&self) -> f64 {
        self.munk_ratio.powi(5) / self.rossby
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Field2D>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &Field2D {
        self.states.last().expect("trajectory is never empty")
    }

    /// Index of the stored time nearest to `t`, with a warning when the match
    /// is not exact to 1e-9.
    pub fn nearest_index(&self, t: f64) -> usize {
        let (k, gap) = self
            .times
            .iter()
            .enumerate()
            .map(|(k, s)| (k, (s - t).abs()))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        if gap > 1e-9 {
            warn!("time {t} not stored; using nearest snapshot t={}", self.times[k]);
        }
        k
    }

    pub fn at_time(&self, t: f64) -> &Field2D {
        &self.states[self.nearest_index(t)]
    }
}

#[derive(Debug, Clone)]
pub struct Diagnosed {
    pub omega: Field2D,
    pub psi: Field2D,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    /// `max|u| dt/dx + max|v| dt/dy`
    pub cfl: f64,
    /// `dt * nu * lambda_max(lap^2)`, to compare with [`RK4_REAL_AXIS_LIMIT`].
    pub hyperviscous: f64,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.cfl < 0.5 && self.hyperviscous < RK4_REAL_AXIS_LIMIT
    }
}

/// Solver state shared by all members: parameters, cached sine-transform plans
/// and the latitude/forcing fields. Immutable after construction.
#[derive(Debug)]
pub struct QgModel {
    params: ModelParams,
    grid: Grid,
    poisson: PoissonSolver,
    latitude: Field2D,
    forcing: Field2D,
}

impl QgModel {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let grid = params.grid();
        let forcing = Field2D::from_fn(grid, FieldKind::PotentialVorticity, |_, y| {
            params.forcing.eval(y)
        });
        Ok(QgModel {
            params,
            grid,
            poisson: PoissonSolver::new(grid),
            latitude: grid.latitude(),
            forcing,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn poisson(&self) -> &PoissonSolver {
        &self.poisson
    }

    /// The rest state `q = y`.
    pub fn rest_state(&self) -> Field2D {
        self.latitude.clone()
    }

    fn check_grid(&self, q: &Field2D) -> Result<()> {
        if q.grid != self.grid {
            return Err(Error::shape(
                format!("{}x{}", self.grid.nx, self.grid.ny),
                format!("{}x{}", q.grid.nx, q.grid.ny),
            ));
        }
        Ok(())
    }

    /// `omega = (q - y)/Ro` and `psi = lap_h^{-1} omega`.
    pub fn diagnose(&self, q: &Field2D) -> Result<Diagnosed> {
        self.check_grid(q)?;
        q.ensure_finite("potential vorticity")?;
        let inv_ro = 1.0 / self.params.rossby;
        let omega = Field2D {
            grid: self.grid,
            kind: FieldKind::Vorticity,
            values: q
                .values
                .iter()
                .zip(&self.latitude.values)
                .map(|(q, y)| (q - y) * inv_ro)
                .collect(),
        };
        let psi = self.poisson.solve(&omega)?;
        Ok(Diagnosed { omega, psi })
    }

    /// `dq/dt = f - J(psi, q) - (delta/L)^5 lap_h(lap_h omega)` at interior
    /// nodes; zero on the boundary where `q` is held fixed.
    pub fn tendency(&self, q: &Field2D) -> Result<Field2D> {
        let Diagnosed { mut omega, psi } = self.diagnose(q)?;
        zero_boundary(&mut omega);
        let jac = arakawa_jacobian(&psi, q)?;
        let lap1 = laplacian(&omega);
        let bilap = laplacian(&lap1);
        let visc = self.params.munk_ratio.powi(5);

        let mut out = Field2D::zeros(self.grid, FieldKind::PotentialVorticity);
        let nx = self.grid.nx;
        for j in 1..self.grid.ny - 1 {
            for i in 1..nx - 1 {
                let k = i + nx * j;
                out.values[k] = self.forcing.values[k] - jac.values[k] - visc * bilap.values[k];
            }
        }
        out.ensure_finite("tendency")?;
        Ok(out)
    }

    /// One classical RK4 step; boundary `q` is reset to `y`.
    pub fn rk4_step(&self, q: &Field2D) -> Result<Field2D> {
        let dt = self.params.dt;
        let k1 = self.tendency(q)?;
        let k2 = self.tendency(&stage(q, &k1, 0.5 * dt))?;
        let k3 = self.tendency(&stage(q, &k2, 0.5 * dt))?;
        let k4 = self.tendency(&stage(q, &k3, dt))?;
        let mut next = q.clone();
        next.kind = FieldKind::PotentialVorticity;
        let w = dt / 6.0;
        for (k, v) in next.values.iter_mut().enumerate() {
            *v += w * (k1.values[k] + 2.0 * k2.values[k] + 2.0 * k3.values[k] + k4.values[k]);
        }
        self.pin_boundary(&mut next);
        next.ensure_finite("rk4 update")?;
        Ok(next)
    }

    fn pin_boundary(&self, q: &mut Field2D) {
        let g = self.grid;
        for j in 0..g.ny {
            for i in 0..g.nx {
                if g.is_boundary(i, j) {
                    let k = g.idx(i, j);
                    q.values[k] = self.latitude.values[k];
                }
            }
        }
    }

    pub fn stability(&self, q: &Field2D) -> Result<StabilityReport> {
        let psi = self.diagnose(q)?.psi;
        let g = self.grid;
        let (dx, dy, dt) = (g.dx(), g.dy(), self.params.dt);
        let (mut umax, mut vmax) = (0.0_f64, 0.0_f64);
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                let u = -(psi.at(i, j + 1) - psi.at(i, j - 1)) / (2.0 * dy);
                let v = (psi.at(i + 1, j) - psi.at(i - 1, j)) / (2.0 * dx);
                umax = umax.max(u.abs());
                vmax = vmax.max(v.abs());
            }
        }
        let lam = 4.0 / (dx * dx) + 4.0 / (dy * dy);
        Ok(StabilityReport {
            cfl: umax * dt / dx + vmax * dt / dy,
            hyperviscous: dt * self.params.hyperviscosity() * lam * lam,
        })
    }

    /// Integrate from `q0` to `t_end`, storing `q` every `output_every`.
    ///
    /// Step counts are rounded to whole multiples of `dt`; the run is fully
    /// deterministic so restarting from a stored snapshot reproduces the
    /// continuation bit for bit.
    pub fn integrate(&self, q0: &Field2D, t_end: f64, output_every: f64) -> Result<Trajectory> {
        self.check_grid(q0)?;
        q0.ensure_finite("initial condition")?;
        if t_end < 0.0 {
            return Err(Error::InvalidParam(format!("t_end must be >= 0, got {t_end}")));
        }
        let mut traj = Trajectory {
            times: vec![0.0],
            states: vec![q0.clone()],
        };
        if t_end == 0.0 {
            return Ok(traj);
        }
        if !(output_every > 0.0) {
            return Err(Error::InvalidParam(format!(
                "output_every must be > 0, got {output_every}"
            )));
        }
        let dt = self.params.dt;
        let steps_per_output = (output_every / dt).round().max(1.0) as usize;
        if ((steps_per_output as f64) * dt - output_every).abs() > 1e-9 * output_every {
            warn!(
                "output_every={output_every} is not a multiple of dt={dt}; using {} steps",
                steps_per_output
            );
        }
        let n_outputs = (t_end / output_every).round() as usize;
        if ((n_outputs as f64) * output_every - t_end).abs() > 1e-9 * t_end.max(1.0) {
            warn!("t_end={t_end} rounded to {} outputs", n_outputs);
        }

        let stab = self.stability(q0)?;
        if !stab.is_stable() {
            warn!(
                "stability diagnostic exceeded: cfl={:.3}, hyperviscous={:.3}",
                stab.cfl, stab.hyperviscous
            );
        }

        let guard = self.params.divergence_guard;
        let mut q = q0.clone();
        let mut step = 0usize;
        for k in 1..=n_outputs {
            for _ in 0..steps_per_output {
                q = match self.rk4_step(&q) {
                    Ok(next) => next,
                    Err(Error::NonFinite(_)) => {
                        return Err(Error::Diverged {
                            time: (step + 1) as f64 * dt,
                            last_stable: step as f64 * dt,
                            norm: f64::NAN,
                        })
                    }
                    Err(e) => return Err(e),
                };
                step += 1;
                let norm = q.max_abs();
                if norm > guard {
                    return Err(Error::Diverged {
                        time: step as f64 * dt,
                        last_stable: (step - 1) as f64 * dt,
                        norm,
                    });
                }
            }
            traj.times.push(k as f64 * output_every);
            traj.states.push(q.clone());
        }
        Ok(traj)
    }
}

fn stage(q: &Field2D, k: &Field2D, h: f64) -> Field2D {
    let mut s = q.clone();
    s.axpy(h, k);
    s
}

fn zero_boundary(f: &mut Field2D) {
    let g = f.grid;
    for i in 0..g.nx {
        f.values[g.idx(i, 0)] = 0.0;
        f.values[g.idx(i, g.ny - 1)] = 0.0;
    }
    for j in 0..g.ny {
        f.values[g.idx(0, j)] = 0.0;
        f.values[g.idx(g.nx - 1, j)] = 0.0;
    }
}
