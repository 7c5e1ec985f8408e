//! Dirichlet Poisson solver by double sine transform.
//!
//! The sine modes `sin(m pi x / L) sin(n pi (y + L) / 2L)` are exact
//! eigenvectors of the 5-point Laplacian on the node grid, so dividing by the
//! stencil eigenvalues inverts `Delta_h` to round-off rather than
//! approximating the continuous operator.

use std::f64::consts::PI;
use std::sync::Arc;

use rustdct::{DctPlanner, Dst1};

use crate::error::{Error, Result};
use crate::field::{Field2D, FieldKind, Grid};

pub struct PoissonSolver {
    grid: Grid,
    dst_x: Arc<dyn Dst1<f64>>,
    dst_y: Arc<dyn Dst1<f64>>,
    /// `1 / mu_{m,n}` including the inverse-transform normalisation, laid out
    /// `m + (nx-2) * n`.
    inv_eig: Vec<f64>,
}

impl std::fmt::Debug for PoissonSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonSolver").field("grid", &self.grid).finish()
    }
}

/// Eigenvalue of the 5-point Laplacian for sine mode `(m, n)`, `m, n >= 1`.
pub fn laplacian_eigenvalue(grid: &Grid, m: usize, n: usize) -> f64 {
    let dx = grid.dx();
    let dy = grid.dy();
    let l = grid.length;
    let sx = (m as f64 * PI * dx / (2.0 * l)).sin();
    let sy = (n as f64 * PI * dy / (4.0 * l)).sin();
    -4.0 / (dx * dx) * sx * sx - 4.0 / (dy * dy) * sy * sy
}

impl PoissonSolver {
    pub fn new(grid: Grid) -> Self {
        let mx = grid.nx - 2;
        let my = grid.ny - 2;
        let mut planner = DctPlanner::new();
        let dst_x = planner.plan_dst1(mx);
        let dst_y = planner.plan_dst1(my);
        let norm = (2.0 / (mx + 1) as f64) * (2.0 / (my + 1) as f64);
        let mut inv_eig = Vec::with_capacity(mx * my);
        for n in 1..=my {
            for m in 1..=mx {
                inv_eig.push(norm / laplacian_eigenvalue(&grid, m, n));
            }
        }
        PoissonSolver {
            grid,
            dst_x,
            dst_y,
            inv_eig,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Solve `Delta_h psi = omega` at interior nodes with `psi = 0` on the
    /// boundary. Boundary values of `omega` are ignored.
    pub fn solve(&self, omega: &Field2D) -> Result<Field2D> {
        if omega.grid != self.grid {
            return Err(Error::shape(
                format!("{}x{}", self.grid.nx, self.grid.ny),
                format!("{}x{}", omega.grid.nx, omega.grid.ny),
            ));
        }
        omega.ensure_finite("poisson right-hand side")?;
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (mx, my) = (nx - 2, ny - 2);

        // interior block, x fastest
        let mut work = vec![0.0; mx * my];
        for j in 0..my {
            let src = &omega.values[(j + 1) * nx + 1..(j + 1) * nx + 1 + mx];
            work[j * mx..(j + 1) * mx].copy_from_slice(src);
        }

        self.transform(&mut work);
        for (w, s) in work.iter_mut().zip(&self.inv_eig) {
            *w *= s;
        }
        self.transform(&mut work);

        let mut psi = Field2D::zeros(self.grid, FieldKind::Streamfunction);
        for j in 0..my {
            let dst = &mut psi.values[(j + 1) * nx + 1..(j + 1) * nx + 1 + mx];
            dst.copy_from_slice(&work[j * mx..(j + 1) * mx]);
        }
        Ok(psi)
    }

    /// Unnormalised 2-D DST-I of the interior block, in place.
    fn transform(&self, work: &mut [f64]) {
        let (mx, my) = (self.grid.nx - 2, self.grid.ny - 2);
        // the FFT-backed DST expects part of its scratch to be zero on entry
        let mut scratch_x = vec![0.0; self.dst_x.get_scratch_len()];
        let mut scratch_y = vec![0.0; self.dst_y.get_scratch_len()];
        for row in work.chunks_exact_mut(mx) {
            scratch_x.fill(0.0);
            self.dst_x.process_dst1_with_scratch(row, &mut scratch_x);
        }
        let mut col = vec![0.0; my];
        for i in 0..mx {
            for j in 0..my {
                col[j] = work[i + j * mx];
            }
            scratch_y.fill(0.0);
            self.dst_y.process_dst1_with_scratch(&mut col, &mut scratch_y);
            for j in 0..my {
                work[i + j * mx] = col[j];
            }
        }
    }
}

/// 5-point Laplacian at interior nodes; boundary entries of the result are 0.
pub fn laplacian(f: &Field2D) -> Field2D {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let idx2 = 1.0 / (g.dx() * g.dx());
    let idy2 = 1.0 / (g.dy() * g.dy());
    let v = &f.values;
    let mut out = Field2D::zeros(g, f.kind);
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let k = i + nx * j;
            out.values[k] = (v[k + 1] - 2.0 * v[k] + v[k - 1]) * idx2
                + (v[k + nx] - 2.0 * v[k] + v[k - nx]) * idy2;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_interior(grid: Grid, seed: u64) -> Field2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Field2D::zeros(grid, FieldKind::Vorticity);
        for j in 1..grid.ny - 1 {
            for i in 1..grid.nx - 1 {
                f.values[grid.idx(i, j)] = rng.random_range(-1.0..1.0);
            }
        }
        f
    }

    // independent stencil written out node by node
    fn stencil_at(psi: &Field2D, i: usize, j: usize) -> f64 {
        let g = psi.grid;
        (psi.at(i + 1, j) - 2.0 * psi.at(i, j) + psi.at(i - 1, j)) / (g.dx() * g.dx())
            + (psi.at(i, j + 1) - 2.0 * psi.at(i, j) + psi.at(i, j - 1)) / (g.dy() * g.dy())
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let g = Grid::new(16, 24, 1.0).unwrap();
        let s = PoissonSolver::new(g);
        let psi = s.solve(&Field2D::zeros(g, FieldKind::Vorticity)).unwrap();
        assert!(psi.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_mode_divides_by_stencil_eigenvalue() {
        let g = Grid::new(20, 36, 1.0).unwrap();
        let mode = Field2D::from_fn(g, FieldKind::Vorticity, |x, y| {
            (PI * x).sin() * (PI * (y + 1.0) / 2.0).sin()
        });
        // eigenvalue measured by applying the stencil to the sampled mode
        let (ic, jc) = (g.nx / 2, g.ny / 2);
        let mu = stencil_at(&mode, ic, jc) / mode.at(ic, jc);
        assert!((mu - laplacian_eigenvalue(&g, 1, 1)).abs() < 1e-9 * mu.abs());
        let psi = PoissonSolver::new(g).solve(&mode).unwrap();
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                let expect = mode.at(i, j) / mu;
                assert!((psi.at(i, j) - expect).abs() < 1e-12 * (1.0 / mu.abs()));
            }
        }
    }

    #[test]
    fn residual_is_round_off() {
        for (seed, (nx, ny)) in [(16, 32), (64, 128), (9, 33)].into_iter().enumerate() {
            let g = Grid::new(nx, ny, 1.0).unwrap();
            let omega = random_interior(g, seed as u64);
            let psi = PoissonSolver::new(g).solve(&omega).unwrap();
            let mut res: f64 = 0.0;
            for j in 1..g.ny - 1 {
                for i in 1..g.nx - 1 {
                    res = res.max((stencil_at(&psi, i, j) - omega.at(i, j)).abs());
                }
            }
            assert!(res / omega.max_abs() < 1e-12, "residual {res}");
            for i in 0..g.nx {
                assert_eq!(psi.at(i, 0), 0.0);
                assert_eq!(psi.at(i, g.ny - 1), 0.0);
            }
        }
    }

    #[test]
    fn mismatched_grid_rejected() {
        let s = PoissonSolver::new(Grid::new(16, 16, 1.0).unwrap());
        let w = Field2D::zeros(Grid::new(16, 20, 1.0).unwrap(), FieldKind::Vorticity);
        assert!(s.solve(&w).is_err());
    }
}
