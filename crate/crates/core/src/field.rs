//! Scalar fields on the collocated node grid of the basin `[0, L] x [-L, L]`.

use crate::error::{Error, Result};

/// Node grid of the rectangular basin. Index `(i, j)` is the node at
/// `x = i*dx`, `y = -L + j*dy`; storage is x-fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub length: f64,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, length: f64) -> Result<Self> {
        if nx < 8 || ny < 8 {
            return Err(Error::InvalidParam(format!(
                "grid must be at least 8x8, got {nx}x{ny}"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidParam(format!("domain length {length}")));
        }
        Ok(Grid { nx, ny, length })
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        2.0 * self.length / (self.ny - 1) as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Trapezoidal quadrature weight of node `(i, j)`; the weights sum to the
    /// basin area `2 L^2`.
    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        wx * wy * self.cell_area()
    }

    /// Weighted sum `sum_ij w_ij a_ij b_ij`, the discrete L2 inner product.
    pub fn weighted_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), self.len());
        debug_assert_eq!(b.len(), self.len());
        let nx = self.nx;
        let row = |j: usize| {
            let r = j * nx;
            let ar = &a[r..r + nx];
            let br = &b[r..r + nx];
            let inner: f64 = ar[1..nx - 1]
                .iter()
                .zip(&br[1..nx - 1])
                .map(|(x, y)| x * y)
                .sum();
            inner + 0.5 * (ar[0] * br[0] + ar[nx - 1] * br[nx - 1])
        };
        let mut total = 0.5 * (row(0) + row(self.ny - 1));
        for j in 1..self.ny - 1 {
            total += row(j);
        }
        total * self.cell_area()
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        -self.length + j as f64 * self.dy()
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i == self.nx - 1 || j == self.ny - 1
    }

    /// Field holding the latitude coordinate `y` at every node.
    pub fn latitude(&self) -> Field2D {
        Field2D::from_fn(*self, FieldKind::PotentialVorticity, |_, y| y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    PotentialVorticity,
    Streamfunction,
    Vorticity,
    Matrix,
}

impl FieldKind {
    pub fn tag(self) -> u8 {
        match self {
            FieldKind::PotentialVorticity => 0,
            FieldKind::Streamfunction => 1,
            FieldKind::Vorticity => 2,
            FieldKind::Matrix => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => FieldKind::PotentialVorticity,
            1 => FieldKind::Streamfunction,
            2 => FieldKind::Vorticity,
            3 => FieldKind::Matrix,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field2D {
    pub grid: Grid,
    pub kind: FieldKind,
    pub values: Vec<f64>,
}

impl Field2D {
    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        Field2D {
            grid,
            kind,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: Grid, kind: FieldKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(grid.len(), values.len()));
        }
        Ok(Field2D { grid, kind, values })
    }

    pub fn from_fn(grid: Grid, kind: FieldKind, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                values.push(f(grid.x(i), grid.y(j)));
            }
        }
        Field2D { grid, kind, values }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn with_kind(mut self, kind: FieldKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn ensure_same_grid(&self, other: &Field2D) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::shape(
                format!("{}x{}", self.grid.nx, self.grid.ny),
                format!("{}x{}", other.grid.nx, other.grid.ny),
            ));
        }
        Ok(())
    }

    /// Discrete L2 inner product (trapezoidal weights).
    pub fn dot(&self, other: &Field2D) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        self.grid.weighted_dot(&self.values, &other.values)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// Squared discrete L2 distance.
    pub fn dist_sq(&self, other: &Field2D) -> f64 {
        let d = self.sub(other);
        d.norm_sq()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Field2D) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> Field2D {
        Field2D {
            grid: self.grid,
            kind: self.kind,
            values: self.values.iter().map(|v| alpha * v).collect(),
        }
    }

    pub fn sub(&self, other: &Field2D) -> Field2D {
        Field2D {
            grid: self.grid,
            kind: self.kind,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

/// Linear combination `sum_i coeffs[i] * fields[i]`.
pub fn combine(coeffs: &[f64], fields: &[&Field2D]) -> Field2D {
    assert_eq!(coeffs.len(), fields.len());
    assert!(!fields.is_empty());
    let mut out = Field2D::zeros(fields[0].grid, fields[0].kind);
    for (c, f) in coeffs.iter().zip(fields) {
        if *c != 0.0 {
            out.axpy(*c, f);
        }
    }
    out
}
