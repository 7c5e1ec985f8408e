use crate::error::Result;
use crate::field::{Field2D, FieldKind};

/// Arakawa (1966) nine-point Jacobian `J(psi, q) = psi_x q_y - psi_y q_x`.
///
/// Averages the three second-order forms `J++`, `J+x`, `Jx+`; with `psi`
/// constant on the boundary the interior sums of `q J` and `psi J` vanish
/// identically. Boundary entries are 0.
pub fn arakawa_jacobian(psi: &Field2D, q: &Field2D) -> Result<Field2D> {
    psi.ensure_same_grid(q)?;
    let g = psi.grid;
    let (nx, ny) = (g.nx, g.ny);
    let scale = 1.0 / (12.0 * g.dx() * g.dy());
    let p = &psi.values;
    let z = &q.values;
    let mut out = Field2D::zeros(g, FieldKind::Vorticity);

    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let c = i + nx * j;
            let (e, w, n, s) = (c + 1, c - 1, c + nx, c - nx);
            let (ne, nw, se, sw) = (n + 1, n - 1, s + 1, s - 1);

            let jpp = (p[e] - p[w]) * (z[n] - z[s]) - (p[n] - p[s]) * (z[e] - z[w]);
            let jpx = p[e] * (z[ne] - z[se]) - p[w] * (z[nw] - z[sw])
                - p[n] * (z[ne] - z[nw])
                + p[s] * (z[se] - z[sw]);
            let jxp = z[n] * (p[ne] - p[nw]) - z[s] * (p[se] - p[sw]) - z[e] * (p[ne] - p[se])
                + z[w] * (p[nw] - p[sw]);

            out.values[c] = (jpp + jpx + jxp) * scale;
        }
    }
    Ok(out)
}
