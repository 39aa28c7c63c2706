//! Uniform cell-centred rectangular grid with homogeneous Neumann discrete
//! calculus.
//!
//! Cells are indexed row-major: `values[j * nx + i]` is the cell whose centre
//! sits at `((i + 1/2) dx, (j + 1/2) dy)`. Boundary conditions enter through
//! mirrored ghost cells, so every boundary face carries zero normal gradient
//! and zero flux.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{Error, Result};

/// Minimum cell count per direction.
pub const MIN_CELLS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(Error::InvalidGrid(format!(
                "need at least {MIN_CELLS} cells per direction, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && lx.is_finite() && ly > 0.0 && ly.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "edge lengths must be positive and finite, got {lx}x{ly}"
            )));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    /// `n x n` cells on the unit square.
    pub fn unit_square(n: usize) -> Result<Self> {
        Self::new(n, n, 1.0, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// |Ω|
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.lx).contains(&x) && (0.0..=self.ly).contains(&y)
    }

    /// Same domain with both cell counts multiplied by `factor`.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::new(self.nx * factor, self.ny * factor, self.lx, self.ly)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} on ({}, {})", self.nx, self.ny, self.lx, self.ly)
    }
}

/// Cell-centred scalar samples on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    grid: GridSpec,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: GridSpec, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f(x, y)` at every cell centre.
    pub fn from_fn(grid: GridSpec, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.center(i, j);
                values.push(f(x, y));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        integrate(self) / self.grid.area()
    }

    /// Writes the snapshot CSV: a `# nx,ny,lx,ly,t` header, a commented line
    /// carrying those values, then one comma-separated line per grid row.
    pub fn write_csv<W: Write>(&self, mut w: W, t: f64) -> io::Result<()> {
        let g = &self.grid;
        writeln!(w, "# nx,ny,lx,ly,t")?;
        writeln!(w, "# {},{},{},{},{}", g.nx, g.ny, g.lx, g.ly, t)?;
        let mut line = String::new();
        for row in self.values.chunks(g.nx) {
            line.clear();
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Inverse of [`Field::write_csv`]; returns the field and its time stamp.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, f64)> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("snapshot truncated".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        if header.trim() != "# nx,ny,lx,ly,t" {
            return Err(Error::Parse(format!("bad snapshot header `{header}`")));
        }
        let meta = next()?;
        let parts: Vec<&str> = meta.trim_start_matches('#').trim().split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Parse(format!("bad snapshot metadata `{meta}`")));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
        };
        let nx = num(parts[0])? as usize;
        let ny = num(parts[1])? as usize;
        let grid = GridSpec::new(nx, ny, num(parts[2])?, num(parts[3])?)?;
        let t = num(parts[4])?;
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..ny {
            let line = next()?;
            for s in line.split(',') {
                values.push(num(s)?);
            }
        }
        Ok((Self::from_values(grid, values)?, t))
    }
}

/// ∫_Ω f as the cell-area-weighted sum.
pub fn integrate(f: &Field) -> f64 {
    f.grid.cell_area() * f.values.iter().sum::<f64>()
}

/// ∫_Ω f g
pub fn inner(f: &Field, g: &Field) -> f64 {
    debug_assert_eq!(f.grid, g.grid);
    f.grid.cell_area() * f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum::<f64>()
}

/// Five-point Laplacian with mirrored ghost cells.
pub fn laplacian(f: &Field) -> Field {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (idx2, idy2) = (1.0 / (g.dx() * g.dx()), 1.0 / (g.dy() * g.dy()));
    let v = &f.values;
    let mut out = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let c = v[j * nx + i];
            let w = if i > 0 { v[j * nx + i - 1] } else { c };
            let e = if i + 1 < nx { v[j * nx + i + 1] } else { c };
            let s = if j > 0 { v[(j - 1) * nx + i] } else { c };
            let n = if j + 1 < ny { v[(j + 1) * nx + i] } else { c };
            out[j * nx + i] = (e - 2.0 * c + w) * idx2 + (n - 2.0 * c + s) * idy2;
        }
    }
    Field { grid: g, values: out }
}

/// Face-normal gradient samples: `(gx, gy)` where `gx[j*(nx-1) + i]` is
/// `(f[i+1,j] - f[i,j]) / dx` and `gy[j*nx + i]` is `(f[i,j+1] - f[i,j]) / dy`.
/// Boundary faces are omitted (their gradient is zero).
pub fn face_gradients(f: &Field) -> (Vec<f64>, Vec<f64>) {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (idx, idy) = (1.0 / g.dx(), 1.0 / g.dy());
    let v = &f.values;
    let mut gx = Vec::with_capacity((nx - 1) * ny);
    for j in 0..ny {
        for i in 0..nx - 1 {
            gx.push((v[j * nx + i + 1] - v[j * nx + i]) * idx);
        }
    }
    let mut gy = Vec::with_capacity(nx * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx {
            gy.push((v[(j + 1) * nx + i] - v[j * nx + i]) * idy);
        }
    }
    (gx, gy)
}

/// Cell-centred gradient: average of the two adjacent face gradients, with
/// boundary faces contributing zero.
pub fn cell_gradient(f: &Field) -> (Field, Field) {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (gx, gy) = face_gradients(f);
    let mut cx = vec![0.0; g.len()];
    let mut cy = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let west = if i > 0 { gx[j * (nx - 1) + i - 1] } else { 0.0 };
            let east = if i + 1 < nx { gx[j * (nx - 1) + i] } else { 0.0 };
            let south = if j > 0 { gy[(j - 1) * nx + i] } else { 0.0 };
            let north = if j + 1 < ny { gy[j * nx + i] } else { 0.0 };
            cx[j * nx + i] = 0.5 * (west + east);
            cy[j * nx + i] = 0.5 * (south + north);
        }
    }
    (
        Field { grid: g, values: cx },
        Field { grid: g, values: cy },
    )
}

/// Largest face-normal gradient component, the ‖∇f‖_∞ used for step control.
pub fn grad_sup(f: &Field) -> f64 {
    let (gx, gy) = face_gradients(f);
    gx.iter().chain(&gy).fold(0.0, |m, v| m.max(v.abs()))
}

/// (‖∇f‖₂², ‖∇f‖₄⁴).
///
/// The L² part sums squared face gradients times cell area, which makes
/// `-∫ f Δf = ‖∇f‖₂²` hold exactly. The L⁴ part uses the cell-centred
/// gradient so that both components are co-located.
pub fn grad_norms(f: &Field) -> (f64, f64) {
    let g = f.grid;
    let (gx, gy) = face_gradients(f);
    let l2 = g.cell_area() * gx.iter().chain(&gy).map(|v| v * v).sum::<f64>();
    let (cx, cy) = cell_gradient(f);
    let l4 = g.cell_area()
        * cx
            .values
            .iter()
            .zip(&cy.values)
            .map(|(a, b)| {
                let s = a * a + b * b;
                s * s
            })
            .sum::<f64>();
    (l2, l4)
}

/// Discrete Lᵖ norm, `p >= 1`; pass `f64::INFINITY` for the sup norm.
pub fn lp_norm(f: &Field, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidArgument(format!("Lp norm needs p >= 1, got {p}")));
    }
    if p.is_infinite() {
        return Ok(f.sup_abs());
    }
    let ca = f.grid.cell_area();
    let s: f64 = if p == 1.0 {
        f.values.iter().map(|v| v.abs()).sum()
    } else if p == 2.0 {
        f.values.iter().map(|v| v * v).sum()
    } else {
        f.values.iter().map(|v| v.abs().powf(p)).sum()
    };
    Ok((ca * s).powf(1.0 / p))
}

/// Discrete χ ∇·(u ∇v) in conservative face-flux form.
///
/// The face velocity is `a = χ ∂v/∂n`; the interface density is taken from
/// the upwind side of `a`. Boundary faces carry no flux.
pub fn chemo_flux_divergence(u: &Field, v: &Field, chi: f64) -> Field {
    flux_divergence_with(u, v, chi, |a, left, right| if a >= 0.0 { left } else { right })
}

/// Same flux with the arithmetic mean as interface density. Second order,
/// not positivity preserving; used to bound the upwinding error.
pub fn chemo_flux_divergence_centered(u: &Field, v: &Field, chi: f64) -> Field {
    flux_divergence_with(u, v, chi, |_, left, right| 0.5 * (left + right))
}

fn flux_divergence_with(
    u: &Field,
    v: &Field,
    chi: f64,
    interface: impl Fn(f64, f64, f64) -> f64,
) -> Field {
    debug_assert_eq!(u.grid, v.grid);
    let g = u.grid;
    let (nx, ny) = (g.nx, g.ny);
    let (idx, idy) = (1.0 / g.dx(), 1.0 / g.dy());
    let (uv, vv) = (&u.values, &v.values);
    let mut out = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx - 1 {
            let (l, r) = (j * nx + i, j * nx + i + 1);
            let a = chi * (vv[r] - vv[l]) * idx;
            let flux = a * interface(a, uv[l], uv[r]) * idx;
            out[l] += flux;
            out[r] -= flux;
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx {
            let (s, n) = (j * nx + i, (j + 1) * nx + i);
            let a = chi * (vv[n] - vv[s]) * idy;
            let flux = a * interface(a, uv[s], uv[n]) * idy;
            out[s] += flux;
            out[n] -= flux;
        }
    }
    Field { grid: g, values: out }
}

/// Eigenvalues of the 1D Neumann second-difference operator on `n` cells of
/// width `h`: `-(2/h²)(1 - cos(πk/n))`, `k = 0..n`.
pub fn neumann_eigenvalues(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|k| -(2.0 / (h * h)) * (1.0 - (std::f64::consts::PI * k as f64 / n as f64).cos()))
        .collect()
}

/// Implicit diffusion solver: returns g with `(1 + σ dt - dt Δ_h) g = f`.
///
/// Δ_h is diagonalised by a DCT-II along each axis; plans are built once
/// per grid.
#[derive(Clone)]
pub struct DiffusionSolver {
    grid: GridSpec,
    dct_x: Arc<dyn TransformType2And3<f64>>,
    dct_y: Arc<dyn TransformType2And3<f64>>,
    lam_x: Vec<f64>,
    lam_y: Vec<f64>,
}

impl fmt::Debug for DiffusionSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSolver").field("grid", &self.grid).finish()
    }
}

impl DiffusionSolver {
    pub fn new(grid: GridSpec) -> Self {
        let mut planner = DctPlanner::new();
        Self {
            grid,
            dct_x: planner.plan_dct2(grid.nx),
            dct_y: planner.plan_dct2(grid.ny),
            lam_x: neumann_eigenvalues(grid.nx, grid.dx()),
            lam_y: neumann_eigenvalues(grid.ny, grid.dy()),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn solve(&self, f: &Field, dt: f64, sigma: f64) -> Field {
        let scale = 1.0 + sigma * dt;
        self.apply_spectral(f, |lx, ly| 1.0 / (scale - dt * (lx + ly)))
    }

    /// Applies `multiplier(λx_k, λy_l)` to every cosine mode of `f`.
    pub fn apply_spectral(&self, f: &Field, multiplier: impl Fn(f64, f64) -> f64) -> Field {
        debug_assert_eq!(f.grid, self.grid);
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut data = f.values.clone();
        let mut col = vec![0.0; ny];
        for row in data.chunks_mut(nx) {
            self.dct_x.process_dct2(row);
        }
        for i in 0..nx {
            for j in 0..ny {
                col[j] = data[j * nx + i];
            }
            self.dct_y.process_dct2(&mut col);
            let lx = self.lam_x[i];
            for (j, c) in col.iter_mut().enumerate() {
                *c *= multiplier(lx, self.lam_y[j]);
            }
            self.dct_y.process_dct3(&mut col);
            for j in 0..ny {
                data[j * nx + i] = col[j];
            }
        }
        // DCT-III after DCT-II scales by n/2 per axis.
        let norm = 4.0 / (nx as f64 * ny as f64);
        for row in data.chunks_mut(nx) {
            self.dct_x.process_dct3(row);
            for v in row.iter_mut() {
                *v *= norm;
            }
        }
        Field {
            grid: self.grid,
            values: data,
        }
    }
}

/// One-shot wrapper around [`DiffusionSolver::solve`].
pub fn diffusion_solve(f: &Field, dt: f64, sigma: f64) -> Field {
    DiffusionSolver::new(f.grid).solve(f, dt, sigma)
}

/// Sets negative samples to zero and returns the removed mass ∫(f)₋.
pub fn clip_negative(f: &mut Field) -> f64 {
    let mut removed = 0.0;
    for v in f.values.iter_mut() {
        if *v < 0.0 {
            removed -= *v;
            *v = 0.0;
        }
    }
    removed * f.grid.cell_area()
}
